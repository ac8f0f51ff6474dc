"""
Square-root unscented Kalman filter for range-only tracking.

The covariance is carried as an upper Cholesky factor throughout. The
measurement update avoids forming the Kalman gain: T = Sigma_sz Uz^{-1} is
found by triangular solves and the factor is downdated by the columns of T.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq
from scipy.special import gammainc

from core.exceptions import ConfigError, TrackingError
from kernels.logic import (
    IndefiniteDowndate,
    UpperCholesky,
    chol_downdate,
    cov_to_factor,
    qr_factor,
    solve_lower,
    solve_upper_multi,
)

logger = logging.getLogger(__name__)

CHI2_XTOL = 1e-8


class FilterNumericalFailure(TrackingError):
    pass


class NegativeSigmaWeight(TrackingError, ValueError):
    pass


@dataclass(frozen=True)
class FilterState:
    mean: NDArray[np.float64]
    factor: UpperCholesky

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "factor", np.asarray(self.factor, dtype=float))

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def covariance(self):
        return self.factor.T @ self.factor

    @property
    def position(self):
        return self.mean[:2]

    def is_finite(self):
        return bool(np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.factor)))


@dataclass(frozen=True)
class SigmaSet:
    points: NDArray[np.float64]
    weights: NDArray[np.float64]
    eta_alpha: float
    alpha: float | None = None

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def mean(self):
        return self.points[0]


@dataclass(frozen=True)
class InnovationStats:
    z_pred: NDArray[np.float64]
    Uz: UpperCholesky
    cross: NDArray[np.float64]


@dataclass
class FilterDiagnostics:
    """Per-filter counters of recoverable numerical events."""
    downdate_fallbacks: int = 0
    projected_points: int = 0
    projection_epochs: int = 0
    infeasible_skips: int = 0
    infeasible_means: int = 0
    per_epoch_projected: list = field(default_factory=list)
    innovation_sq_sum: float = 0.0
    innovation_count: int = 0

    def record_innovation(self, whitened):
        whitened = np.asarray(whitened, dtype=float)
        self.innovation_sq_sum += float(whitened @ whitened)
        self.innovation_count += len(whitened)

    @property
    def innovation_nis(self):
        """Mean squared whitened innovation per range; about 1 for a consistent filter."""
        if not self.innovation_count:
            return None
        return self.innovation_sq_sum / self.innovation_count

    def merge(self, other):
        self.downdate_fallbacks += other.downdate_fallbacks
        self.projected_points += other.projected_points
        self.projection_epochs += other.projection_epochs
        self.infeasible_skips += other.infeasible_skips
        self.infeasible_means += other.infeasible_means
        self.innovation_sq_sum += other.innovation_sq_sum
        self.innovation_count += other.innovation_count
        self.per_epoch_projected.extend(other.per_epoch_projected)

    def as_dict(self):
        return {
            "downdate_fallbacks": self.downdate_fallbacks,
            "projected_points": self.projected_points,
            "projection_epochs": self.projection_epochs,
            "infeasible_skips": self.infeasible_skips,
            "infeasible_means": self.infeasible_means,
            "innovation_nis": self.innovation_nis,
        }


def chi2_cdf(x, N):
    return gammainc(N / 2.0, x / 2.0)


def eta_from_alpha(alpha, N) -> float:
    """
    Chi-square(N) quantile at confidence `alpha`: the squared Mahalanobis radius
    of the confidence ellipsoid the sigma points are placed on.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    hi = float(N)
    while chi2_cdf(hi, N) < alpha:
        hi *= 2.0
    return float(brentq(lambda x: chi2_cdf(x, N) - alpha, 0.0, hi, xtol=CHI2_XTOL))


def checked_eta(alpha, N) -> float:
    """eta_alpha for a filter; rejects confidences whose centre weight would be negative."""
    eta = eta_from_alpha(alpha, N)
    if eta < N:
        raise ConfigError(
            f"alpha = {alpha} gives eta_alpha = {eta:.4f} < N = {N}; the centre sigma weight would be negative"
        )
    return eta


def sigma_weights(N, eta_alpha):
    w = np.full(2 * N + 1, 1.0 / (2.0 * eta_alpha))
    w[0] = 1.0 - N / eta_alpha
    return w


def predict(state, model) -> FilterState:
    """A priori pair: mean F s, factor qr([U F^T; Q^{1/2} G^T])."""
    stack = np.vstack([state.factor @ model.F.T, model.sqrt_q[:, None] * model.G.T])
    return FilterState(model.F @ state.mean, qr_factor(stack))


def gen_sigma(mean, factor, eta_alpha, alpha=None) -> SigmaSet:
    if not eta_alpha > 0:
        raise ConfigError(f"eta_alpha must be > 0, got {eta_alpha}")
    mean = np.asarray(mean, dtype=float)
    N = mean.shape[0]
    # Rows of U are the columns of U^T.
    spread = np.sqrt(eta_alpha) * np.asarray(factor, dtype=float)
    points = np.vstack([mean, mean + spread, mean - spread])
    return SigmaSet(points=points, weights=sigma_weights(N, eta_alpha), eta_alpha=float(eta_alpha), alpha=alpha)


def predicted_ranges(points, anchors):
    xy = np.array([a.xy for a in anchors])
    return np.linalg.norm(points[:, None, :2] - xy[None, :, :], axis=2)


def measurement_stats(sig, anchors_los, sigma_n) -> InnovationStats:
    if not anchors_los:
        raise ValueError("measurement_stats needs at least one LOS anchor")
    w = sig.weights
    if np.any(w < 0):
        raise NegativeSigmaWeight(
            f"sigma weights must be >= 0 (eta_alpha = {sig.eta_alpha:.4f} < N = {sig.dim})"
        )

    Z = predicted_ranges(sig.points, anchors_los)
    z_pred = w @ Z
    dz = Z - z_pred
    ds = sig.points - sig.mean
    cross = (w[:, None] * ds).T @ dz

    e_z = np.sqrt(w)[:, None] * dz
    stack = np.vstack([e_z, float(sigma_n) * np.eye(len(anchors_los))])
    return InnovationStats(z_pred=z_pred, Uz=qr_factor(stack), cross=cross)


def update(prior, stats, z) -> FilterState:
    """
    A posteriori pair from T Uz = Sigma_sz and Uz^T y = z - z_pred:
    mean + T y, and the prior factor downdated by the columns of T.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != stats.z_pred.shape:
        raise ValueError(f"measurement has shape {z.shape}, expected {stats.z_pred.shape}")

    T = solve_upper_multi(stats.Uz, stats.cross)
    y = solve_lower(stats.Uz.T, z - stats.z_pred)
    mean = prior.mean + T @ y
    try:
        factor = chol_downdate(prior.factor, T)
    except IndefiniteDowndate as e:
        raise FilterNumericalFailure(str(e)) from e
    return FilterState(mean, factor)


def update_dense(prior, stats, z) -> FilterState:
    """Standard-gain form: K = Sigma_sz Pz^{-1}, Sigma - K Pz K^T, re-factored."""
    z = np.asarray(z, dtype=float)
    Pz = stats.Uz.T @ stats.Uz
    K = np.linalg.solve(Pz, stats.cross.T).T
    mean = prior.mean + K @ (z - stats.z_pred)
    cov = prior.covariance - K @ Pz @ K.T
    return FilterState(mean, cov_to_factor(cov))


def step_unconstrained(state, model, frame, eta_alpha, diagnostics=None) -> FilterState:
    """
    One SRUKF cycle: predict, then update with the reported-LOS ranges.
    With no LOS link the a priori pair is returned.
    """
    prior = predict(state, model)
    los = frame.los_indices
    if not los:
        return prior

    sig = gen_sigma(prior.mean, prior.factor, eta_alpha)
    stats = measurement_stats(sig, frame.los_anchors, frame.sigma_n)
    z = frame.ranges[los]
    try:
        return update(prior, stats, z)
    except FilterNumericalFailure as e:
        if diagnostics is not None:
            diagnostics.downdate_fallbacks += 1
        logger.warning(f"Epoch {frame.epoch}: downdate failed ({e}); using dense update")
        return update_dense(prior, stats, z)
