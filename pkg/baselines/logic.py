"""
Comparison filters for NLOS tracking: EKF with outlier rejection, the
projection Kalman filter, the smoothed EKF and the bias-aware EKF.
"""
import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from core.exceptions import ConfigError
from kernels.logic import cov_to_factor, solve_lower
from projection.logic import InfeasibleRegion, build_region, project_sigma
from scenarios.logic import Label
from srukf.logic import FilterState, predict, step_unconstrained

logger = logging.getLogger(__name__)

JACOBIAN_MIN_NORM = 1e-9


class BaselineKind(str, enum.Enum):
    EKF_OR = "ekf_or"
    PKF = "pkf"
    SEKF = "sekf"
    BEKF = "bekf"


@dataclass(frozen=True)
class BaselineConfig:
    kind: BaselineKind
    sekf_scale: float = 1.5
    sekf_process_var: float | None = None
    bias_mean: float = 0.0
    bias_var: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        if self.sekf_scale < 1:
            raise ConfigError(f"sekf scale must be >= 1, got {self.sekf_scale}")
        if self.sekf_process_var is not None and self.sekf_process_var <= 0:
            raise ConfigError("sekf process variance must be > 0")
        if self.bias_mean < 0 or self.bias_var < 0:
            raise ConfigError("bias moments must be >= 0")

    @classmethod
    def from_scenario(cls, config, kind):
        return cls(
            kind=kind,
            sekf_scale=config.sekf_scale,
            sekf_process_var=config.sekf_process_var,
            bias_mean=config.bias.mean(),
            bias_var=config.bias.variance(),
        )

    def process_var(self, sigma_n):
        if self.sekf_process_var is not None:
            return self.sekf_process_var
        return (sigma_n / 2.0) ** 2


@dataclass(frozen=True)
class RangeSmootherState:
    """Per-link scalar Kalman filters on the raw ranges (random walk in range)."""
    estimates: NDArray[np.float64] = field(compare=False)
    variances: NDArray[np.float64] = field(compare=False)

    @classmethod
    def empty(cls, n_links):
        return cls(np.full(n_links, np.nan), np.full(n_links, np.nan))


def smooth_ranges(smoother, ranges, sigma_n, process_var) -> RangeSmootherState:
    """One predict/update of every link filter; an uninitialised link starts at its measurement."""
    ranges = np.asarray(ranges, dtype=float)
    R = float(sigma_n) ** 2
    est = smoother.estimates.copy()
    var = smoother.variances.copy()

    fresh = ~np.isfinite(est) | ~np.isfinite(var)
    est[fresh] = ranges[fresh]
    var[fresh] = R

    old = ~fresh
    prior_var = var[old] + process_var
    gain = prior_var / (prior_var + R)
    est[old] = est[old] + gain * (ranges[old] - est[old])
    var[old] = (1.0 - gain) * prior_var
    return RangeSmootherState(est, var)


def range_jacobian(x, anchors):
    """Rows (x - a^i)^T / |x - a^i| padded with zeros for the velocity; returns (h, H)."""
    xy = np.array([a.xy for a in anchors], dtype=float)
    diff = np.asarray(x, dtype=float)[:2] - xy
    h = np.linalg.norm(diff, axis=1)
    norm = np.where(h < JACOBIAN_MIN_NORM, h + JACOBIAN_MIN_NORM, h)
    H = np.zeros((len(anchors), len(x)))
    H[:, :2] = diff / norm[:, None]
    return h, H


def ekf_update(prior, z, anchors, r_diag):
    """
    EKF update with a Joseph-form covariance. Returns the a posteriori pair and
    the innovations whitened by the innovation covariance.
    """
    z = np.asarray(z, dtype=float)
    P = prior.covariance
    h, H = range_jacobian(prior.mean, anchors)
    R = np.diag(np.asarray(r_diag, dtype=float))

    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    innovation = z - h
    mean = prior.mean + K @ innovation
    A = np.eye(prior.dim) - K @ H
    cov = A @ P @ A.T + K @ R @ K.T

    whitened = solve_lower(cov_to_factor(S).T, innovation)
    return FilterState(mean, cov_to_factor(cov)), whitened


def _recorded(posterior, whitened, diagnostics):
    if diagnostics is not None:
        diagnostics.record_innovation(whitened)
    return posterior


def _reported_nlos(frame):
    return np.array([lab is Label.NLOS for lab in frame.reported_labels])


def project_mean(posterior, frame, epsilon, diagnostics=None) -> FilterState:
    """PKF correction: the a posteriori mean is projected, the covariance is kept."""
    region = build_region(frame, epsilon)
    if region.is_empty:
        return posterior
    try:
        result = project_sigma(posterior.mean, posterior.factor, region)
    except InfeasibleRegion as e:
        if diagnostics is not None:
            diagnostics.infeasible_skips += 1
        logger.warning(f"Epoch {frame.epoch}: PKF projection skipped ({e})")
        return posterior
    if not result.active:
        return posterior
    if diagnostics is not None:
        diagnostics.projected_points += 1
        diagnostics.projection_epochs += 1
    return FilterState(result.point, posterior.factor)


def ekf_step(state, model, frame, config, *, smoothed=None, eta_alpha=None, epsilon=None, diagnostics=None):
    """
    One step of the baseline named by `config.kind`. The SEKF takes the
    pre-smoothed ranges in `smoothed`; the PKF needs `eta_alpha` and `epsilon`.
    """
    kind = config.kind
    sigma2 = frame.sigma_n ** 2

    if kind is BaselineKind.PKF:
        if eta_alpha is None or epsilon is None:
            raise ConfigError("the PKF needs eta_alpha and epsilon")
        posterior = step_unconstrained(state, model, frame, eta_alpha, diagnostics)
        return project_mean(posterior, frame, epsilon, diagnostics)

    prior = predict(state, model)
    nlos = _reported_nlos(frame)

    if kind is BaselineKind.EKF_OR:
        los = frame.los_indices
        if not los:
            return prior
        posterior, whitened = ekf_update(prior, frame.ranges[los], frame.los_anchors, np.full(len(los), sigma2))
        return _recorded(posterior, whitened, diagnostics)

    if kind is BaselineKind.BEKF:
        z = frame.ranges - np.where(nlos, config.bias_mean, 0.0)
        r_diag = sigma2 + np.where(nlos, config.bias_var, 0.0)
        posterior, whitened = ekf_update(prior, z, frame.anchors, r_diag)
        return _recorded(posterior, whitened, diagnostics)

    if smoothed is None:
        raise ConfigError("the SEKF needs smoothed ranges")
    r_diag = sigma2 * np.where(nlos, config.sekf_scale, 1.0)
    posterior, whitened = ekf_update(prior, smoothed.estimates, frame.anchors, r_diag)
    return _recorded(posterior, whitened, diagnostics)

