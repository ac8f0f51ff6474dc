"""
Constraint imposition for the CSRUKF.

Reported-NLOS ranges bound the position from above: the target lies in the
disc of radius r^i + epsilon * sigma_n around anchor i. Sigma points outside
the intersection of these discs are moved to their Sigma^{-1}-weighted
projection, and the a posteriori pair is re-estimated from the projected set.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from core.exceptions import ConfigError
from kernels.logic import cov_to_factor, qr_factor
from projection.solver import EmptyRegion, InfeasibleRegion, ProjectionError, Qcqp2Solver
from srukf.logic import (
    FilterDiagnostics,
    FilterState,
    NegativeSigmaWeight,
    gen_sigma,
    step_unconstrained,
)

logger = logging.getLogger(__name__)

# Points within this distance outside a disc count as feasible.
VIOLATION_SLACK = 1e-9
MEAN_FEASIBILITY_TOL = 1e-6
L11_RATIO = 1e-10
L11_JITTER = 1e-8
MIN_RADIUS = 1e-9


@dataclass(frozen=True)
class DiscRegion:
    centers: NDArray[np.float64] = field(compare=False)
    radii: NDArray[np.float64] = field(compare=False)
    epsilon: float = 0.0
    anchor_ids: tuple[int, ...] = ()

    def __len__(self):
        return len(self.radii)

    @property
    def is_empty(self):
        return len(self.radii) == 0

    @property
    def discs(self):
        return [(tuple(c), float(r)) for c, r in zip(self.centers, self.radii)]


@dataclass(frozen=True)
class ProjectionResult:
    point: NDArray[np.float64]
    active: bool
    iterations: int = 0


def make_region(discs, epsilon=0.0, anchor_ids=None) -> DiscRegion:
    """Region from explicit (center, radius) pairs."""
    discs = list(discs)
    centers = np.array([c for c, _ in discs], dtype=float).reshape(-1, 2)
    radii = np.array([r for _, r in discs], dtype=float)
    if np.any(radii <= 0):
        raise ConfigError("disc radii must be > 0")
    ids = tuple(anchor_ids) if anchor_ids is not None else tuple(range(1, len(discs) + 1))
    return DiscRegion(centers=centers, radii=radii, epsilon=float(epsilon), anchor_ids=ids)


def build_region(frame, epsilon) -> DiscRegion:
    """One disc per reported-NLOS link: centre a^i, radius r^i + epsilon * sigma_n."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    nlos = frame.nlos_indices
    centers = np.array([frame.anchors[i].xy for i in nlos], dtype=float).reshape(-1, 2)
    radii = frame.ranges[nlos] + epsilon * frame.sigma_n
    # A zero range with epsilon = 0 would give a point disc.
    radii = np.maximum(radii, MIN_RADIUS)
    return DiscRegion(
        centers=centers,
        radii=np.asarray(radii, dtype=float),
        epsilon=float(epsilon),
        anchor_ids=tuple(frame.anchors[i].id for i in nlos),
    )


def is_feasible(x, region, tol=0.0) -> bool:
    if region.is_empty:
        return True
    x = np.asarray(x, dtype=float)[:2]
    return bool(np.all(np.linalg.norm(x - region.centers, axis=1) <= region.radii + tol))


def lower_factor(factor):
    """
    Lower factor L = U^T of Sigma = L L^T. A near-singular position block gets
    1e-8 added to the position variances before re-factoring.
    """
    L = np.asarray(factor, dtype=float).T
    d = np.abs(np.diag(L[:2, :2]))
    if d.min() < L11_RATIO * d.max() or d.max() == 0.0:
        cov = L @ L.T
        cov[:2, :2] += L11_JITTER * np.eye(2)
        logger.debug(f"Regularizing position block (diag {d.min():.3e} / {d.max():.3e})")
        L = cov_to_factor(cov).T
    return L


def project_sigma(point, factor, region) -> ProjectionResult:
    """
    Minimizer of (q - s)^T Sigma^{-1} (q - s) over q with position in the region.
    With Sigma = L L^T the problem reduces to min |u|^2 s.t. |L11 u - (s_xy - a^i)| <= radius_i,
    and q = s - L[:, :2] u.
    """
    if region.is_empty:
        raise EmptyRegion("cannot project onto an empty set of constraints")
    s = np.asarray(point, dtype=float)
    if is_feasible(s, region, tol=VIOLATION_SLACK):
        return ProjectionResult(point=s, active=False, iterations=0)

    L = lower_factor(factor)
    targets = s[:2] - region.centers
    try:
        solution = Qcqp2Solver(L[:2, :2], targets, region.radii).solve()
    except InfeasibleRegion as e:
        cert = e.certificate
        if isinstance(cert, tuple):
            cert = tuple(region.anchor_ids[i] for i in cert)
            raise InfeasibleRegion(f"discs of anchors {cert} do not intersect", certificate=cert) from e
        raise

    q = s - L[:, :2] @ solution.u
    logger.debug(f"Projected sigma point in {solution.iterations} iterations ({solution.method})")
    return ProjectionResult(point=q, active=True, iterations=solution.iterations)


def constrained_update(state, region, eta_alpha, diagnostics=None, executor=None) -> FilterState:
    """
    Regenerates sigma points from the a posteriori pair, projects the violating
    ones and re-estimates the pair by weighted averaging and a weighted-residual QR.
    Returns `state` itself when nothing is violated.
    """
    if region.is_empty:
        return state

    sig = gen_sigma(state.mean, state.factor, eta_alpha)
    if np.any(sig.weights < 0):
        raise NegativeSigmaWeight(f"eta_alpha = {eta_alpha:.4f} gives a negative centre weight")
    violating = [j for j, p in enumerate(sig.points) if not is_feasible(p, region, tol=VIOLATION_SLACK)]
    if not violating:
        return state

    def _project(j):
        return project_sigma(sig.points[j], state.factor, region)

    results = list(executor.map(_project, violating)) if executor is not None else [_project(j) for j in violating]
    points = sig.points.copy()
    for j, result in zip(violating, results):
        points[j] = result.point

    w = sig.weights
    mean = w @ points
    factor = qr_factor(np.sqrt(w)[:, None] * (points - mean))

    if diagnostics is not None:
        diagnostics.projected_points += len(violating)
        diagnostics.projection_epochs += 1
    return FilterState(mean, factor)


def csrukf_step(state, model, frame, eta_alpha, epsilon, diagnostics=None, executor=None) -> FilterState:
    """
    One full CSRUKF cycle: SRUKF predict/update, then projection of the
    a posteriori sigma set onto the disc intersection of the reported-NLOS links.
    An empty intersection keeps the unconstrained posterior for the epoch.
    """
    diagnostics = diagnostics if diagnostics is not None else FilterDiagnostics()
    posterior = step_unconstrained(state, model, frame, eta_alpha, diagnostics)
    region = build_region(frame, epsilon)
    if region.is_empty:
        diagnostics.per_epoch_projected.append(0)
        return posterior

    before = diagnostics.projected_points
    try:
        constrained = constrained_update(posterior, region, eta_alpha, diagnostics, executor)
    except InfeasibleRegion as e:
        diagnostics.infeasible_skips += 1
        diagnostics.per_epoch_projected.append(0)
        logger.warning(f"Epoch {frame.epoch}: infeasible region ({e}); keeping the unconstrained posterior")
        return posterior

    projected = diagnostics.projected_points - before
    diagnostics.per_epoch_projected.append(projected)
    if projected and not is_feasible(constrained.mean, region, tol=MEAN_FEASIBILITY_TOL):
        diagnostics.infeasible_means += 1
        logger.error(f"Epoch {frame.epoch}: constrained mean lies outside the feasible region")
    return constrained
