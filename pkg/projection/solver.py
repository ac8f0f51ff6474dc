"""
Interior-point solver for the reduced projection problem

    minimize  u^T u   subject to  ||L11 u - c_i|| <= rho_i,  i = 1..m

with u and c_i in R^2 and L11 lower triangular. A phase-I barrier finds a
strictly feasible point, helped by cyclic projections when it stalls, and a
Dykstra projection decides whether the region is empty. Then a log-barrier
Newton method follows the central path. If Newton stalls the solver falls back
to projected gradient with a Dykstra projection onto the disc intersection.
"""
import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from core.exceptions import TrackingError

logger = logging.getLogger(__name__)

MAX_OUTER = 50
MAX_INNER = 100
BARRIER_GROWTH = 10.0
GAP_TOL = 1e-10
STALL_GAP_TOL = 1e-8
NEWTON_TOL = 1e-10
PHASE1_STRICT = 1e-9
DEGENERATE_TOL = 1e-6
FEASIBILITY_TOL = 1e-6
PG_MAX_ITER = 5000
DYKSTRA_SWEEPS = 2000
INTERIOR_SHRINK = (1e-1, 1e-3, 1e-5, 1e-7)
INTERIOR_SWEEPS = 500


class ProjectionError(TrackingError):
    pass


class EmptyRegion(ProjectionError, ValueError):
    pass


class InfeasibleRegion(ProjectionError):
    """The disc intersection is empty. `certificate` is the offending disc pair, or "solver"."""

    def __init__(self, message, certificate="solver"):
        super().__init__(message)
        self.certificate = certificate


class NewtonStalled(ProjectionError):
    """Damped Newton gave up. `point` is the last strictly feasible iterate when the step budget ran out."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


@dataclass(frozen=True)
class QcqpSolution:
    u: NDArray[np.float64]
    iterations: int
    method: str


def _project_disc(x, c, rho):
    d = x - c
    n = np.linalg.norm(d)
    if n <= rho:
        return x
    return c + d * (rho / n)


def dykstra(x, centers, radii, sweeps=DYKSTRA_SWEEPS, tol=1e-13):
    """Euclidean projection of x onto the intersection of discs."""
    m = len(radii)
    y = np.array(x, dtype=float)
    incr = np.zeros((m, 2))
    for _ in range(sweeps):
        prev = y.copy()
        for i in range(m):
            z = y + incr[i]
            y = _project_disc(z, centers[i], radii[i])
            incr[i] = z - y
        if np.linalg.norm(y - prev) <= tol * max(1.0, np.linalg.norm(y)):
            break
    return y


class Qcqp2Solver:
    """
    One solver instance per problem: L11 (2 x 2, lower, nonsingular), the disc
    centres c_i (m x 2) and radii rho_i (m,) in the coordinates v = L11 u.
    """

    def __init__(self, L11, centers, radii):
        self.L = np.asarray(L11, dtype=float)
        self.C = np.atleast_2d(np.asarray(centers, dtype=float))
        self.rho = np.atleast_1d(np.asarray(radii, dtype=float))
        if self.L.shape != (2, 2):
            raise ValueError(f"L11 must be 2 x 2, got {self.L.shape}")
        if len(self.rho) == 0:
            raise EmptyRegion("the projection problem has no constraints")
        if self.C.shape != (len(self.rho), 2):
            raise ValueError(f"centers must be {len(self.rho)} x 2, got {self.C.shape}")
        if np.any(self.rho <= 0):
            raise ValueError("disc radii must be > 0")
        self.iterations = 0

    @property
    def m(self):
        return len(self.rho)

    def violation(self, v):
        """Largest distance by which v lies outside a disc (<= 0 when feasible)."""
        return float(np.max(np.linalg.norm(v - self.C, axis=1) - self.rho))

    def solve(self) -> QcqpSolution:
        self.iterations = 0
        if np.all(np.linalg.norm(self.C, axis=1) <= self.rho):
            return QcqpSolution(np.zeros(2), 0, "trivial")

        self._pairwise_certificate()
        try:
            v0, strict = self._phase_one()
            if not strict:
                u = np.linalg.solve(self.L, v0)
                return QcqpSolution(u, self.iterations, "degenerate")
            u = self._barrier(np.linalg.solve(self.L, v0))
            return QcqpSolution(u, self.iterations, "barrier")
        except (NewtonStalled, np.linalg.LinAlgError) as e:
            logger.debug(f"Newton stalled after {self.iterations} iterations ({e}); using projected gradient")
            u = self._projected_gradient()
            return QcqpSolution(u, self.iterations, "projected_gradient")

    def _pairwise_certificate(self):
        for i in range(self.m):
            for j in range(i + 1, self.m):
                gap = np.linalg.norm(self.C[i] - self.C[j]) - (self.rho[i] + self.rho[j])
                if gap > 0.0:
                    raise InfeasibleRegion(f"discs {i} and {j} are {gap:.3e} m apart", certificate=(i, j))

    # Phase I works in v-space on z = (v, s) with g_i(v) = (|v - c_i|^2 - rho_i^2) / (2 rho_i) <= s.
    # g_i is close to the signed distance to disc i near its boundary, so s is in metres.

    def _phase_one_terms(self, z, t):
        v, s = z[:2], z[2]
        e = v - self.C
        g = (np.sum(e * e, axis=1) - self.rho ** 2) / (2.0 * self.rho)
        d = s - g
        if np.any(d <= 0.0):
            return np.inf, None, None
        value = t * s - np.sum(np.log(d))
        grad_d = np.hstack([-e / self.rho[:, None], np.ones((self.m, 1))])
        grad = np.array([0.0, 0.0, t]) - np.sum(grad_d / d[:, None], axis=0)
        hess = (grad_d / (d ** 2)[:, None]).T @ grad_d
        hess[:2, :2] += np.sum(1.0 / (self.rho * d)) * np.eye(2)
        return value, grad, hess

    def _phase_one(self):
        """
        Returns (v, strict): a strictly feasible v, or a boundary point of a
        degenerate region. The barrier runs first; if it ends without a strict
        point, cyclic projections onto shrunken discs look for one, and only a
        Dykstra projection that stays outside the intersection proves it empty.
        """
        start = self.C[int(np.argmin(self.rho))].copy()
        z = self._phase_one_barrier(start)
        if z[2] < -PHASE1_STRICT and self.violation(z[:2]) < 0.0:
            return z[:2], True

        v = self._interior_point(start)
        if v is not None:
            logger.debug(f"Phase I barrier stopped at {z[2]:.3e} m; interior point found by cyclic projection")
            return v, True

        candidates = [dykstra(start, self.C, self.rho)]
        if z[2] <= DEGENERATE_TOL:
            candidates.append(z[:2])
        best = min(candidates, key=self.violation)
        worst = self.violation(best)
        if worst > FEASIBILITY_TOL:
            raise InfeasibleRegion(
                f"phase I minimum violation is {z[2]:.3e} m, projection stays {worst:.3e} m outside",
                certificate="solver",
            )
        logger.debug(f"Disc intersection is degenerate (violation {worst:.3e} m)")
        return best, False

    def _phase_one_barrier(self, start):
        g = (np.sum((start - self.C) ** 2, axis=1) - self.rho ** 2) / (2.0 * self.rho)
        z = np.append(start, g.max() + 1.0)
        t = 1.0
        for _ in range(MAX_OUTER):
            try:
                z = self._center(z, t, self._phase_one_terms)
            except NewtonStalled as e:
                if e.point is None:
                    logger.debug(f"Phase I barrier gave up: {e}")
                    break
                z = e.point
            except np.linalg.LinAlgError as e:
                logger.debug(f"Phase I Newton system is singular: {e}")
                break
            if z[2] < -PHASE1_STRICT and self.violation(z[:2]) < 0.0:
                return z
            if self.m / t <= GAP_TOL * max(1.0, abs(z[2])):
                break
            t *= BARRIER_GROWTH
        return z

    def _interior_point(self, v):
        """Cyclic projections onto discs shrunk by a relative margin; None when no margin works."""
        for shrink in INTERIOR_SHRINK:
            radii = self.rho * (1.0 - shrink)
            y = np.array(v, dtype=float)
            for _ in range(INTERIOR_SWEEPS):
                for i in range(self.m):
                    y = _project_disc(y, self.C[i], radii[i])
                if self.violation(y) < -PHASE1_STRICT:
                    return y
        return None

    # Phase II: t u^T u - sum log(rho_i^2 - |L u - c_i|^2).

    def _barrier_terms(self, u, t):
        e = self.L @ u - self.C
        d = self.rho ** 2 - np.sum(e * e, axis=1)
        if np.any(d <= 0.0):
            return np.inf, None, None
        value = t * (u @ u) - np.sum(np.log(d))
        Le = e @ self.L
        grad = 2.0 * t * u + 2.0 * np.sum(Le / d[:, None], axis=0)
        hess = 2.0 * t * np.eye(2) + 4.0 * (Le / (d ** 2)[:, None]).T @ Le
        hess += 2.0 * np.sum(1.0 / d) * (self.L.T @ self.L)
        return value, grad, hess

    def _barrier(self, u):
        t = self.m / max(float(u @ u), 1.0)
        for _ in range(MAX_OUTER):
            try:
                u = self._center(u, t, self._barrier_terms)
            except NewtonStalled as e:
                if e.point is not None:
                    u = e.point
                    logger.debug(f"Centering stopped short at t = {t:.3e}; continuing from the last iterate")
                elif self.m / t <= STALL_GAP_TOL * max(1.0, float(u @ u)):
                    return u
                else:
                    raise
            if self.m / t <= GAP_TOL * max(1.0, float(u @ u)):
                return u
            t *= BARRIER_GROWTH
        return u

    def _center(self, x, t, terms):
        """Damped Newton on one barrier subproblem; iterates stay strictly feasible."""
        for _ in range(MAX_INNER):
            value, grad, hess = terms(x, t)
            if not np.isfinite(value):
                raise NewtonStalled("iterate left the interior")
            step = -np.linalg.solve(hess, grad)
            decrement = -float(grad @ step)
            if decrement / 2.0 <= NEWTON_TOL:
                return x
            alpha = 1.0
            while True:
                candidate = x + alpha * step
                if terms(candidate, t)[0] <= value - 0.25 * alpha * decrement:
                    break
                alpha *= 0.5
                if alpha < 1e-16:
                    raise NewtonStalled(f"line search failed at t = {t:.3e}")
            x = candidate
            self.iterations += 1
        raise NewtonStalled(f"no convergence in {MAX_INNER} Newton steps at t = {t:.3e}", point=x)

    def _projected_gradient(self):
        """Minimize v^T M v over the intersection, M = L^{-T} L^{-1}."""
        Linv = np.linalg.inv(self.L)
        M = Linv.T @ Linv
        step = 1.0 / (2.0 * float(np.linalg.eigvalsh(M).max()))
        v = dykstra(np.zeros(2), self.C, self.rho)
        for _ in range(PG_MAX_ITER):
            self.iterations += 1
            nxt = dykstra(v - step * 2.0 * (M @ v), self.C, self.rho)
            if np.linalg.norm(nxt - v) <= 1e-11 * max(1.0, np.linalg.norm(v)):
                v = nxt
                break
            v = nxt
        if self.violation(v) > FEASIBILITY_TOL:
            raise InfeasibleRegion(
                f"no feasible point found (violation {self.violation(v):.3e} m)", certificate="solver"
            )
        return np.linalg.solve(self.L, v)


def solve_qcqp2(L11, targets) -> NDArray[np.float64]:
    """Minimizer u of |u|^2 subject to |L11 u - c_i| <= rho_i for every (c_i, rho_i) in targets."""
    targets = list(targets)
    if not targets:
        raise EmptyRegion("solve_qcqp2 needs at least one constraint")
    centers = np.array([c for c, _ in targets], dtype=float)
    radii = np.array([rho for _, rho in targets], dtype=float)
    return Qcqp2Solver(L11, centers, radii).solve().u
