from concurrent.futures import ThreadPoolExecutor
from unittest.mock import patch

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal
from scipy.optimize import minimize

from core.exceptions import ConfigError
from projection.logic import (
    build_region,
    constrained_update,
    csrukf_step,
    is_feasible,
    make_region,
    project_sigma,
)
from projection.solver import (
    EmptyRegion,
    InfeasibleRegion,
    NewtonStalled,
    Qcqp2Solver,
    dykstra,
    solve_qcqp2,
)
from scenarios.config import SQUARE_ANCHORS
from scenarios.logic import (
    BiasModel,
    Label,
    MeasurementFrame,
    make_motion,
    measure_frame,
    simulate_trajectory,
    trial_rng,
)
from srukf.logic import FilterDiagnostics, FilterState, checked_eta, step_unconstrained

ETA = checked_eta(0.7, 4)


def make_frame(ranges, labels, sigma_n=10.0, epoch=1):
    labels = tuple(Label(lab) for lab in labels)
    return MeasurementFrame(
        epoch=epoch,
        anchors=SQUARE_ANCHORS,
        ranges=np.asarray(ranges, dtype=float),
        true_labels=labels,
        reported_labels=labels,
        sigma_n=sigma_n,
    )


def polar_oracle(L, C, rho):
    """min |u|^2 over the feasible set, scanning rays from the origin and refining around the best angle."""
    cc = np.sum(C * C, axis=1) - rho ** 2

    def first_hit(theta):
        d = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        w = d @ L.T
        ww = np.sum(w * w, axis=1)[:, None]
        wc = w @ C.T
        disc = wc ** 2 - ww * cc[None, :]
        sq = np.sqrt(np.maximum(disc, 0.0))
        lo = np.maximum(((wc - sq) / ww).max(axis=1), 0.0)
        hi = ((wc + sq) / ww).min(axis=1)
        ok = np.all(disc >= 0.0, axis=1) & (lo <= hi)
        return np.where(ok, lo, np.inf)

    if np.all(cc <= 0):
        return 0.0
    width = 2 * np.pi / 7200
    theta = np.arange(7200) * width
    r = first_hit(theta)
    for _ in range(3):
        k = int(np.argmin(r))
        theta = np.linspace(theta[k] - 2 * width, theta[k] + 2 * width, 2001)
        width = 4 * width / 2000
        r = first_hit(theta)
    return float(r.min() ** 2)


def random_instance(rng):
    L = np.tril(rng.normal(0.0, 0.5, (2, 2)))
    L[np.diag_indices(2)] = rng.uniform(0.5, 2.0, 2)
    direction = rng.normal(size=2)
    p = direction / np.linalg.norm(direction) * rng.uniform(1.0, 5.0)
    m = int(rng.integers(1, 5))
    offsets = rng.normal(size=(m, 2))
    offsets *= (rng.uniform(0.0, 2.0, m) / np.linalg.norm(offsets, axis=1))[:, None]
    C = p + offsets
    rho = np.linalg.norm(offsets, axis=1) + rng.uniform(0.3, 2.0, m)
    return L, C, rho


def random_factor(rng, n=4):
    U = np.triu(rng.normal(0.0, 0.3, (n, n)))
    U[np.diag_indices(n)] = rng.uniform(0.5, 2.0, n)
    return U


class RegionTest(SimpleTestCase):
    def test_no_nlos_links(self):
        region = build_region(make_frame([1, 2, 3, 4], ["LOS"] * 4), 3.0)
        self.assertTrue(region.is_empty)
        self.assertEqual(len(region), 0)

    def test_radius_includes_margin(self):
        region = build_region(make_frame([100, 2, 3, 4], ["NLOS", "LOS", "LOS", "LOS"]), 3.0)
        assert_allclose(region.radii, [130.0])
        assert_allclose(region.centers, [[0.0, 0.0]])
        self.assertEqual(region.anchor_ids, (1,))

    def test_zero_epsilon(self):
        region = build_region(make_frame([100, 200, 3, 4], ["NLOS", "NLOS", "LOS", "LOS"]), 0.0)
        assert_allclose(region.radii, [100.0, 200.0])

    def test_rejects_negative_epsilon(self):
        with self.assertRaises(ConfigError):
            build_region(make_frame([1, 2, 3, 4], ["LOS"] * 4), -1.0)


class IsFeasibleTest(SimpleTestCase):
    def test_empty_region(self):
        self.assertTrue(is_feasible([1e6, -1e6], make_region([])))

    def test_center(self):
        self.assertTrue(is_feasible([5, 5], make_region([((5, 5), 1.0)])))

    def test_two_discs(self):
        region = make_region([((0, 0), 2.0), ((4, 0), 2.0)])
        self.assertTrue(is_feasible([2, 0], region))
        self.assertFalse(is_feasible([2, 0.5], region))

    def test_tolerance(self):
        region = make_region([((0, 0), 1.0)])
        self.assertFalse(is_feasible([1.0 + 1e-7, 0], region))
        self.assertTrue(is_feasible([1.0 + 1e-7, 0], region, tol=1e-6))


class QcqpSolverTest(SimpleTestCase):
    def test_single_disc_closed_form(self):
        u = solve_qcqp2(np.eye(2), [((3.0, 0.0), 1.0)])
        assert_allclose(u, [2.0, 0.0], atol=1e-7)

    def test_origin_feasible(self):
        solution = Qcqp2Solver(np.eye(2), [[0.5, 0.0], [-0.5, 0.0]], [1.0, 1.0]).solve()
        assert_array_equal(solution.u, [0.0, 0.0])
        self.assertEqual(solution.method, "trivial")
        self.assertEqual(solution.iterations, 0)

    def test_pairwise_certificate(self):
        with self.assertRaises(InfeasibleRegion) as ctx:
            solve_qcqp2(np.eye(2), [((10.0, 0.0), 1.0), ((-10.0, 0.0), 1.0)])
        self.assertEqual(ctx.exception.certificate, (0, 1))

    def test_triple_without_common_point(self):
        side = 1.9
        centers = [(5.0, 0.0), (5.0 + side, 0.0), (5.0 + side / 2, side * np.sqrt(3) / 2)]
        with self.assertRaises(InfeasibleRegion) as ctx:
            solve_qcqp2(np.eye(2), [(c, 1.0) for c in centers])
        self.assertEqual(ctx.exception.certificate, "solver")

    def test_tangent_discs(self):
        solution = Qcqp2Solver(np.eye(2), [[2.0, 5.0], [-2.0, 5.0]], [2.0, 2.0]).solve()
        assert_allclose(solution.u, [0.0, 5.0], atol=1e-3)

    def test_no_constraints(self):
        with self.assertRaises(EmptyRegion):
            solve_qcqp2(np.eye(2), [])

    def test_matches_polar_grid(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            L, C, rho = random_instance(rng)
            u = Qcqp2Solver(L, C, rho).solve().u
            ours = float(u @ u)
            oracle = polar_oracle(L, C, rho)
            self.assertLessEqual(ours, oracle + 1e-6)
            self.assertLessEqual(oracle - ours, 1e-4)
            self.assertTrue(np.all(np.linalg.norm(L @ u - C, axis=1) <= rho + 1e-6))

    def test_projected_gradient_fallback(self):
        with patch.object(Qcqp2Solver, "_barrier", side_effect=NewtonStalled("forced")):
            solution = Qcqp2Solver(np.eye(2), [[3.0, 0.0]], [1.0]).solve()
        self.assertEqual(solution.method, "projected_gradient")
        assert_allclose(solution.u, [2.0, 0.0], atol=1e-6)

    def test_wide_discs_with_narrow_overlap(self):
        # phase I barrier crawls here; the region is non-empty with a clear interior
        C = np.array([[194.7, 348.2], [194.7, -651.8], [-805.3, -651.8]])
        rho = np.array([393.1, 1947.5, 1142.9])
        solver = Qcqp2Solver(np.eye(2), C, rho)
        u = solver.solve().u
        self.assertLessEqual(solver.violation(u), 1e-6)
        expected = dykstra(np.zeros(2), C, rho)
        self.assertAlmostEqual(float(u @ u), float(expected @ expected), delta=1e-5 * float(expected @ expected))
        oracle = polar_oracle(np.eye(2), C, rho)
        self.assertAlmostEqual(float(u @ u), oracle, delta=1e-4 * oracle)

    def test_interior_point_found_without_phase_one_barrier(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            L, C, rho = random_instance(rng)
            reference = Qcqp2Solver(L, C, rho).solve().u
            stuck = lambda self, start: np.append(start, 100.0)
            with patch.object(Qcqp2Solver, "_phase_one_barrier", stuck):
                u = Qcqp2Solver(L, C, rho).solve().u
            self.assertAlmostEqual(float(u @ u), float(reference @ reference), delta=1e-6)

    def test_empty_region_reported_when_newton_fails(self):
        side = 1.9
        centers = [(5.0, 0.0), (5.0 + side, 0.0), (5.0 + side / 2, side * np.sqrt(3) / 2)]
        with patch.object(Qcqp2Solver, "_center", side_effect=NewtonStalled("forced")):
            with self.assertRaises(InfeasibleRegion) as ctx:
                solve_qcqp2(np.eye(2), [(c, 1.0) for c in centers])
        self.assertEqual(ctx.exception.certificate, "solver")

    def test_centering_step_budget(self):
        def quartic(x, t):
            return float(np.sum(x ** 4)), 4.0 * x ** 3, np.diag(12.0 * x ** 2)

        solver = Qcqp2Solver(np.eye(2), [[3.0, 0.0]], [1.0])
        with patch("projection.solver.MAX_INNER", 3):
            with self.assertRaisesMessage(NewtonStalled, "no convergence in 3 Newton steps") as ctx:
                solver._center(np.array([1.0, 1.0]), 1.0, quartic)
        assert_allclose(ctx.exception.point, [(2 / 3) ** 3] * 2)
        self.assertEqual(solver.iterations, 3)

    def test_fallback_agrees_with_barrier(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            L, C, rho = random_instance(rng)
            barrier = Qcqp2Solver(L, C, rho).solve().u
            with patch.object(Qcqp2Solver, "_barrier", side_effect=NewtonStalled("forced")):
                fallback = Qcqp2Solver(L, C, rho).solve().u
            self.assertAlmostEqual(float(barrier @ barrier), float(fallback @ fallback), delta=1e-5)


class ProjectSigmaTest(SimpleTestCase):
    def test_radial_projection(self):
        result = project_sigma([3.0, 0.0, 1.0, -1.0], np.eye(4), make_region([((0, 0), 1.0)]))
        self.assertTrue(result.active)
        assert_allclose(result.point, [1.0, 0.0, 1.0, -1.0], atol=1e-7)

    def test_feasible_point_unchanged(self):
        point = np.array([0.5, 0.0, 2.0, 2.0])
        result = project_sigma(point, np.eye(4), make_region([((0, 0), 1.0)]))
        self.assertFalse(result.active)
        assert_array_equal(result.point, point)
        self.assertEqual(result.iterations, 0)

    def test_single_intersection_point(self):
        region = make_region([((0, 0), 2.0), ((4, 0), 2.0)])
        result = project_sigma([2.0, 5.0, 0.0, 0.0], np.eye(4), region)
        assert_allclose(result.point[:2], [2.0, 0.0], atol=1e-3)

    def test_velocity_moves_through_coupling(self):
        U = np.eye(4)
        U[0, 2] = 0.5
        result = project_sigma([3.0, 0.0, 0.0, 0.0], U, make_region([((0, 0), 1.0)]))
        self.assertNotAlmostEqual(result.point[2], 0.0)
        self.assertAlmostEqual(result.point[3], 0.0)
        self.assertTrue(is_feasible(result.point, make_region([((0, 0), 1.0)]), tol=1e-6))

    def weighted_instance(self, rng, kind):
        """(U, s, region) with a random factor; kind picks generic, thin-lens or site-scale discs."""
        U = random_factor(rng)
        if kind == "lens":
            p = rng.uniform(-3.0, 3.0, 2)
            direction = rng.normal(size=2)
            direction /= np.linalg.norm(direction)
            r1, r2 = rng.uniform(0.5, 2.0, 2)
            width = 10.0 ** rng.uniform(-3.0, -1.0)
            discs = [(p - direction * (r1 - width / 2), r1), (p + direction * (r2 - width / 2), r2)]
            s = np.concatenate([p + rng.normal(0.0, 1.0, 2), rng.normal(size=2)])
        elif kind == "site":
            U[:2] *= 10.0
            corners = np.array([[0.0, 0.0], [0.0, 1000.0], [1000.0, 1000.0], [1000.0, 0.0]])
            p = rng.uniform(100.0, 900.0, 2)
            chosen = corners[rng.choice(4, size=int(rng.integers(1, 4)), replace=False)]
            discs = [(c, np.linalg.norm(p - c) + rng.uniform(5.0, 60.0)) for c in chosen]
            s = np.concatenate([p + rng.normal(0.0, 30.0, 2), rng.normal(size=2)])
        else:
            p = rng.uniform(-3.0, 3.0, 2)
            offsets = rng.normal(size=(int(rng.integers(1, 4)), 2))
            radii = np.linalg.norm(offsets, axis=1) + rng.uniform(0.3, 1.5, len(offsets))
            discs = [(p + o, r) for o, r in zip(offsets, radii)]
            s = np.concatenate([p + rng.normal(0.0, 4.0, 2), rng.normal(size=2)])
        return U, s, make_region(discs)

    def test_matches_weighted_projection(self):
        rng = np.random.default_rng(21)
        for n in range(200):
            kind = ("generic", "lens", "site")[n % 3]
            U, s, region = self.weighted_instance(rng, kind)
            W = np.linalg.inv(U.T @ U)

            q = project_sigma(s, U, region).point
            ours = float((q - s) @ W @ (q - s))
            self.assertTrue(is_feasible(q, region, tol=1e-6), kind)

            # normalised so each constraint reads in metres near its boundary
            constraints = [
                {"type": "ineq", "fun": lambda x, c=c, r=r: (r ** 2 - np.sum((x[:2] - c) ** 2)) / (2.0 * r)}
                for c, r in zip(region.centers, region.radii)
            ]
            options = {"ftol": 1e-15, "maxiter": 1000}
            objective = lambda x: (x - s) @ W @ (x - s)
            inside = region.centers[int(np.argmin(region.radii))]
            res = minimize(objective, np.concatenate([inside, s[2:]]), method="SLSQP",
                           constraints=constraints, options=options)
            if not res.success:
                res = minimize(objective, q, method="SLSQP", constraints=constraints, options=options)
            self.assertTrue(res.success, f"{kind} instance {n}: {res.message}")
            tol = 1e-5 * max(1.0, res.fun, ours)
            self.assertLessEqual(ours, res.fun + tol, f"{kind} instance {n}")
            self.assertLessEqual(res.fun, ours + tol, f"{kind} instance {n}")

    def test_degenerate_position_block(self):
        U = np.diag([1e-12, 1.0, 1.0, 1.0])
        result = project_sigma([0.0, 3.0, 0.0, 0.0], U, make_region([((0, 0), 1.0)]))
        self.assertTrue(np.all(np.isfinite(result.point)))
        self.assertTrue(is_feasible(result.point, make_region([((0, 0), 1.0)]), tol=1e-6))

    def test_infeasible_certificate_uses_anchor_ids(self):
        region = make_region([((0, 0), 1.0), ((10, 0), 1.0)], anchor_ids=(3, 4))
        with self.assertRaises(InfeasibleRegion) as ctx:
            project_sigma([5.0, 5.0, 0.0, 0.0], np.eye(4), region)
        self.assertEqual(ctx.exception.certificate, (3, 4))

    def test_empty_region(self):
        with self.assertRaises(EmptyRegion):
            project_sigma([0, 0, 0, 0], np.eye(4), make_region([]))


class ConstrainedUpdateTest(SimpleTestCase):
    def setUp(self):
        self.state = FilterState(np.zeros(4), np.eye(4))

    def test_empty_region_identity(self):
        self.assertIs(constrained_update(self.state, make_region([]), ETA), self.state)

    def test_all_points_feasible_identity(self):
        region = make_region([((0, 0), 100.0)])
        self.assertIs(constrained_update(self.state, region, ETA), self.state)

    def test_far_tight_region(self):
        region = make_region([((100, 0), 1.0)])
        diagnostics = FilterDiagnostics()
        out = constrained_update(self.state, region, ETA, diagnostics)
        self.assertTrue(is_feasible(out.mean, region, tol=1e-6))
        self.assertLessEqual(np.trace(out.covariance), np.trace(self.state.covariance))
        self.assertTrue(np.all(np.isfinite(out.factor)))
        self.assertTrue(np.all(np.diag(out.factor) >= 0))
        self.assertEqual(diagnostics.projected_points, 9)
        self.assertEqual(diagnostics.projection_epochs, 1)

    def test_feasible_fixed_point(self):
        state = FilterState(np.array([1.5, 0.0, 0.0, 0.0]), 0.1 * np.eye(4))
        region = make_region([((1.5, 0), 2.0)])
        self.assertIs(constrained_update(state, region, ETA), state)

    def test_executor_matches_serial(self):
        region = make_region([((3, 0), 2.0), ((0, 3), 2.5)])
        serial = constrained_update(self.state, region, ETA)
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = constrained_update(self.state, region, ETA, executor=pool)
        assert_array_equal(serial.mean, threaded.mean)
        assert_array_equal(serial.factor, threaded.factor)


class CsrukfStepTest(SimpleTestCase):
    def setUp(self):
        self.model = make_motion(0.2, 0.04)
        self.bias = BiasModel.exponential(500.0)

    def simulate(self, nlos_ids, K, seed=5):
        s0 = np.array([400.0, 600.0, 1.0, -1.0])
        traj = simulate_trajectory(self.model, s0, K + 1, trial_rng(seed, 0, 0))
        noise, bias = trial_rng(seed, 0, 1), trial_rng(seed, 0, 2)
        frames = [
            measure_frame(traj.states[k], SQUARE_ANCHORS, nlos_ids, 10.0, self.bias, noise, bias, epoch=k)
            for k in range(1, K + 1)
        ]
        start = FilterState(s0 + np.array([50.0, -50.0, 2.0, 2.0]), np.diag([100.0, 100.0, 10.0, 10.0]))
        return start, frames

    def test_no_nlos_matches_unconstrained(self):
        state, frames = self.simulate((), 50)
        plain = state
        for frame in frames:
            state = csrukf_step(state, self.model, frame, ETA, 3.0)
            plain = step_unconstrained(plain, self.model, frame, ETA)
            assert_array_equal(state.mean, plain.mean)
            assert_array_equal(state.factor, plain.factor)

    def test_constrained_means_feasible(self):
        state, frames = self.simulate((1, 2, 3), 100)
        diagnostics = FilterDiagnostics()
        for frame in frames:
            state = csrukf_step(state, self.model, frame, ETA, 3.0, diagnostics)
            if diagnostics.per_epoch_projected[-1]:
                self.assertTrue(is_feasible(state.mean, build_region(frame, 3.0), tol=1e-6))
        self.assertEqual(diagnostics.infeasible_means, 0)
        self.assertEqual(len(diagnostics.per_epoch_projected), 100)
        self.assertGreater(diagnostics.projected_points, 0)

    def test_infeasible_region_skipped(self):
        frame = make_frame([10.0, 900.0, 10.0, 900.0], ["NLOS", "LOS", "NLOS", "LOS"], sigma_n=10.0)
        state = FilterState(np.array([500.0, 500.0, 0.0, 0.0]), np.diag([100.0, 100.0, 10.0, 10.0]))
        diagnostics = FilterDiagnostics()
        with self.assertLogs("projection.logic", level="WARNING"):
            out = csrukf_step(state, self.model, frame, ETA, 0.0, diagnostics)
        expected = step_unconstrained(state, self.model, frame, ETA)
        assert_array_equal(out.mean, expected.mean)
        self.assertEqual(diagnostics.infeasible_skips, 1)
        self.assertEqual(diagnostics.per_epoch_projected, [0])
