import numpy as np
from numpy.testing import assert_allclose
from django.test import SimpleTestCase

from kernels.logic import (
    IndefiniteDowndate,
    NonFiniteInput,
    SingularTriangular,
    chol_downdate,
    cov_to_factor,
    qr_factor,
    solve_lower,
    solve_upper_multi,
)


def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = np.logspace(0, np.log10(cond), n)
    return (Q * eigs) @ Q.T


class QrFactorTest(SimpleTestCase):
    def test_stacked_identities(self):
        stack = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=float)
        assert_allclose(qr_factor(stack), np.sqrt(2.0) * np.eye(2), atol=1e-15)

    def test_identity(self):
        assert_allclose(qr_factor(np.eye(3)), np.eye(3), atol=1e-15)

    def test_dense_gram_oracle(self):
        R = qr_factor(np.array([[2, 1], [0, 1], [0, 0]], dtype=float))
        assert_allclose(R, [[2, 1], [0, 1]], atol=1e-14)

    def test_non_negative_diagonal_and_upper(self):
        rng = np.random.default_rng(1)
        R = qr_factor(rng.standard_normal((9, 4)))
        self.assertTrue(np.all(np.diag(R) >= 0))
        self.assertTrue(np.all(np.tril(R, -1) == 0.0))

    def test_reproduces_gram_matrix_for_random_spd(self):
        rng = np.random.default_rng(7)
        for n in range(1, 9):
            sigma = random_spd(rng, n)
            # any S with S^T S = sigma: a Cholesky factor padded with a rotated copy
            C = np.linalg.cholesky(sigma).T
            Q, _ = np.linalg.qr(rng.standard_normal((2 * n, 2 * n)))
            S = Q[:, :n] @ C
            R = qr_factor(S)
            err = np.linalg.norm(R.T @ R - sigma) / np.linalg.norm(sigma)
            self.assertLess(err, 1e-10, f"dim {n}")

    def test_rank_deficient_gives_zero_diagonal(self):
        R = qr_factor(np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))
        self.assertAlmostEqual(R[1, 1], 0.0, places=12)

    def test_rejects_non_finite(self):
        with self.assertRaises(NonFiniteInput):
            qr_factor(np.array([[1.0, np.nan], [0.0, 1.0]]))

    def test_rejects_short_stack(self):
        with self.assertRaises(ValueError):
            qr_factor(np.ones((1, 3)))


class CholDowndateTest(SimpleTestCase):
    def test_single_downdate(self):
        V = chol_downdate(2.0 * np.eye(2), np.array([[1.0], [0.0]]))
        assert_allclose(V, np.diag([np.sqrt(3.0), 2.0]), atol=1e-15)

    def test_empty_columns_is_noop(self):
        assert_allclose(chol_downdate(np.eye(4), np.zeros((4, 0))), np.eye(4))

    def test_singular_result_rejected(self):
        with self.assertRaises(IndefiniteDowndate):
            chol_downdate(np.eye(2), np.array([[1.0], [0.0]]))

    def test_indefinite_result_rejected(self):
        with self.assertRaises(IndefiniteDowndate):
            chol_downdate(np.eye(2), np.array([[0.5], [2.0]]))

    def test_matches_dense_recompute(self):
        rng = np.random.default_rng(3)
        checked = 0
        for _ in range(200):
            n = int(rng.integers(1, 7))
            p = int(rng.integers(1, 4))
            sigma = random_spd(rng, n, cond=1e2)
            U = np.linalg.cholesky(sigma).T
            cols = 0.3 * rng.standard_normal((n, p))
            target = sigma - cols @ cols.T
            eigs = np.linalg.eigvalsh(target)
            if eigs.min() <= 1e-6 * eigs.max():
                continue
            V = chol_downdate(U, cols)
            err = np.linalg.norm(V.T @ V - target) / np.linalg.norm(target)
            self.assertLess(err, 1e-9)
            self.assertTrue(np.all(np.diag(V) > 0))
            checked += 1
        self.assertGreater(checked, 50)


class TriangularSolveTest(SimpleTestCase):
    def test_solve_lower_identity(self):
        assert_allclose(solve_lower(np.eye(2), [3.0, 4.0]), [3.0, 4.0])

    def test_solve_lower_substitution(self):
        assert_allclose(solve_lower([[2.0, 0.0], [1.0, 1.0]], [2.0, 2.0]), [1.0, 1.0])

    def test_solve_lower_singular(self):
        with self.assertRaises(SingularTriangular):
            solve_lower([[0.0, 0.0], [1.0, 1.0]], [1.0, 1.0])

    def test_solve_upper_multi_identity(self):
        B = np.arange(6.0).reshape(3, 2)
        assert_allclose(solve_upper_multi(np.eye(2), B), B)

    def test_solve_upper_multi_scaling(self):
        T = solve_upper_multi(2.0 * np.eye(2), [[4.0, 4.0], [2.0, 0.0]])
        assert_allclose(T, [[2.0, 2.0], [1.0, 0.0]])

    def test_solve_upper_multi_substitution(self):
        T = solve_upper_multi([[1.0, 1.0], [0.0, 1.0]], [[1.0, 2.0]])
        assert_allclose(T, [[1.0, 1.0]])

    def test_solve_upper_multi_singular(self):
        with self.assertRaises(SingularTriangular):
            solve_upper_multi([[1.0, 1.0], [0.0, 0.0]], [[1.0, 2.0]])

    def test_residuals_on_well_conditioned_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            L = np.linalg.cholesky(random_spd(rng, n, cond=1e4))
            b = rng.standard_normal(n)
            y = solve_lower(L, b)
            self.assertLess(np.linalg.norm(L @ y - b) / np.linalg.norm(b), 1e-12)

            B = rng.standard_normal((3, n))
            T = solve_upper_multi(L.T, B)
            self.assertLess(np.linalg.norm(T @ L.T - B) / np.linalg.norm(B), 1e-12)


class CovToFactorTest(SimpleTestCase):
    def test_round_trip(self):
        rng = np.random.default_rng(5)
        sigma = random_spd(rng, 4)
        U = cov_to_factor(sigma)
        assert_allclose(U.T @ U, sigma, rtol=1e-10, atol=1e-10)

    def test_clips_slightly_indefinite(self):
        sigma = np.diag([1.0, 1.0, -1e-16])
        U = cov_to_factor(sigma)
        self.assertTrue(np.all(np.isfinite(U)))
        self.assertTrue(np.all(np.diag(U) > 0))
