import numpy as np
import pytest

from windadapt.errors import RankDeficient, ShapeMismatch
from windadapt.numerics import (FirstOrderFilter, rk4_step, rng_from_seed,
                                solve_least_squares, spectral_norm, zoh_lowpass)


def brute_force_normal_equations(A, b, ridge=0.0):
    """Independent oracle: explicitly form and solve A^T A x = A^T b."""
    AtA = A.T @ A + ridge * np.eye(A.shape[1])
    return np.linalg.solve(AtA, A.T @ b)


class TestLeastSquares:
    def test_identity(self):
        x = solve_least_squares(np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(x, [1.0, 2.0, 3.0], atol=1e-12)

    def test_column_of_ones(self):
        # normal equations by hand: 2 a = 4
        x = solve_least_squares(np.array([[1.0], [1.0]]), np.array([1.0, 3.0]))
        np.testing.assert_allclose(x, [2.0], atol=1e-12)

    def test_normal_residual_random(self):
        rng = rng_from_seed(3)
        A = rng.standard_normal((20, 4))
        b = rng.standard_normal(20)
        x = solve_least_squares(A, b)
        assert np.linalg.norm(A.T @ (A @ x - b)) <= 1e-8 * np.linalg.norm(A.T @ b)

    def test_matches_normal_equation_oracle(self):
        rng = rng_from_seed(11)
        for _ in range(25):
            A = rng.standard_normal((30, 6))
            if np.linalg.cond(A) > 1e4:
                continue
            b = rng.standard_normal((30, 2))
            x = solve_least_squares(A, b)
            ref = brute_force_normal_equations(A, b)
            np.testing.assert_allclose(x, ref, rtol=1e-6, atol=1e-10)

    def test_ridge_shrinks_solution_norm(self):
        rng = rng_from_seed(5)
        A = rng.standard_normal((15, 4))
        b = rng.standard_normal(15)
        norms = [np.linalg.norm(solve_least_squares(A, b, r))
                 for r in (0.0, 0.1, 1.0, 10.0)]
        assert all(n1 >= n2 - 1e-12 for n1, n2 in zip(norms, norms[1:]))

    def test_ridge_stationarity(self):
        rng = rng_from_seed(9)
        A = rng.standard_normal((12, 3))
        b = rng.standard_normal(12)
        ridge = 0.7
        x = solve_least_squares(A, b, ridge)
        resid = A.T @ (A @ x - b) + ridge * x
        assert np.linalg.norm(resid) < 1e-9

    def test_rank_deficient_raises(self):
        A = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(RankDeficient):
            solve_least_squares(A, np.ones(3))
        # a tiny ridge makes the same system solvable
        solve_least_squares(A, np.ones(3), ridge=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            solve_least_squares(np.eye(3), np.ones(4))


class TestRk4:
    def test_constant_field(self):
        out = rk4_step(lambda x, u: np.zeros_like(x), np.array([5.0]), None, 0.01)
        np.testing.assert_allclose(out, [5.0])

    def test_exponential_decay(self):
        out = rk4_step(lambda x, u: -x, np.array([1.0]), None, 0.1)
        assert abs(out[0] - np.exp(-0.1)) < 1e-6

    def test_long_horizon_decay(self):
        x = np.array([1.0])
        for _ in range(1000):
            x = rk4_step(lambda x, u: -x, x, None, 0.001)
        assert abs(x[0] - np.exp(-1.0)) < 1e-9

    def test_fourth_order_convergence(self):
        # halving dt should shrink the one-second error by about 16x
        def final_error(dt):
            x = np.array([1.0])
            for _ in range(int(round(1.0 / dt))):
                x = rk4_step(lambda x, u: -2.0 * x, x, None, dt)
            return abs(x[0] - np.exp(-2.0))

        e1, e2 = final_error(0.02), final_error(0.01)
        assert 12.0 < e1 / e2 < 20.0


class TestFilter:
    def test_step_response_one_constant(self):
        flt = FirstOrderFilter(tau=1.0)
        out = flt.update(np.array([1.0]), dt=1.0)
        assert abs(out[0] - (1.0 - np.exp(-1.0))) < 1e-12

    def test_converges_to_constant_input(self):
        flt = FirstOrderFilter(tau=0.2)
        out = None
        for _ in range(5000):
            out = flt.update(np.array([3.0, -1.0]), dt=0.01)
        np.testing.assert_allclose(out, [3.0, -1.0], atol=1e-10)

    def test_fixed_point(self):
        x = np.array([0.7, -0.2])
        assert np.allclose(zoh_lowpass(x, x, 0.01, 0.2), x, atol=1e-15)

    def test_linearity(self):
        rng = rng_from_seed(2)
        u1 = rng.standard_normal((50, 3))
        u2 = rng.standard_normal((50, 3))
        f1, f2, f12 = (FirstOrderFilter(0.3) for _ in range(3))
        for k in range(50):
            a = f1.update(u1[k], 0.01)
            b = f2.update(u2[k], 0.01)
            c = f12.update(u1[k] + u2[k], 0.01)
        np.testing.assert_allclose(a + b, c, atol=1e-12)

    def test_dimension_locked_after_first_update(self):
        flt = FirstOrderFilter(0.1)
        flt.update(np.zeros(3), 0.01)
        with pytest.raises(ShapeMismatch):
            flt.update(np.zeros(4), 0.01)


class TestSpectralNorm:
    def test_diagonal(self):
        assert abs(spectral_norm(np.diag([2.0, 1.0]), iters=50) - 2.0) < 1e-6

    def test_identity(self):
        assert abs(spectral_norm(np.eye(4)) - 1.0) < 1e-9

    def test_rank_one(self):
        rng = rng_from_seed(4)
        u = rng.standard_normal(5)
        v = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        assert abs(spectral_norm(np.outer(u, v), iters=50) - 1.0) < 1e-6

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0

    def test_monotone_in_iters_and_deterministic(self):
        rng = rng_from_seed(8)
        W = rng.standard_normal((6, 4))
        vals = [spectral_norm(W, iters=i, seed=7) for i in (1, 2, 5, 10, 40)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
        assert spectral_norm(W, iters=9, seed=7) == spectral_norm(W, iters=9, seed=7)
        assert abs(vals[-1] - np.linalg.norm(W, 2)) < 1e-8
