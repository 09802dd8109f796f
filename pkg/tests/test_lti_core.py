import numpy as np
import pytest
from scipy import linalg

from data_lqr_synth.lti_core import (
    DimensionError,
    DiscreteLtiSystem,
    NotSchur,
    NotStabilizable,
    PerformanceWeights,
    closed_loop_metrics,
    controllability_gramian,
    dare_residual,
    h2_norm_squared,
    is_detectable,
    is_schur,
    is_stabilizable,
    lyapunov_residual,
    relative_error,
    solve_dare,
    spectral_radius,
)


class TestSystem:
    def test_dimensions(self):
        sys = DiscreteLtiSystem(np.eye(3), np.ones((3, 2)))
        assert (sys.n, sys.m) == (3, 2)

    def test_reject_non_square_a(self):
        with pytest.raises(DimensionError, match="square"):
            DiscreteLtiSystem([[1.0, 2.0]], [[1.0]])

    def test_reject_mismatched_b(self):
        with pytest.raises(DimensionError, match="B must be"):
            DiscreteLtiSystem(np.eye(2), np.ones((3, 1)))

    def test_closed_loop_needs_a_gain(self):
        sys = DiscreteLtiSystem(np.eye(2), np.ones((2, 1)))
        with pytest.raises(DimensionError, match="got None"):
            sys.closed_loop(None)
        with pytest.raises(DimensionError, match="K must be 1x2"):
            sys.closed_loop(np.ones((2, 2)))
        np.testing.assert_allclose(sys.closed_loop([[1.0, 0.0]]), [[2.0, 0.0], [1.0, 1.0]])

    def test_matrices_are_read_only(self):
        sys = DiscreteLtiSystem(np.eye(2), np.ones((2, 1)))
        with pytest.raises(ValueError):
            sys.A[0, 0] = 5.0

    def test_weights_validation(self):
        with pytest.raises(DimensionError, match="positive definite"):
            PerformanceWeights(np.eye(2), np.zeros((1, 1)))
        with pytest.raises(DimensionError, match="symmetric"):
            PerformanceWeights([[1.0, 1.0], [0.0, 1.0]], np.eye(1))


class TestStability:
    def test_spectral_radius(self):
        assert spectral_radius([[0.0, 1.0], [-0.25, 0.0]]) == pytest.approx(0.5)

    def test_is_schur_margin(self):
        assert is_schur([[0.5]])
        assert not is_schur([[1.0]])
        assert not is_schur([[1.0 - 1e-10]])

    def test_stabilizable_with_stable_uncontrollable_mode(self):
        sys = DiscreteLtiSystem(np.diag([2.0, 0.5]), [[1.0], [0.0]])
        assert is_stabilizable(sys)

    def test_not_stabilizable(self):
        sys = DiscreteLtiSystem(np.diag([2.0, 0.5]), [[0.0], [1.0]])
        assert not is_stabilizable(sys)

    def test_detectable(self):
        A = np.diag([2.0, 0.5])
        assert is_detectable(A, np.eye(2))
        assert not is_detectable(A, np.diag([0.0, 1.0]))


class TestDare:
    def test_scalar_closed_form(self, scalar_plant):
        sol = solve_dare(scalar_plant)
        X = (0.25 + np.sqrt(0.0625 + 4.0)) / 2.0
        assert sol.X[0, 0] == pytest.approx(X, abs=1e-10)
        assert sol.X[0, 0] == pytest.approx(1.13278, abs=1e-5)
        assert sol.Kopt[0, 0] == pytest.approx(-0.26556, abs=1e-5)

    def test_residual_on_random_systems(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            m = int(rng.integers(1, 3))
            sys = DiscreteLtiSystem(rng.standard_normal((n, n)), rng.standard_normal((n, m)))
            sol = solve_dare(sys)
            assert sol.residual <= 1e-8 * max(1.0, np.linalg.norm(sol.X, "fro"))
            assert is_schur(sys.closed_loop(sol.Kopt))

    def test_matches_scipy_with_weights(self):
        rng = np.random.default_rng(3)
        sys = DiscreteLtiSystem(rng.standard_normal((3, 3)), rng.standard_normal((3, 2)))
        w = PerformanceWeights(np.diag([1.0, 2.0, 3.0]), np.diag([0.5, 4.0]))
        sol = solve_dare(sys, w)
        expected = linalg.solve_discrete_are(sys.A, sys.B, w.Wx, w.Wu)
        np.testing.assert_allclose(sol.X, expected, rtol=1e-7, atol=1e-9)
        assert dare_residual(sys, w, sol.X) == pytest.approx(sol.residual)

    def test_not_stabilizable_raises(self):
        sys = DiscreteLtiSystem(np.diag([2.0, 0.5]), [[0.0], [1.0]])
        with pytest.raises(NotStabilizable):
            solve_dare(sys)


class TestGramian:
    def test_scalar(self):
        np.testing.assert_allclose(controllability_gramian([[0.5]]), [[4.0 / 3.0]])

    def test_not_schur(self):
        with pytest.raises(NotSchur):
            controllability_gramian([[1.0]])

    @pytest.mark.parametrize("n", [4, 12])
    def test_lyapunov_residual(self, n):
        # n = 12 goes through scipy instead of the Kronecker solve
        rng = np.random.default_rng(n)
        A = rng.standard_normal((n, n))
        A *= 0.9 / spectral_radius(A)
        P = controllability_gramian(A)
        assert lyapunov_residual(A, P) <= 1e-8 * np.linalg.norm(P)
        np.testing.assert_allclose(P, P.T)

    def test_monotone_under_contraction(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            A = rng.standard_normal((n, n))
            A *= rng.uniform(0.1, 0.99) / spectral_radius(A)
            P = controllability_gramian(A)
            assert np.linalg.eigvalsh(P - np.eye(n)).min() >= -1e-9
            s = rng.uniform(0.0, 1.0)
            Ps = controllability_gramian(s * A)
            assert np.trace(Ps) <= np.trace(P) * (1 + 1e-10)
            # every term of sum_k A^k A'^k shrinks by s^2k
            assert np.linalg.eigvalsh(P - Ps).min() >= -1e-8 * np.linalg.norm(P, 2)


class TestH2:
    def test_optimal_cost_equals_trace_x(self, scalar_plant):
        sol = solve_dare(scalar_plant)
        assert h2_norm_squared(scalar_plant, sol.Kopt) == pytest.approx(1.13278, abs=1e-5)

    def test_zero_dynamics(self):
        sys = DiscreteLtiSystem(np.zeros((3, 3)), np.ones((3, 1)))
        assert h2_norm_squared(sys, np.zeros((1, 3))) == pytest.approx(3.0)

    def test_optimal_gain_is_a_lower_bound(self):
        rng = np.random.default_rng(11)
        sys = DiscreteLtiSystem(rng.standard_normal((3, 3)), rng.standard_normal((3, 1)))
        sol = solve_dare(sys)
        h2_opt = h2_norm_squared(sys, sol.Kopt)
        assert h2_opt == pytest.approx(np.trace(sol.X), rel=1e-8)
        for _ in range(100):
            K = sol.Kopt + 1e-2 * rng.standard_normal(sol.Kopt.shape)
            if is_schur(sys.closed_loop(K)):
                assert h2_norm_squared(sys, K) >= h2_opt * (1 - 1e-10)

    def test_weighted_metrics(self, scalar_plant):
        w = PerformanceWeights([[2.0]], [[3.0]])
        metrics = closed_loop_metrics(scalar_plant, [[-0.2]], w)
        P = 1.0 / (1.0 - 0.3 ** 2)
        assert metrics.h2sq == pytest.approx(2.0 * P + 3.0 * 0.04 * P)

    def test_destabilizing_gain(self, scalar_plant):
        with pytest.raises(NotSchur):
            h2_norm_squared(scalar_plant, [[1.0]])

    def test_relative_error(self):
        assert relative_error(1.1, 1.0) == pytest.approx(0.1)
