import numpy as np
import pytest

from data_lqr_synth.certificates import NoiseBound, minimum_norm_solution, theta
from data_lqr_synth.data_gen import DataMatrices, NoiseSpec, build_data_matrices, simulate
from data_lqr_synth.lti_core import DiscreteLtiSystem, h2_norm_squared, is_schur, solve_dare
from data_lqr_synth.synthesis.backends import BackendSolution, BaseBackend, CvxpyBackend, SolveStatus
from data_lqr_synth.synthesis.programs import (
    AllInfeasible,
    InvalidProgram,
    MissingD0,
    ProgramVariant,
    SolveInfeasible,
    VariantKind,
    build_baseline,
    build_ideal,
    build_model_based,
    build_program,
    build_soft,
    build_sproc,
    conditioning_transform,
    mu_from_bound,
    solve,
    sproc_line_search,
)

from .conftest import make_data, make_plant


class LyingBackend(BaseBackend):
    """Claims optimality for an all-zero point."""

    def post_init(self):
        self.backend_name = "lying"

    def _solve(self, problem):
        values = {name: np.zeros(var.shape) for name, var in problem.variables.items()}
        return BackendSolution(status=SolveStatus.OPTIMAL, values=values, objective=0.0)


class RecordingBackend(CvxpyBackend):
    """Clarabel backend that keeps the solvers it went through."""

    def post_init(self):
        super().post_init()
        self.tried = []

    def _attempt(self, problem, solver, accuracy):
        self.tried.append(solver)
        return super()._attempt(problem, solver, accuracy)


def infeasible_data():
    rng = np.random.default_rng(0)
    # X0 = 0 forces P = X0 Q = 0, which contradicts P >= I
    return DataMatrices(U0=rng.standard_normal((1, 6)), X0=np.zeros((2, 6)), X1=rng.standard_normal((2, 6)))


def gain_gap(K, Kopt):
    return np.linalg.norm(K - Kopt) / np.linalg.norm(Kopt)


class TestVariant:
    def test_soft_alpha(self):
        with pytest.raises(InvalidProgram, match="alpha"):
            ProgramVariant.soft(0.5)

    def test_sproc_arguments(self):
        R = np.eye(2, 5)
        with pytest.raises(InvalidProgram, match="eta1"):
            ProgramVariant.sproc(1.0, R, eta1=0.9)
        with pytest.raises(InvalidProgram, match="mu"):
            ProgramVariant.sproc(0.0, R)
        with pytest.raises(InvalidProgram, match="full row rank"):
            ProgramVariant.sproc(1.0, np.zeros((2, 5)))

    def test_build_program_dispatch(self, plant, clean_data):
        assert build_program(ProgramVariant(VariantKind.MODEL_BASED), sys=plant).name == "model_based"
        assert build_program(ProgramVariant.soft(2.0), clean_data).metadata["alpha"] == 2.0
        with pytest.raises(InvalidProgram):
            build_program(ProgramVariant(VariantKind.BASELINE))


class TestModelBased:
    def test_scalar(self, scalar_plant, backend):
        res = solve(build_model_based(scalar_plant), backend)
        assert res.optimal
        assert res.gamma == pytest.approx(1.13278, rel=1e-4)
        assert res.K[0, 0] == pytest.approx(-0.26556, abs=1e-4)

    def test_zero_dynamics(self, backend):
        sys = DiscreteLtiSystem([[0.0]], [[1.0]])
        res = solve(build_model_based(sys), backend)
        assert res.gamma == pytest.approx(1.0, abs=1e-6)
        assert res.K[0, 0] == pytest.approx(0.0, abs=1e-5)

    def test_matches_riccati(self, plant, backend):
        Kopt = solve_dare(plant).Kopt
        h2_opt = h2_norm_squared(plant, Kopt)
        res = solve(build_model_based(plant), backend)
        assert abs(res.gamma - h2_opt) <= 1e-4 * h2_opt


class TestDataPrograms:
    def test_ideal_noise_free(self, plant, clean_data, backend):
        Kopt = solve_dare(plant).Kopt
        h2_opt = h2_norm_squared(plant, Kopt)
        res = solve(build_ideal(clean_data), backend)
        assert res.optimal
        assert res.rank_condition
        assert gain_gap(res.K, Kopt) <= 1e-3
        assert abs(res.gamma - h2_opt) <= 1e-4 * h2_opt

    def test_ideal_with_recorded_noise(self, plant, backend):
        dm = make_data(plant, 2, noise="wgn:0.05")
        Kopt = solve_dare(plant).Kopt
        res = solve(build_ideal(dm), backend)
        assert gain_gap(res.K, Kopt) <= 1e-3

    def test_ideal_needs_d0(self, clean_data):
        with pytest.raises(MissingD0):
            build_ideal(clean_data.data_only())

    def test_baseline_agrees_with_model_based(self, plant, clean_data, backend):
        model = solve(build_model_based(plant), backend)
        ideal = solve(build_ideal(clean_data), backend)
        baseline = solve(build_baseline(clean_data.data_only()), backend)
        assert baseline.gamma == pytest.approx(model.gamma, rel=1e-4)
        assert baseline.gamma == pytest.approx(ideal.gamma, rel=1e-4)

    def test_decoded_gain_consistency(self, clean_data, backend):
        res = solve(build_baseline(clean_data), backend)
        np.testing.assert_allclose(clean_data.U0 @ res.Q, res.K @ res.P, atol=1e-6 * np.linalg.norm(res.P))
        np.testing.assert_allclose(clean_data.X0 @ res.Q, res.P, atol=1e-6 * np.linalg.norm(res.P))
        assert np.linalg.eigvalsh(res.P).min() >= 1.0 - 1e-6

    def test_schur_form_equivalence(self, plant, backend):
        dm = make_data(plant, 5, noise="wgn:0.02")
        res = solve(build_baseline(dm), backend)
        if res.optimal:
            lam = np.linalg.eigvalsh(theta(res.M(), dm.X1, res.P)).max()
            assert lam + 1.0 <= 1e-5 * max(1.0, np.linalg.norm(res.P, 2))

    def test_soft_noise_free(self, plant, clean_data, backend):
        Kopt = solve_dare(plant).Kopt
        h2_opt = h2_norm_squared(plant, Kopt)
        res = solve(build_soft(clean_data, 1.0), backend)
        assert res.optimal
        assert res.V.shape == (20, 20)
        assert is_schur(plant.closed_loop(res.K))
        assert h2_norm_squared(plant, res.K) <= 1.05 * h2_opt
        # V dominates Q P^-1 Q'
        assert np.linalg.eigvalsh(res.V - res.M()).min() >= -1e-6 * np.linalg.norm(res.V, 2)

    def test_soft_alpha_validation(self, clean_data):
        with pytest.raises(InvalidProgram):
            build_soft(clean_data, 0.99)

    def test_sproc_noise_free(self, plant, clean_data, backend):
        Kopt = solve_dare(plant).Kopt
        h2_opt = h2_norm_squared(plant, Kopt)
        res = solve(build_sproc(clean_data, 1e-6, clean_data.X1, 1.0), backend)
        assert res.optimal
        assert is_schur(plant.closed_loop(res.K))
        h2 = h2_norm_squared(plant, res.K)
        assert h2 <= (np.trace(res.P) + np.trace(res.L)) * (1 + 1e-6)
        assert h2 <= 1.25 * h2_opt

    def test_sproc_r_shape(self, clean_data):
        with pytest.raises(InvalidProgram, match="R must be"):
            build_sproc(clean_data, 1.0, np.eye(3), 1.0)

    def test_k_zero_feasible_for_stable_plant(self, backend):
        sys = make_plant(4, radius=0.5)
        dm = make_data(sys, 6, noise="wgn:1.0")
        res = solve(build_baseline(dm), backend)
        assert res.optimal


class TestConditioning:
    def test_whitens_full_rank_data(self, clean_data):
        Z = conditioning_transform(clean_data)
        W0 = np.vstack([clean_data.U0, clean_data.X0])
        r = clean_data.n + clean_data.m
        WZ = W0 @ Z
        np.testing.assert_allclose(WZ[:, :r] @ WZ[:, :r].T, np.eye(r), atol=1e-10)
        np.testing.assert_allclose(WZ[:, r:], 0.0, atol=1e-10)
        assert np.linalg.matrix_rank(Z) == clean_data.T

    def test_equilibrates_rank_deficient_data(self):
        dm = infeasible_data()
        Z = conditioning_transform(dm)
        np.testing.assert_allclose(Z, np.diag(np.diag(Z)))
        np.testing.assert_allclose(np.linalg.norm(np.vstack([dm.U0, dm.X0]) @ Z, axis=0), 1.0)

    def test_soft_objective_in_original_coordinates(self, clean_data, backend):
        res = solve(build_soft(clean_data, 2.0), backend)
        assert res.optimal
        expected = np.trace(res.P) + np.trace(res.L) + 2.0 * np.trace(res.V)
        assert res.gamma == pytest.approx(expected, rel=1e-6)
        np.testing.assert_allclose(clean_data.X0 @ res.Q, res.P, atol=1e-6 * np.linalg.norm(res.P))

    def test_unscaled_plant_noise_free(self, unscaled_plant, backend):
        dm = make_data(unscaled_plant, 1)
        Kopt = solve_dare(unscaled_plant).Kopt
        h2_opt = h2_norm_squared(unscaled_plant, Kopt)
        for build in (build_ideal, build_baseline):
            res = solve(build(dm), backend).raise_for_status()
            assert gain_gap(res.K, Kopt) <= 1e-3
            assert abs(res.gamma - h2_opt) <= 1e-4 * h2_opt
        soft = solve(build_soft(dm, 1.0), backend).raise_for_status()
        opt = minimum_norm_solution(dm, unscaled_plant, Kopt)
        assert h2_norm_squared(unscaled_plant, soft.K) <= (h2_opt + np.trace(opt.Vo)) * (1 + 1e-5)


class TestFallback:
    def test_unknown_solver_falls_back(self, clean_data):
        backend = CvxpyBackend("NO_SUCH_SOLVER")
        assert backend.attempts()[0] == ("NO_SUCH_SOLVER", 1e-8)
        assert ("CLARABEL", 1e-6) in backend.attempts()
        res = solve(build_baseline(clean_data), backend)
        assert res.optimal
        assert backend.solve_count == 1

    def test_no_fallbacks(self, clean_data):
        backend = CvxpyBackend("NO_SUCH_SOLVER", fallbacks=())
        assert backend.attempts() == [("NO_SUCH_SOLVER", 1e-8)]
        res = solve(build_baseline(clean_data), backend)
        assert res.status is SolveStatus.NUMERICAL_FAILURE
        assert "NO_SUCH_SOLVER" in res.message

    def test_infeasible_is_not_retried(self):
        backend = RecordingBackend()
        res = solve(build_baseline(infeasible_data()), backend)
        assert res.status is SolveStatus.INFEASIBLE
        assert backend.tried == ["CLARABEL"]


class TestSolve:
    def test_infeasible(self, backend):
        res = solve(build_baseline(infeasible_data()), backend)
        assert res.status is SolveStatus.INFEASIBLE
        with pytest.raises(SolveInfeasible):
            res.raise_for_status()

    def test_lying_backend_is_caught(self, clean_data):
        res = solve(build_baseline(clean_data), LyingBackend())
        assert res.status is SolveStatus.NUMERICAL_FAILURE
        assert res.residuals["P_lower"] < 0.0
        assert res.K is None

    def test_base_state_after_subclass_init(self):
        backend = RecordingBackend("scs", fallbacks=())
        assert backend.backend_name == "cvxpy:scs"
        assert backend.solve_count == 0
        assert backend.tried == []
        assert LyingBackend().backend_name == "lying"

    def test_backend_name_and_count(self, clean_data, backend):
        assert backend.backend_name == "cvxpy:clarabel"
        solve(build_baseline(clean_data), backend)
        assert backend.solve_count == 1


class TestLineSearch:
    def test_mu_from_bound(self):
        R = np.array([[2.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
        mu = mu_from_bound(1.0, R)
        assert mu == pytest.approx(0.5)
        assert np.linalg.eigvalsh(mu ** 2 * R @ R.T - np.eye(2)).min() >= -1e-12

    def test_noise_free_single_point(self, clean_data, backend):
        res, eta1 = sproc_line_search(clean_data, 1e-6, clean_data.X1, [1.0], backend,
                                      NoiseBound(delta=0.0))
        assert eta1 == 1.0
        assert res.optimal
        assert res.certified

    def test_uncertified_without_bound(self, clean_data, backend):
        res, eta1 = sproc_line_search(clean_data, 1e-6, clean_data.X1, [1.0, 2.0], backend)
        assert eta1 == 1.0
        assert res.certified is None

    @pytest.mark.parametrize("grid", [[], [0.5], [2.0, 1.0]])
    def test_invalid_grid(self, clean_data, backend, grid):
        with pytest.raises(InvalidProgram):
            sproc_line_search(clean_data, 1.0, clean_data.X1, grid, backend)

    def test_all_infeasible(self, backend):
        dm = infeasible_data()
        with pytest.raises(AllInfeasible):
            sproc_line_search(dm, 0.1, dm.X1, [1.0, 2.0], backend)

    def test_selection_is_deterministic(self, plant, backend):
        dm = make_data(plant, 8, noise="wgn:0.01")
        bound = NoiseBound(delta=float(np.linalg.norm(dm.D0, 2)))
        mu = mu_from_bound(bound.delta, dm.X1)
        grid = [1.0, 1.1, 1.5, 2.0, 5.0, 10.0]
        first = sproc_line_search(dm, mu, dm.X1, grid, backend, bound)
        second = sproc_line_search(dm, mu, dm.X1, grid, backend, bound)
        assert first[1] == second[1]
        assert first[1] in grid


@pytest.mark.slow
class TestNoiseFreeExactness:
    def test_fifty_random_systems(self, backend):
        rng = np.random.default_rng(2024)
        for _ in range(50):
            sys = DiscreteLtiSystem(rng.standard_normal((3, 3)), rng.standard_normal((3, 1)))
            x0 = rng.standard_normal(3)
            u = rng.standard_normal((20, 1))
            dm = build_data_matrices(simulate(sys, x0, u, NoiseSpec(), 20, rng))
            Kopt = solve_dare(sys).Kopt
            h2_opt = h2_norm_squared(sys, Kopt)
            for build in (build_ideal, build_baseline):
                res = solve(build(dm), backend).raise_for_status()
                assert gain_gap(res.K, Kopt) <= 1e-3
                assert abs(res.gamma - h2_opt) <= 1e-4 * h2_opt
            # the trace(V) penalty moves the soft optimum off Kopt, by at most trace(Vo) in H2
            soft = solve(build_soft(dm, 1.0), backend).raise_for_status()
            assert is_schur(sys.closed_loop(soft.K))
            opt = minimum_norm_solution(dm, sys, Kopt)
            assert h2_norm_squared(sys, soft.K) <= (h2_opt + np.trace(opt.Vo)) * (1 + 1e-5)
