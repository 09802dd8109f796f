"""
Synthesis programs and their solve/decode step.

Every program minimises the H2 cost of the closed loop written as
trace(Wx P) + trace(L) (+ a trace(V) penalty) where the nonconvex pieces
Q P^-1 Q' are replaced by Schur complements on P >= I.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from data_lqr_synth.data_gen import DataMatrices, MissingDisturbance, numeric_rank, rank_condition
from data_lqr_synth.lti_core import DiscreteLtiSystem, PerformanceWeights
from data_lqr_synth.synthesis.backends.base_backend import BaseBackend, SolveStatus
from data_lqr_synth.synthesis.problem import SdpProblem, SynthesisError

# Feasibility re-check on decoded variables
TOL_FEAS = 1e-6


class InvalidProgram(SynthesisError):
    pass


class MissingD0(SynthesisError):
    pass


class AllInfeasible(SynthesisError):
    pass


class SolveInfeasible(SynthesisError):
    pass


class SolveNumericalFailure(SynthesisError):
    pass


class VariantKind(str, Enum):
    MODEL_BASED = "model_based"
    IDEAL = "ideal"
    BASELINE = "baseline"
    SOFT = "soft"
    SPROC = "sproc"


@dataclass(frozen=True)
class ProgramVariant:
    kind: VariantKind
    alpha: float = 1.0
    mu: Optional[float] = None
    R: Optional[np.ndarray] = None
    eta1: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind))
        if self.kind is VariantKind.SOFT and not self.alpha >= 1.0:
            raise InvalidProgram(f"soft program needs alpha >= 1, got {self.alpha}")
        if self.kind is VariantKind.SPROC:
            _check_sproc_args(self.mu, self.R, self.eta1)

    @classmethod
    def soft(cls, alpha: float = 1.0) -> "ProgramVariant":
        return cls(VariantKind.SOFT, alpha=alpha)

    @classmethod
    def sproc(cls, mu: float, R, eta1: float = 1.0) -> "ProgramVariant":
        return cls(VariantKind.SPROC, mu=mu, R=np.asarray(R, dtype=float), eta1=eta1)


@dataclass
class SynthesisResult:
    status: SolveStatus
    variant: VariantKind
    gamma: Optional[float] = None
    Q: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    rank_condition: Optional[bool] = None
    certified: Optional[bool] = None
    message: str = ""
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    def M(self) -> np.ndarray:
        """Q P^-1 Q'."""
        if self.Q is None or self.P is None:
            raise SynthesisError("M needs the Q and P of a data-driven program")
        return self.Q @ np.linalg.solve(self.P, self.Q.T)

    def raise_for_status(self) -> "SynthesisResult":
        if self.status is SolveStatus.INFEASIBLE:
            raise SolveInfeasible(f"{self.variant.value} program is infeasible: {self.message}")
        if self.status is SolveStatus.NUMERICAL_FAILURE:
            raise SolveNumericalFailure(f"{self.variant.value} program failed: {self.message}")
        return self


def _check_sproc_args(mu, R, eta1):
    if mu is None or not mu > 0:
        raise InvalidProgram(f"S-procedure program needs mu > 0, got {mu}")
    if not eta1 >= 1.0:
        raise InvalidProgram(f"S-procedure program needs eta1 >= 1, got {eta1}")
    if R is None:
        raise InvalidProgram("S-procedure program needs R")
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or numeric_rank(R) < R.shape[0]:
        raise InvalidProgram(f"R must have full row rank, got shape {R.shape}")


def _weights(w: Optional[PerformanceWeights], n: int, m: int) -> PerformanceWeights:
    w = w or PerformanceWeights.identity(n, m)
    if w.Wx.shape[0] != n or w.Wu.shape[0] != m:
        raise InvalidProgram(f"weights sized ({w.Wx.shape[0]}, {w.Wu.shape[0]}) for n={n}, m={m}")
    return w


# BUILD FUNCS
def build_model_based(sys: DiscreteLtiSystem, w: Optional[PerformanceWeights] = None) -> SdpProblem:
    """LQR with the model known, in the variables P, Y = K P and L."""
    n, m = sys.n, sys.m
    w = _weights(w, n, m)
    problem = SdpProblem("model_based", metadata={"kind": VariantKind.MODEL_BASED})
    P = problem.add_variable("P", (n, n), symmetric=True)
    Y = problem.add_variable("Y", (m, n))
    L = problem.add_variable("L", (m, m), symmetric=True)

    AP_BY = sys.A @ P + sys.B @ Y
    problem.add_psd("lyapunov", [[P - np.eye(n), AP_BY],
                                 [P]])
    problem.add_psd("P_lower", [[P - np.eye(n)]])
    problem.add_psd("L_bound", [[L, w.wu_sqrt() @ Y],
                                [P]])
    problem.minimize_trace("P", weight=None if w.is_identity() else w.Wx)
    problem.minimize_trace("L")
    return problem


def conditioning_transform(dm: DataMatrices) -> np.ndarray:
    """
    Invertible T x T matrix Z for the change of variables Q = Z Q~.

    When [U0; X0] = U S V1' has full row rank, Z = [V1 S^-1, V2] maps it onto
    the orthonormal [U, 0], so the programs never see the raw data scale
    (trajectories of unstable plants grow geometrically). Otherwise the
    columns of [U0; X0] are equilibrated.
    """
    W0 = np.vstack([dm.U0, dm.X0])
    if rank_condition(dm):
        _, s, Vt = np.linalg.svd(W0)
        Z = Vt.T.copy()
        Z[:, :len(s)] /= s
        return Z
    norms = np.linalg.norm(W0, axis=0)
    norms[norms == 0.0] = 1.0
    return np.diag(1.0 / norms)


def _data_program(name: str, kind: VariantKind, dm: DataMatrices, w: Optional[PerformanceWeights]):
    """
    Common part of the data programs, in the whitened variable Q~ (Q = Z Q~).

    Returns the problem, Q~, P and Z; builders multiply data by Z on the right.
    """
    w = _weights(w, dm.n, dm.m)
    Z = conditioning_transform(dm)
    problem = SdpProblem(name, metadata={"kind": kind, "data": dm, "rank_condition": rank_condition(dm),
                                         "transform": Z})
    if not problem.metadata["rank_condition"]:
        logger.warning(f"{name}: rank [U0; X0] < n + m, the data may not describe the system")
    n, T = dm.n, dm.T
    Q = problem.add_variable("Q", (T, n))
    P = problem.add_variable("P", (n, n), symmetric=True)
    L = problem.add_variable("L", (dm.m, dm.m), symmetric=True)
    problem.add_equality("X0Q_eq_P", (dm.X0 @ Z) @ Q - P)
    problem.add_psd("P_lower", [[P - np.eye(n)]])
    problem.add_psd("L_bound", [[L, (w.wu_sqrt() @ dm.U0 @ Z) @ Q],
                                [P]])
    problem.minimize_trace("P", weight=None if w.is_identity() else w.Wx)
    problem.minimize_trace("L")
    return problem, Q, P, Z


def _add_v(problem: SdpProblem, T: int, Z: np.ndarray, scale: float = 1.0):
    """V = Z V~ Z', penalised through trace(V) = trace(Z'Z V~)."""
    V = problem.add_variable("V", (T, T), symmetric=True)
    problem.minimize_trace("V", scale=scale, weight=Z.T @ Z)
    return V


def build_ideal(dm: DataMatrices, w: Optional[PerformanceWeights] = None) -> SdpProblem:
    """Data program with the noise D0 removed from X1."""
    try:
        D0 = dm.require_d0()
    except MissingDisturbance:
        raise MissingD0("the ideal program needs the recorded disturbance D0") from None
    problem, Q, P, Z = _data_program("ideal", VariantKind.IDEAL, dm, w)
    problem.add_psd("lyapunov", [[P - np.eye(dm.n), ((dm.X1 - D0) @ Z) @ Q],
                                 [P]])
    return problem


def build_baseline(dm: DataMatrices, w: Optional[PerformanceWeights] = None) -> SdpProblem:
    problem, Q, P, Z = _data_program("baseline", VariantKind.BASELINE, dm, w)
    problem.add_psd("lyapunov", [[P - np.eye(dm.n), (dm.X1 @ Z) @ Q],
                                 [P]])
    return problem


def build_soft(dm: DataMatrices, alpha: float = 1.0, w: Optional[PerformanceWeights] = None) -> SdpProblem:
    """Baseline plus V >= Q P^-1 Q' and the penalty alpha * trace(V)."""
    if not alpha >= 1.0:
        raise InvalidProgram(f"soft program needs alpha >= 1, got {alpha}")
    problem, Q, P, Z = _data_program("soft", VariantKind.SOFT, dm, w)
    V = _add_v(problem, dm.T, Z, scale=alpha)
    problem.add_psd("lyapunov", [[P - np.eye(dm.n), (dm.X1 @ Z) @ Q],
                                 [P]])
    # congruent to [[V, Q], [Q', P]] under diag(Z, I)
    problem.add_psd("V_bound", [[V, Q],
                                [P]])
    problem.metadata["alpha"] = float(alpha)
    return problem


def build_sproc(dm: DataMatrices, mu: float, R, eta1: float = 1.0,
                w: Optional[PerformanceWeights] = None) -> SdpProblem:
    """
    Robust program for noise in the set D0 V D0' <= mu^2 R V R' (S-procedure).

    The 3x3 block is written with P in place of X0 Q, which the equality
    constraint makes equivalent.
    """
    _check_sproc_args(mu, R, eta1)
    R = np.asarray(R, dtype=float)
    if R.shape != (dm.n, dm.T):
        raise InvalidProgram(f"R must be {dm.n}x{dm.T}, got {R.shape}")
    n, T = dm.n, dm.T
    problem, Q, P, Z = _data_program("sproc", VariantKind.SPROC, dm, w)
    V = _add_v(problem, T, Z)
    RZ = R @ Z
    noise_set = (mu ** 2 * RZ) @ V @ RZ.T
    # congruent to the block in (Q, V) under diag(I, Z, I)
    problem.add_psd("sprocedure", [[P - noise_set - np.eye(n) / eta1, None, -((dm.X1 @ Z) @ Q)],
                                   [V, Q],
                                   [P]],
                    sizes=(n, T, n))
    problem.metadata.update(mu=float(mu), eta1=float(eta1))
    return problem


def build_program(variant: ProgramVariant, dm: Optional[DataMatrices] = None,
                  sys: Optional[DiscreteLtiSystem] = None,
                  w: Optional[PerformanceWeights] = None) -> SdpProblem:
    if variant.kind is VariantKind.MODEL_BASED:
        if sys is None:
            raise InvalidProgram("the model-based program needs the system")
        return build_model_based(sys, w)
    if dm is None:
        raise InvalidProgram(f"the {variant.kind.value} program needs data")
    if variant.kind is VariantKind.IDEAL:
        return build_ideal(dm, w)
    if variant.kind is VariantKind.BASELINE:
        return build_baseline(dm, w)
    if variant.kind is VariantKind.SOFT:
        return build_soft(dm, variant.alpha, w)
    return build_sproc(dm, variant.mu, variant.R, variant.eta1, w)


# SOLVE FUNCS
def _feasibility_residuals(problem: SdpProblem, values) -> Dict[str, float]:
    """Scaled slack of every constraint: >= -tol for PSD blocks, <= tol for equalities."""
    residuals = {}
    for psd in problem.psd_constraints:
        block = psd.assemble(values)
        scale = max(1.0, float(np.linalg.norm(block, 2)))
        residuals[psd.name] = float(np.linalg.eigvalsh(block).min()) / scale
    for eq in problem.equality_constraints:
        scale = max([1.0] + [float(np.linalg.norm(t.evaluate(values[t.variable.name]), 2)) for t in eq.expr.terms])
        residuals[eq.name] = float(np.linalg.norm(eq.expr.evaluate(values), 2)) / scale
    return residuals


def _feasible(problem: SdpProblem, residuals: Dict[str, float], tol: float) -> bool:
    eq_names = {eq.name for eq in problem.equality_constraints}
    for name, value in residuals.items():
        if not np.isfinite(value):
            return False
        if name in eq_names and value > tol:
            return False
        if name not in eq_names and value < -tol:
            return False
    return True


def solve(problem: SdpProblem, backend: BaseBackend, tol_feas: float = TOL_FEAS) -> SynthesisResult:
    """
    Solve a synthesis program and decode the gain.

    K = U0 Q P^-1 for data programs and K = Y P^-1 for the model-based one.
    Data programs are solved in whitened coordinates; Q and V are mapped back
    with the transform stored on the problem before they are returned.
    Whatever the backend reports, the decoded point is re-checked: every PSD
    block must have lambda_min >= -tol_feas (relative to its norm) and every
    equality a relative residual <= tol_feas, else the status becomes
    NUMERICAL_FAILURE.
    """
    kind = VariantKind(problem.metadata.get("kind", VariantKind.BASELINE))
    rank_ok = problem.metadata.get("rank_condition")
    solution = backend.solve(problem)
    if solution.status is not SolveStatus.OPTIMAL:
        logger.debug(f"{problem.name}: {solution.status.value} ({solution.message})")
        return SynthesisResult(status=solution.status, variant=kind, rank_condition=rank_ok,
                               message=solution.message)

    missing = set(problem.variables) - set(solution.values)
    if missing:
        return SynthesisResult(status=SolveStatus.NUMERICAL_FAILURE, variant=kind, rank_condition=rank_ok,
                               message=f"backend returned no value for {sorted(missing)}")

    values = {name: np.asarray(v, dtype=float) for name, v in solution.values.items()}
    for name, var in problem.variables.items():
        if var.symmetric:
            values[name] = 0.5 * (values[name] + values[name].T)

    residuals = _feasibility_residuals(problem, values)
    if not _feasible(problem, residuals, tol_feas):
        logger.warning(f"{problem.name}: backend reported optimal but the decoded point violates "
                       f"the constraints {residuals}")
        return SynthesisResult(status=SolveStatus.NUMERICAL_FAILURE, variant=kind, rank_condition=rank_ok,
                               message="feasibility re-check failed", residuals=residuals)

    gamma = problem.objective_value(values)
    P = values["P"]
    if kind is VariantKind.MODEL_BASED:
        K = np.linalg.solve(P, values["Y"].T).T
    else:
        dm: DataMatrices = problem.metadata["data"]
        Z = problem.metadata.get("transform")
        if Z is not None:
            K = np.linalg.solve(P, ((dm.U0 @ Z) @ values["Q"]).T).T
            values["Q"] = Z @ values["Q"]
            if "V" in values:
                values["V"] = Z @ values["V"] @ Z.T
        else:
            K = np.linalg.solve(P, (dm.U0 @ values["Q"]).T).T

    return SynthesisResult(status=SolveStatus.OPTIMAL, variant=kind, gamma=gamma,
                           Q=values.get("Q"), P=P, L=values.get("L"), V=values.get("V"), Y=values.get("Y"),
                           K=K, rank_condition=rank_ok, message=solution.message, residuals=residuals)


def synthesize(variant: ProgramVariant, backend: BaseBackend, dm: Optional[DataMatrices] = None,
               sys: Optional[DiscreteLtiSystem] = None, w: Optional[PerformanceWeights] = None) -> SynthesisResult:
    return solve(build_program(variant, dm, sys, w), backend)


# S-PROCEDURE
def mu_from_bound(delta: float, R) -> float:
    """Smallest mu with delta^2 I <= mu^2 R R', i.e. delta / sigma_min(R)."""
    R = np.asarray(R, dtype=float)
    sigma = np.linalg.svd(R, compute_uv=False)
    if R.shape[0] > R.shape[1] or sigma.min() <= 0.0:
        raise InvalidProgram("R must have full row rank")
    return float(delta / sigma.min())


def sproc_line_search(dm: DataMatrices, mu: float, R, eta_grid: Sequence[float], backend: BaseBackend,
                      bound=None, w: Optional[PerformanceWeights] = None) -> Tuple[SynthesisResult, float]:
    """
    Line search over eta1 for the S-procedure program.

    Picks the smallest grid value whose program is feasible and, when a noise
    bound is given, whose data-only check of D0 V D0' <= mu^2 R V R' passes.
    Without a passing check the smallest feasible value is returned with
    ``certified`` False.

    Raises:
        InvalidProgram: empty grid, not ascending, or a value below 1.
        AllInfeasible: no grid value gives a feasible program.
    """
    from data_lqr_synth.certificates import data_only_check_34

    grid = [float(v) for v in eta_grid]
    if not grid:
        raise InvalidProgram("eta1 grid is empty")
    if any(v < 1.0 for v in grid):
        raise InvalidProgram(f"eta1 grid values must be >= 1, got {grid}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidProgram(f"eta1 grid must be ascending, got {grid}")

    fallback = None
    for eta1 in grid:
        result = solve(build_sproc(dm, mu, R, eta1, w), backend)
        if not result.optimal:
            logger.debug(f"sproc eta1={eta1}: {result.status.value}")
            continue
        if bound is None:
            return result, eta1
        if data_only_check_34(result, bound, mu, R):
            result.certified = True
            return result, eta1
        if fallback is None:
            fallback = (result, eta1)

    if fallback is None:
        raise AllInfeasible(f"S-procedure program infeasible on the whole grid {grid}")
    fallback[0].certified = False
    return fallback
