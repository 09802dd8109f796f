# certificates.py

from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from data_lqr_synth.data_gen import DataMatrices, NoiseSpec, ShapeMismatch, numeric_rank
from data_lqr_synth.lti_core import DiscreteLtiSystem, controllability_gramian, symmetrize

if TYPE_CHECKING:
    from data_lqr_synth.synthesis.programs import SynthesisResult

# Round-off slack for the eigenvalue tests on data-only conditions
TOL_CHECK = 1e-12

# Over-estimate of the noise standard deviation in the WGN delta rule
WGN_SIGMA_MARGIN = 1.5


class CertificateError(Exception):
    pass


class CertificateFailure(CertificateError):
    pass


class MissingV(CertificateError):
    pass


class RankDeficient(CertificateError):
    pass


class NoiseBound(BaseModel):
    """Spectral-norm bound ||D0|| <= delta and where it came from."""

    delta: float = Field(ge=0.0)
    rule: Literal["wgn_rule", "bias_rule", "user"] = "user"

    @classmethod
    def from_noise(cls, noise: NoiseSpec, T: int, n: int) -> "NoiseBound":
        if noise.kind == "wgn":
            return cls(delta=float(np.sqrt(T) * WGN_SIGMA_MARGIN * noise.level), rule="wgn_rule")
        if noise.kind in ("bias", "sine"):
            return cls(delta=float(np.sqrt(T * n) * noise.level), rule="bias_rule")
        return cls(delta=0.0, rule="user")


class CertificateReport(BaseModel):
    mode: Literal["oracle", "data_only"]
    psi_bar_lambda_max: Optional[float] = None
    theta_bar_lambda_max: Optional[float] = None
    eta1: Optional[float] = None
    eta2: Optional[float] = None
    eta3: Optional[float] = None
    data_eta1: Optional[float] = None
    design_eta1: Optional[float] = None
    data_check_33: Optional[bool] = None
    data_check_34: Optional[bool] = None
    noise_set_condition: Optional[bool] = None
    performance_bound: Optional[float] = None
    relative_error_bound: Optional[float] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.eta1 is not None and self.psi_bar_lambda_max is not None and self.psi_bar_lambda_max >= 1.0:
            raise ValueError("eta1 reported although lambda_max(Psi) >= 1")
        if self.eta3 is not None and (self.eta1 is None or self.eta2 is None):
            raise ValueError("eta3 needs eta1 and eta2")
        return self

    @property
    def data_certified(self) -> Optional[bool]:
        """Outcome of the data-only certificate that applies to the program."""
        if self.data_check_34 is not None:
            return self.data_check_34
        return self.data_check_33


# NOISE MATRICES
def _check_shapes(M, X1, D0):
    M, X1, D0 = (np.asarray(v, dtype=float) for v in (M, X1, D0))
    T = M.shape[0]
    if M.shape != (T, T) or X1.shape != D0.shape or X1.shape[1] != T:
        raise ShapeMismatch(f"incompatible shapes M {M.shape}, X1 {X1.shape}, D0 {D0.shape}")
    return M, X1, D0


def psi(M, X1, D0) -> np.ndarray:
    """D0 M D0' - X1 M D0' - D0 M X1'."""
    M, X1, D0 = _check_shapes(M, X1, D0)
    XMD = X1 @ M @ D0.T
    return symmetrize(D0 @ M @ D0.T - XMD - XMD.T)


def theta(M, X1, P) -> np.ndarray:
    """X1 M X1' - P; the baseline constraint reads lambda_max(Theta) + 1 <= 0."""
    X1 = np.asarray(X1, dtype=float)
    return symmetrize(X1 @ np.asarray(M, dtype=float) @ X1.T - np.asarray(P, dtype=float))


def eta_from_lambda(lam: float) -> float:
    """Smallest eta >= 1 with lam <= 1 - 1/eta."""
    if lam <= 0.0:
        return 1.0
    if lam < 1.0:
        return 1.0 / (1.0 - lam)
    raise CertificateFailure(f"lambda_max = {lam:.6g} >= 1, no admissible eta")


def eta1_from_solution(res: "SynthesisResult", X1, D0) -> float:
    """Ground-truth stability margin of a data-driven solution (needs the true D0)."""
    return eta_from_lambda(float(np.linalg.eigvalsh(psi(res.M(), X1, D0)).max()))


def eta2_from_optimal(Qo, Po, X1, D0) -> float:
    Qo = np.asarray(Qo, dtype=float)
    Mo = Qo @ np.linalg.solve(np.asarray(Po, dtype=float), Qo.T)
    return eta_from_lambda(float(np.linalg.eigvalsh(-psi(Mo, X1, D0)).max()))


# DATA-ONLY CHECKS
def _norm_bound_lhs(res: "SynthesisResult", X1, bound: NoiseBound) -> float:
    M = res.M()
    delta = bound.delta
    return delta ** 2 * np.linalg.norm(M, 2) + 2.0 * delta * np.linalg.norm(np.asarray(X1) @ M, 2)


def data_only_check_33(res: "SynthesisResult", X1, bound: NoiseBound, eta1: float) -> bool:
    """delta^2 ||M|| + 2 delta ||X1 M|| <= 1 - 1/eta1 (spectral norms)."""
    if not eta1 >= 1.0:
        raise CertificateError(f"eta1 must be >= 1, got {eta1}")
    return bool(_norm_bound_lhs(res, X1, bound) <= 1.0 - 1.0 / eta1)


def data_only_eta1(res: "SynthesisResult", X1, bound: NoiseBound) -> Optional[float]:
    """Tightest eta1 certified from data alone, None when no eta1 works."""
    lhs = _norm_bound_lhs(res, X1, bound)
    if lhs >= 1.0:
        return None
    return eta_from_lambda(lhs)


def _noise_set_matrix(V, mu: float, R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return symmetrize(mu ** 2 * R @ V @ R.T)


def data_only_check_34(res: "SynthesisResult", bound: NoiseBound, mu: float, R) -> bool:
    """delta^2 ||V|| I <= mu^2 R V R', sufficient for the S-procedure noise set when ||D0|| <= delta."""
    if res.V is None:
        raise MissingV("the check needs V from the S-procedure program")
    V = symmetrize(np.asarray(res.V, dtype=float))
    target = _noise_set_matrix(V, mu, R)
    gap = target - bound.delta ** 2 * np.linalg.norm(V, 2) * np.eye(target.shape[0])
    scale = max(1.0, float(np.linalg.norm(target, 2)))
    return bool(np.linalg.eigvalsh(gap).min() >= -TOL_CHECK * scale)


def sproc_noise_set_condition(res: "SynthesisResult", D0, mu: float, R) -> bool:
    """Oracle check D0 V D0' <= mu^2 R V R'."""
    if res.V is None:
        raise MissingV("the check needs V from the S-procedure program")
    V = symmetrize(np.asarray(res.V, dtype=float))
    D0 = np.asarray(D0, dtype=float)
    target = _noise_set_matrix(V, mu, R)
    gap = target - symmetrize(D0 @ V @ D0.T)
    scale = max(1.0, float(np.linalg.norm(target, 2)))
    return bool(np.linalg.eigvalsh(gap).min() >= -TOL_CHECK * scale)


# MINIMUM-NORM OPTIMAL SOLUTION
def minimum_norm_Go(W0, K) -> np.ndarray:
    """G_o = pinv(W0) [K; I], the minimum Frobenius-norm solution of W0 G = [K; I]."""
    W0 = np.asarray(W0, dtype=float)
    K = np.asarray(K, dtype=float)
    m = W0.shape[0] - K.shape[1]
    if K.shape[0] != m:
        raise ShapeMismatch(f"K has shape {K.shape}, expected ({m}, {K.shape[1]})")
    if numeric_rank(W0) < W0.shape[0]:
        raise RankDeficient("[U0; X0] does not have full row rank")
    return np.linalg.pinv(W0) @ np.vstack([K, np.eye(K.shape[1])])


@dataclass(frozen=True)
class MinimumNormSolution:
    Go: np.ndarray
    Po: np.ndarray
    Qo: np.ndarray
    Lo: np.ndarray
    Vo: np.ndarray
    h2: float


def minimum_norm_solution(dm: DataMatrices, sys: DiscreteLtiSystem, Kopt) -> MinimumNormSolution:
    """
    Optimal point of the ideal program built from the Riccati gain.

    P_o is the Gramian of A + B Kopt, Q_o = G_o P_o (so X0 Q_o = P_o and
    U0 Q_o = Kopt P_o), L_o = Kopt P_o Kopt' and V_o = Q_o P_o^-1 Q_o'.
    """
    Kopt = np.asarray(Kopt, dtype=float)
    Go = minimum_norm_Go(dm.W0, Kopt)
    Po = controllability_gramian(sys.closed_loop(Kopt))
    Qo = Go @ Po
    Lo = symmetrize(Kopt @ Po @ Kopt.T)
    Vo = symmetrize(Qo @ np.linalg.solve(Po, Qo.T))
    return MinimumNormSolution(Go=Go, Po=Po, Qo=Qo, Lo=Lo, Vo=Vo, h2=float(np.trace(Po) + np.trace(Lo)))


# REPORT
@dataclass
class CertificateContext:
    """Everything a report may draw on; absent fields are skipped, never guessed."""

    X1: np.ndarray
    D0: Optional[np.ndarray] = None
    bound: Optional[NoiseBound] = None
    mu: Optional[float] = None
    R: Optional[np.ndarray] = None
    design_eta1: Optional[float] = None
    alpha: float = 1.0
    optimal: Optional[MinimumNormSolution] = None
    h2_opt: Optional[float] = None


def _lambda_max(mtx) -> float:
    return float(np.linalg.eigvalsh(mtx).max())


def assemble_report(res: "SynthesisResult", ctx: CertificateContext) -> CertificateReport:
    mode = "oracle" if ctx.D0 is not None else "data_only"
    fields = {"mode": mode}
    if not res.optimal:
        return CertificateReport(**fields)

    kind = getattr(res.variant, "value", res.variant)
    if kind in ("model_based", "ideal"):
        # exact programs: nothing to inflate
        fields.update(eta1=1.0, eta2=1.0, performance_bound=res.gamma, relative_error_bound=0.0)
        return CertificateReport(**fields)

    nominal = float(np.trace(res.P) + np.trace(res.L))
    M = res.M()
    fields["theta_bar_lambda_max"] = _lambda_max(theta(M, ctx.X1, res.P))

    if ctx.D0 is not None:
        lam = _lambda_max(psi(M, ctx.X1, ctx.D0))
        fields["psi_bar_lambda_max"] = lam
        try:
            fields["eta1"] = eta_from_lambda(lam)
        except CertificateFailure:
            pass
        if ctx.optimal is not None:
            try:
                fields["eta2"] = eta2_from_optimal(ctx.optimal.Qo, ctx.optimal.Po, ctx.X1, ctx.D0)
            except CertificateFailure:
                pass

    if ctx.bound is not None:
        data_eta1 = data_only_eta1(res, ctx.X1, ctx.bound)
        fields["data_eta1"] = data_eta1
        fields["data_check_33"] = data_eta1 is not None

    if kind == "sproc":
        fields["design_eta1"] = ctx.design_eta1
        if res.V is not None and ctx.mu is not None and ctx.R is not None:
            if ctx.bound is not None:
                fields["data_check_34"] = data_only_check_34(res, ctx.bound, ctx.mu, ctx.R)
            if ctx.D0 is not None:
                fields["noise_set_condition"] = sproc_noise_set_condition(res, ctx.D0, ctx.mu, ctx.R)
        if ctx.design_eta1 is not None and (fields.get("noise_set_condition") or fields.get("data_check_34")):
            fields["performance_bound"] = ctx.design_eta1 * nominal
        return CertificateReport(**fields)

    eta1 = fields.get("eta1", fields.get("data_eta1"))
    if eta1 is not None:
        fields["performance_bound"] = eta1 * nominal

    eta1, eta2 = fields.get("eta1"), fields.get("eta2")
    if eta1 is not None and eta2 is not None:
        fields["relative_error_bound"] = eta1 * eta2 - 1.0
        if kind == "soft":
            h2_opt = ctx.h2_opt if ctx.h2_opt is not None else ctx.optimal.h2
            eta3 = ctx.alpha * eta1 * eta2 * float(np.trace(ctx.optimal.Vo)) / h2_opt
            fields["eta3"] = eta3
            fields["relative_error_bound"] += eta3
    return CertificateReport(**fields)
