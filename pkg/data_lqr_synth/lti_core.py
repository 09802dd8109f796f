# lti_core.py

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger
from scipy import linalg

# Stability margin used for every "stabilizing" verdict
TOL_SCHUR = 1e-9

# DARE defaults
TOL_DARE = 1e-8
DARE_STEP_TOL = 1e-12
DARE_MAX_ITER = 100000

# Above this size the Kronecker Lyapunov solve is replaced by scipy's
KRONECKER_MAX_N = 10


class LtiError(Exception):
    pass


class DimensionError(LtiError):
    pass


class NotSchur(LtiError):
    pass


class NonConvergence(LtiError):
    pass


class NotStabilizable(LtiError):
    pass


def _as_matrix(value, name):
    mtx = np.array(value, dtype=float, ndmin=2)
    if mtx.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {mtx.shape}")
    mtx.setflags(write=False)
    return mtx


def symmetrize(mtx):
    return 0.5 * (mtx + mtx.T)


@dataclass(frozen=True)
class DiscreteLtiSystem:
    """x(k+1) = A x(k) + B u(k)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise DimensionError(f"A must be a non-empty square matrix, got {A.shape}")
        if B.shape[0] != A.shape[0] or B.shape[1] < 1:
            raise DimensionError(f"B must be {A.shape[0]}xm with m >= 1, got {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def closed_loop(self, K) -> np.ndarray:
        if K is None:
            raise DimensionError("closed loop needs a gain, got None")
        K = np.asarray(K, dtype=float)
        if K.size != self.m * self.n:
            raise DimensionError(f"K must be {self.m}x{self.n}, got shape {K.shape}")
        K = K.reshape(self.m, self.n)
        return self.A + self.B @ K


@dataclass(frozen=True)
class PerformanceWeights:
    Wx: np.ndarray
    Wu: np.ndarray

    def __post_init__(self):
        Wx = _as_matrix(self.Wx, "Wx")
        Wu = _as_matrix(self.Wu, "Wu")
        if Wx.shape[0] != Wx.shape[1] or Wu.shape[0] != Wu.shape[1]:
            raise DimensionError("weights must be square")
        if not np.allclose(Wx, Wx.T) or not np.allclose(Wu, Wu.T):
            raise DimensionError("weights must be symmetric")
        if np.linalg.eigvalsh(Wx).min() < -1e-12:
            raise DimensionError("Wx must be positive semidefinite")
        if np.linalg.eigvalsh(Wu).min() <= 0:
            raise DimensionError("Wu must be positive definite")
        object.__setattr__(self, "Wx", Wx)
        object.__setattr__(self, "Wu", Wu)

    @classmethod
    def identity(cls, n: int, m: int) -> "PerformanceWeights":
        return cls(np.eye(n), np.eye(m))

    def check(self, sys: DiscreteLtiSystem):
        if self.Wx.shape[0] != sys.n or self.Wu.shape[0] != sys.m:
            raise DimensionError(
                f"weights sized ({self.Wx.shape[0]}, {self.Wu.shape[0]}) do not match n={sys.n}, m={sys.m}")

    def wu_sqrt(self) -> np.ndarray:
        return linalg.sqrtm(self.Wu).real

    def is_identity(self) -> bool:
        return np.array_equal(self.Wx, np.eye(self.Wx.shape[0])) and np.array_equal(self.Wu, np.eye(self.Wu.shape[0]))


@dataclass(frozen=True)
class RiccatiSolution:
    X: np.ndarray
    Kopt: np.ndarray
    residual: float
    iterations: int = 0


@dataclass(frozen=True)
class ClosedLoopMetrics:
    P: np.ndarray
    h2sq: float


# STABILITY FUNCS
def spectral_radius(mtx) -> float:
    mtx = np.asarray(mtx, dtype=float)
    if mtx.ndim != 2 or mtx.shape[0] != mtx.shape[1]:
        raise DimensionError(f"spectral radius needs a square matrix, got {mtx.shape}")
    if mtx.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(mtx))))


def is_schur(mtx, tol: float = TOL_SCHUR) -> bool:
    return spectral_radius(mtx) < 1.0 - tol


def _pbh_rank_ok(A, other, stacked_rows: bool) -> bool:
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0:
            continue
        shifted = A - lam * np.eye(n)
        test = np.vstack([shifted, other]) if stacked_rows else np.hstack([shifted, other])
        if np.linalg.matrix_rank(test) < n:
            return False
    return True


def is_stabilizable(sys: DiscreteLtiSystem) -> bool:
    """PBH test on the eigenvalues of A outside the open unit disc."""
    return _pbh_rank_ok(sys.A, sys.B.astype(complex), stacked_rows=False)


def is_detectable(A, Wx) -> bool:
    A = np.asarray(A, dtype=float)
    return _pbh_rank_ok(A, np.asarray(Wx, dtype=complex), stacked_rows=True)


# RICCATI FUNCS
def dare_residual(sys: DiscreteLtiSystem, w: PerformanceWeights, X) -> float:
    A, B = sys.A, sys.B
    BtXA = B.T @ X @ A
    gain = w.Wu + B.T @ X @ B
    res = A.T @ X @ A - X - BtXA.T @ np.linalg.solve(gain, BtXA) + w.Wx
    return float(np.linalg.norm(res, "fro"))


def optimal_gain(sys: DiscreteLtiSystem, w: PerformanceWeights, X) -> np.ndarray:
    A, B = sys.A, sys.B
    return -np.linalg.solve(w.Wu + B.T @ X @ B, B.T @ X @ A)


def _riccati_iteration(sys, w, X, step_tol, max_iter):
    A, B = sys.A, sys.B
    for it in range(1, max_iter + 1):
        BtXA = B.T @ X @ A
        X_next = symmetrize(A.T @ X @ A - BtXA.T @ np.linalg.solve(w.Wu + B.T @ X @ B, BtXA) + w.Wx)
        gap = np.linalg.norm(X_next - X, "fro")
        X = X_next
        if not np.all(np.isfinite(X)):
            break
        if gap <= step_tol * max(1.0, np.linalg.norm(X, "fro")):
            return X, it
    raise NonConvergence(f"Riccati iteration did not converge within {max_iter} iterations")


def solve_dare(sys: DiscreteLtiSystem, w: Optional[PerformanceWeights] = None,
               tol: float = TOL_DARE, step_tol: float = DARE_STEP_TOL,
               max_iter: int = DARE_MAX_ITER) -> RiccatiSolution:
    """
    Stabilizing solution of the discrete-time algebraic Riccati equation.

    The structured Schur solver of scipy gives the starting point, then the
    fixed-point iteration X <- A'XA - A'XB (Wu + B'XB)^-1 B'XA + Wx polishes it.
    If scipy refuses the pencil the iteration starts from Wx instead.

    Args:
        sys: plant (A, B).
        w: state/input weights, identity when omitted.
        tol: bound on the DARE residual, relative to max(1, ||X||_F).

    Returns:
        RiccatiSolution with X, Kopt = -(Wu + B'XB)^-1 B'XA and the residual.

    Raises:
        NotStabilizable: (A, B) fails the PBH test or A + B Kopt is not Schur.
        NonConvergence: the iteration hit max_iter or the residual stays above tol.
    """
    w = w or PerformanceWeights.identity(sys.n, sys.m)
    w.check(sys)

    if not is_stabilizable(sys):
        raise NotStabilizable("(A, B) is not stabilizable")
    if not w.is_identity() and not is_detectable(sys.A, w.Wx):
        logger.warning("(Wx, A) is not detectable, the stabilizing DARE solution may not be unique")

    try:
        X0 = symmetrize(linalg.solve_discrete_are(sys.A, sys.B, w.Wx, w.Wu))
    except (ValueError, np.linalg.LinAlgError) as e:
        logger.debug(f"scipy DARE failed ({e}), iterating from Wx")
        X0 = w.Wx.copy()

    X, iterations = _riccati_iteration(sys, w, X0, step_tol, max_iter)
    residual = dare_residual(sys, w, X)
    if residual > tol * max(1.0, np.linalg.norm(X, "fro")):
        raise NonConvergence(f"DARE residual {residual:.3e} above tolerance")

    Kopt = optimal_gain(sys, w, X)
    if not is_schur(sys.closed_loop(Kopt)):
        raise NotStabilizable("Riccati iteration converged but A + B Kopt is not Schur")

    X.setflags(write=False)
    Kopt.setflags(write=False)
    return RiccatiSolution(X=X, Kopt=Kopt, residual=residual, iterations=iterations)


# LYAPUNOV FUNCS
def controllability_gramian(Acl, tol_schur: float = TOL_SCHUR) -> np.ndarray:
    """Unique P with Acl P Acl' - P + I = 0."""
    Acl = np.asarray(Acl, dtype=float)
    radius = spectral_radius(Acl)
    if radius >= 1.0 - tol_schur:
        raise NotSchur(f"closed loop has spectral radius {radius:.6g}")

    n = Acl.shape[0]
    if n <= KRONECKER_MAX_N:
        # row-major vec: vec(A P A') = (A kron A) vec(P)
        lhs = np.eye(n * n) - np.kron(Acl, Acl)
        P = np.linalg.solve(lhs, np.eye(n).reshape(-1)).reshape(n, n)
    else:
        P = linalg.solve_discrete_lyapunov(Acl, np.eye(n))
    return symmetrize(P)


def lyapunov_residual(Acl, P) -> float:
    Acl = np.asarray(Acl, dtype=float)
    return float(np.linalg.norm(Acl @ P @ Acl.T - P + np.eye(P.shape[0]), "fro"))


def closed_loop_metrics(sys: DiscreteLtiSystem, K, w: Optional[PerformanceWeights] = None) -> ClosedLoopMetrics:
    P = controllability_gramian(sys.closed_loop(K))
    K = np.asarray(K, dtype=float).reshape(sys.m, sys.n)
    if w is None:
        h2sq = np.trace(P) + np.trace(K @ P @ K.T)
    else:
        w.check(sys)
        h2sq = np.trace(w.Wx @ P) + np.trace(w.Wu @ K @ P @ K.T)
    return ClosedLoopMetrics(P=P, h2sq=float(h2sq))


def h2_norm_squared(sys: DiscreteLtiSystem, K, w: Optional[PerformanceWeights] = None) -> float:
    """
    Squared H2 norm trace(P) + trace(K P K') of the closed loop driven by an
    impulse on every state channel.

    Raises:
        NotSchur: A + B K is not Schur.
    """
    return closed_loop_metrics(sys, K, w).h2sq


def relative_error(h2_gain: float, h2_opt: float) -> float:
    return (h2_gain - h2_opt) / h2_opt
