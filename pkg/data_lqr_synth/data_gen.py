# data_gen.py

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from data_lqr_synth.lti_core import DiscreteLtiSystem

# Values beyond this are treated as a diverged simulation
DIVERGENCE_LIMIT = 1e150


class DataError(ValueError):
    pass


class ShapeMismatch(DataError):
    pass


class ZeroNoise(DataError):
    pass


class DivergedTrajectory(DataError):
    pass


class EmptyEnsemble(DataError):
    pass


class MissingDisturbance(DataError):
    pass


# NOISE
class NoiseSpec(BaseModel):
    """
    Disturbance model of an experiment.

    ``wgn`` is full-state Gaussian noise with standard deviation ``level``;
    ``bias`` and ``sine`` apply a per-input-channel amplitude kappa drawn from
    uniform(-level, level), entering through B as B kappa and B kappa sin(k).
    """

    kind: Literal["none", "wgn", "bias", "sine"] = "none"
    level: float = Field(default=0.0, ge=0.0)
    channel: Optional[Literal["state", "input"]] = None
    kappa: Optional[List[float]] = None

    @model_validator(mode="after")
    def _default_channel(self):
        if self.channel is None:
            self.channel = "state" if self.kind in ("none", "wgn") else "input"
        return self

    @classmethod
    def parse(cls, text: Union[str, "NoiseSpec"]) -> "NoiseSpec":
        """Parse ``none``, ``wgn:0.1``, ``bias:0.05``, ``sine:0.1``, optionally suffixed ``@input``/``@state``."""
        if isinstance(text, NoiseSpec):
            return text
        text = str(text).strip().lower()
        channel = None
        if "@" in text:
            text, channel = text.split("@", 1)
        if text in ("", "none"):
            return cls(kind="none", channel=channel)
        kind, _, level = text.partition(":")
        if not level:
            raise ValueError(f"noise '{text}' needs a level, e.g. wgn:0.1")
        return cls(kind=kind, level=float(level), channel=channel)

    @property
    def label(self) -> str:
        if self.kind == "none":
            base = "none"
        else:
            base = f"{self.kind}:{self.level:g}"
        default_channel = "state" if self.kind in ("none", "wgn") else "input"
        if self.channel != default_channel:
            base += f"@{self.channel}"
        return base

    def seed_key(self) -> int:
        return zlib.crc32(self.label.encode("utf-8"))


class EnsembleSpec(BaseModel):
    N: int = Field(default=1, ge=1)
    shared_input: bool = True


def disturbance_sequence(noise: NoiseSpec, B: np.ndarray, T: int,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Draw d(0..T-1) as a (T, n) array.

    Input-channel noise is drawn per input and mapped through B; state-channel
    noise is drawn per state.
    """
    n, m = B.shape
    if noise.kind == "none" or (noise.level == 0.0 and noise.kappa is None):
        return np.zeros((T, n))
    rng = rng if rng is not None else np.random.default_rng()
    width = m if noise.channel == "input" else n

    if noise.kind == "wgn":
        w = rng.normal(0.0, noise.level, size=(T, width))
    else:
        if noise.kappa is not None:
            kappa = np.asarray(noise.kappa, dtype=float).reshape(width)
        else:
            kappa = rng.uniform(-noise.level, noise.level, size=width)
        profile = np.ones(T) if noise.kind == "bias" else np.sin(np.arange(T))
        w = np.outer(profile, kappa)
    return w @ B.T if noise.channel == "input" else w


# TRAJECTORIES
@dataclass(frozen=True)
class Trajectory:
    """States x (T+1, n), inputs u (T, m) and, when recorded, disturbances d (T, n)."""

    x: np.ndarray
    u: np.ndarray
    d: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        u = np.asarray(self.u, dtype=float)
        u = u.reshape(len(u), -1) if u.ndim == 1 else u
        if x.shape[0] != u.shape[0] + 1:
            raise ShapeMismatch(f"x has {x.shape[0]} samples, expected len(u) + 1 = {u.shape[0] + 1}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)
        if self.d is not None:
            d = np.asarray(self.d, dtype=float).reshape(u.shape[0], x.shape[1])
            object.__setattr__(self, "d", d)

    @property
    def T(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def to_csv(self, path):
        """One row per time step: k, x_1..x_n, u_1..u_m, d_1..d_n (inputs and disturbances empty at k = T)."""
        header = ["k"] + [f"x{i + 1}" for i in range(self.n)] + [f"u{i + 1}" for i in range(self.m)]
        if self.d is not None:
            header += [f"d{i + 1}" for i in range(self.n)]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for k in range(self.T + 1):
                row = [k] + [repr(float(v)) for v in self.x[k]]
                if k < self.T:
                    row += [repr(float(v)) for v in self.u[k]]
                    if self.d is not None:
                        row += [repr(float(v)) for v in self.d[k]]
                else:
                    row += [""] * (len(header) - len(row))
                writer.writerow(row)


def _check_inputs(u, T, m):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1) if m == 1 else u.reshape(1, -1)
    if u.shape != (T, m):
        raise ShapeMismatch(f"input sequence has shape {u.shape}, expected ({T}, {m})")
    return u


def simulate_with_disturbance(sys: DiscreteLtiSystem, x0, u, d) -> Trajectory:
    T = len(u)
    u = _check_inputs(u, T, sys.m)
    d = np.asarray(d, dtype=float).reshape(T, sys.n)
    x = np.zeros((T + 1, sys.n))
    x[0] = np.asarray(x0, dtype=float).reshape(sys.n)
    for k in range(T):
        x[k + 1] = sys.A @ x[k] + sys.B @ u[k] + d[k]
    return Trajectory(x=x, u=u, d=d)


def simulate(sys: DiscreteLtiSystem, x0, u, noise: NoiseSpec, T: int,
             rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Run x(k+1) = A x(k) + B u(k) + d(k) for T steps, recording d."""
    if T < 1:
        raise DataError("T must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    if x0.size != sys.n:
        raise ShapeMismatch(f"x0 has {x0.size} entries, system has n={sys.n}")
    u = _check_inputs(u, T, sys.m)
    d = disturbance_sequence(noise, sys.B, T, rng)
    return simulate_with_disturbance(sys, x0, u, d)


def simulate_nonlinear(f: Callable[[np.ndarray, np.ndarray], np.ndarray], x0, u,
                       noise: NoiseSpec, T: int, rng: Optional[np.random.Generator] = None) -> Trajectory:
    """
    Run x(k+1) = f(x(k), u(k)) + xi(k) and record xi as the trajectory's d.

    Input-channel noise w is applied as f(x, u + w) and recorded as
    xi = f(x, u + w) - f(x, u). The linearisation remainder is not computed
    here, see ``implied_disturbance``.

    Raises:
        DivergedTrajectory: a state became non-finite or exceeded DIVERGENCE_LIMIT.
    """
    if T < 1:
        raise DataError("T must be at least 1")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = x0.size
    u = np.asarray(u, dtype=float)
    m = 1 if u.ndim == 1 else u.shape[1]
    u = _check_inputs(u, T, m)

    # input noise is drawn in input coordinates, state noise in state coordinates
    if noise.channel == "input":
        w = disturbance_sequence(noise, np.eye(m), T, rng)
    else:
        w = disturbance_sequence(noise, np.zeros((n, m)), T, rng)

    x = np.zeros((T + 1, n))
    xi = np.zeros((T, n))
    x[0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            nominal = np.asarray(f(x[k], u[k]), dtype=float).reshape(n)
            if noise.channel == "input":
                step = np.asarray(f(x[k], u[k] + w[k]), dtype=float).reshape(n)
                xi[k] = step - nominal
                x[k + 1] = step
            else:
                xi[k] = w[k]
                x[k + 1] = nominal + w[k]
            if not np.all(np.isfinite(x[k + 1])) or np.max(np.abs(x[k + 1])) > DIVERGENCE_LIMIT:
                raise DivergedTrajectory(f"state diverged at step {k + 1}")
    return Trajectory(x=x, u=u, d=xi)


# SNAPSHOT MATRICES
@dataclass(frozen=True)
class DataMatrices:
    """Snapshot matrices U0 (m x T), X0 (n x T), X1 (n x T) and, in oracle mode, D0 (n x T)."""

    U0: np.ndarray
    X0: np.ndarray
    X1: np.ndarray
    D0: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("U0", "X0", "X1", "D0"):
            value = getattr(self, name)
            if value is None:
                continue
            mtx = np.array(value, dtype=float, ndmin=2)
            mtx.setflags(write=False)
            object.__setattr__(self, name, mtx)
        T = self.X0.shape[1]
        if self.U0.shape[1] != T or self.X1.shape != self.X0.shape:
            raise ShapeMismatch(
                f"snapshot shapes disagree: U0 {self.U0.shape}, X0 {self.X0.shape}, X1 {self.X1.shape}")
        if self.D0 is not None and self.D0.shape != self.X0.shape:
            raise ShapeMismatch(f"D0 has shape {self.D0.shape}, expected {self.X0.shape}")

    @property
    def n(self) -> int:
        return self.X0.shape[0]

    @property
    def m(self) -> int:
        return self.U0.shape[0]

    @property
    def T(self) -> int:
        return self.X0.shape[1]

    @property
    def W0(self) -> np.ndarray:
        return np.vstack([self.U0, self.X0])

    def require_d0(self) -> np.ndarray:
        if self.D0 is None:
            raise MissingDisturbance("D0 is not recorded for this dataset")
        return self.D0

    def data_only(self) -> "DataMatrices":
        return DataMatrices(U0=self.U0, X0=self.X0, X1=self.X1)

    def with_d0(self, D0) -> "DataMatrices":
        return DataMatrices(U0=self.U0, X0=self.X0, X1=self.X1, D0=D0)

    def to_csv(self, path):
        """One row per sample column t: t, u0_*, x0_*, x1_*, d0_* (d0 only when recorded)."""
        header = (["t"] + [f"u0_{i + 1}" for i in range(self.m)] + [f"x0_{i + 1}" for i in range(self.n)]
                  + [f"x1_{i + 1}" for i in range(self.n)])
        blocks = [self.U0, self.X0, self.X1]
        if self.D0 is not None:
            header += [f"d0_{i + 1}" for i in range(self.n)]
            blocks.append(self.D0)
        stacked = np.vstack(blocks)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for t in range(self.T):
                writer.writerow([t] + [repr(float(v)) for v in stacked[:, t]])


def build_data_matrices(traj: Trajectory) -> DataMatrices:
    D0 = traj.d.T if traj.d is not None else None
    return DataMatrices(U0=traj.u.T, X0=traj.x[:-1].T, X1=traj.x[1:].T, D0=D0)


def implied_disturbance(sys: DiscreteLtiSystem, dm: DataMatrices) -> np.ndarray:
    """D0 = X1 - A X0 - B U0: everything the linear model does not explain."""
    return dm.X1 - sys.A @ dm.X0 - sys.B @ dm.U0


# EXCITATION
def hankel(z, s: int) -> np.ndarray:
    """
    Block Hankel matrix of order s of the signal z (T samples of dimension sigma).

    Block row i holds z(i), z(i+1), ..., z(T-s+i), so the result has
    sigma * s rows and T - s + 1 columns.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    T, sigma = z.shape
    if s < 1 or s > T:
        raise DataError(f"Hankel order {s} needs 1 <= s <= T = {T}")
    cols = T - s + 1
    H = np.zeros((sigma * s, cols))
    for i in range(s):
        H[i * sigma:(i + 1) * sigma, :] = z[i:i + cols].T
    return H


def numeric_rank(mtx) -> int:
    # numpy's default threshold: max(rows, cols) * eps * sigma_max
    mtx = np.asarray(mtx, dtype=float)
    if mtx.size == 0:
        return 0
    return int(np.linalg.matrix_rank(mtx))


def is_persistently_exciting(u, s: int) -> bool:
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    if s < 1 or s > u.shape[0]:
        return False
    return numeric_rank(hankel(u, s)) == u.shape[1] * s


def rank_condition(dm: DataMatrices) -> bool:
    """rank [U0; X0] = n + m."""
    if dm.T < dm.n + dm.m:
        return False
    return numeric_rank(dm.W0) == dm.n + dm.m


# ENSEMBLES
def ensemble_average(datasets: Sequence[DataMatrices], spec: Optional[EnsembleSpec] = None) -> DataMatrices:
    """Entrywise mean of the snapshot matrices of N experiments."""
    if len(datasets) == 0:
        raise EmptyEnsemble("cannot average an empty ensemble")
    spec = spec or EnsembleSpec(N=len(datasets))
    if spec.N != len(datasets):
        raise ShapeMismatch(f"ensemble declares N={spec.N} but {len(datasets)} datasets were given")

    first = datasets[0]
    for idx, dm in enumerate(datasets[1:], start=1):
        if dm.U0.shape != first.U0.shape or dm.X0.shape != first.X0.shape:
            raise ShapeMismatch(f"dataset {idx} has shape (n={dm.n}, m={dm.m}, T={dm.T}), "
                                f"expected (n={first.n}, m={first.m}, T={first.T})")

    if any(not np.array_equal(dm.U0, first.U0) for dm in datasets[1:]):
        logger.warning("Ensemble inputs differ across cycles, the averaged input need not be persistently exciting")

    U0 = np.mean([dm.U0 for dm in datasets], axis=0)
    X0 = np.mean([dm.X0 for dm in datasets], axis=0)
    X1 = np.mean([dm.X1 for dm in datasets], axis=0)
    D0 = None
    if all(dm.D0 is not None for dm in datasets):
        D0 = np.mean([dm.D0 for dm in datasets], axis=0)
    return DataMatrices(U0=U0, X0=X0, X1=X1, D0=D0)


def collect_ensemble(sys: DiscreteLtiSystem, x0s, u, noise: NoiseSpec, T: int,
                     rng: Optional[np.random.Generator] = None) -> List[Trajectory]:
    """One trajectory per initial state in ``x0s``, all driven by the same input, each with fresh noise."""
    rng = rng if rng is not None else np.random.default_rng()
    return [simulate(sys, x0, u, noise, T, rng) for x0 in x0s]


# DIAGNOSTICS
def snr_db(sys: DiscreteLtiSystem, traj: Trajectory) -> float:
    """10 log10(sum ||B u(k)||^2 / sum ||d(k)||^2)."""
    if traj.d is None:
        raise MissingDisturbance("SNR needs the recorded disturbance")
    noise_power = float(np.sum(traj.d ** 2))
    if noise_power == 0.0:
        raise ZeroNoise("disturbance is identically zero")
    signal_power = float(np.sum((traj.u @ sys.B.T) ** 2))
    return 10.0 * np.log10(signal_power / noise_power)


# RANDOM PLANTS
def random_system(rng: np.random.Generator, n: int, m: int) -> DiscreteLtiSystem:
    """Entries of A and B i.i.d. standard normal, no rescaling."""
    return DiscreteLtiSystem(rng.standard_normal((n, n)), rng.standard_normal((n, m)))


def laplacian_system() -> DiscreteLtiSystem:
    A = np.array([[1.01, 0.01, 0.0],
                  [0.01, 1.01, 0.01],
                  [0.0, 0.01, 1.01]])
    return DiscreteLtiSystem(A, np.eye(3))


# PENDULUM
@dataclass(frozen=True)
class PendulumModel:
    """Euler discretisation of an inverted pendulum, upright equilibrium at (0, 0)."""

    dt: float = 0.01
    mass: float = 1.0
    length: float = 1.0
    friction: float = 0.01
    gravity: float = 9.8

    @property
    def inertia(self) -> float:
        return self.mass * self.length ** 2

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(2)
        u = float(np.asarray(u, dtype=float).reshape(-1)[0])
        angle, rate = x
        return np.array([
            angle + self.dt * rate,
            self.dt * self.gravity / self.length * np.sin(angle)
            + (1.0 - self.dt * self.friction / self.inertia) * rate
            + self.dt / self.inertia * u,
        ])

    def linearize(self) -> DiscreteLtiSystem:
        A = np.array([[1.0, self.dt],
                      [self.dt * self.gravity / self.length, 1.0 - self.dt * self.friction / self.inertia]])
        B = np.array([[0.0], [self.dt / self.inertia]])
        return DiscreteLtiSystem(A, B)

    def closed_loop_converges(self, K, x0, horizon: int = 10000, tol: float = 1e-6) -> bool:
        """Run u = K x from x0 and report whether ||x|| drops to tol within horizon steps."""
        K = np.asarray(K, dtype=float).reshape(1, 2)
        x = np.asarray(x0, dtype=float).reshape(2)
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(horizon):
                if np.linalg.norm(x) <= tol:
                    return True
                x = self.step(x, K @ x)
                if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
                    return False
        return bool(np.linalg.norm(x) <= tol)
