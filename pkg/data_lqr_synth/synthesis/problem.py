"""
Solver-agnostic description of the synthesis SDPs.

A problem is a set of named matrix variables, block matrices required to be
positive semidefinite, affine equalities and a linear objective made of
weighted traces. Every block entry is an ``AffineExpr``: a constant plus a
sum of terms ``left @ V @ right`` (or ``left @ V' @ right``) in one variable.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class SynthesisError(Exception):
    pass


class MalformedProblem(SynthesisError):
    pass


@dataclass(frozen=True)
class MatrixVariable:
    name: str
    shape: Tuple[int, int]
    symmetric: bool = False

    def __post_init__(self):
        if self.symmetric and self.shape[0] != self.shape[1]:
            raise MalformedProblem(f"symmetric variable {self.name} must be square, got {self.shape}")

    @property
    def size(self) -> int:
        """Number of scalar coordinates (upper triangle for symmetric variables)."""
        rows, cols = self.shape
        return rows * (rows + 1) // 2 if self.symmetric else rows * cols

    def coordinates(self):
        rows, cols = self.shape
        if self.symmetric:
            return [(i, j) for i in range(rows) for j in range(i, rows)]
        return [(i, j) for i in range(rows) for j in range(cols)]

    def basis(self, i: int, j: int) -> np.ndarray:
        E = np.zeros(self.shape)
        E[i, j] = 1.0
        if self.symmetric:
            E[j, i] = 1.0
        return E


@dataclass(frozen=True)
class Term:
    variable: MatrixVariable
    left: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None
    transpose: bool = False

    @property
    def shape(self) -> Tuple[int, int]:
        rows, cols = self.variable.shape
        if self.transpose:
            rows, cols = cols, rows
        if self.left is not None:
            rows = self.left.shape[0]
        if self.right is not None:
            cols = self.right.shape[1]
        return rows, cols

    def evaluate(self, value: np.ndarray) -> np.ndarray:
        out = value.T if self.transpose else value
        if self.left is not None:
            out = self.left @ out
        if self.right is not None:
            out = out @ self.right
        return out


def _matrix(value) -> np.ndarray:
    return np.array(value, dtype=float, ndmin=2)


class AffineExpr:
    """Constant plus a sum of ``Term`` objects, all of one shape."""

    # let numpy hand ``ndarray @ expr`` over to __rmatmul__
    __array_ufunc__ = None

    def __init__(self, shape, terms: Sequence[Term] = (), constant: Optional[np.ndarray] = None):
        self.shape = (int(shape[0]), int(shape[1]))
        self.terms = tuple(terms)
        self.constant = None if constant is None else _matrix(constant)
        if self.constant is not None and self.constant.shape != self.shape:
            raise MalformedProblem(f"constant of shape {self.constant.shape} in expression of shape {self.shape}")
        for term in self.terms:
            if term.shape != self.shape:
                raise MalformedProblem(f"term on {term.variable.name} has shape {term.shape}, expected {self.shape}")

    @classmethod
    def of(cls, variable: MatrixVariable) -> "AffineExpr":
        return cls(variable.shape, [Term(variable)])

    @classmethod
    def const(cls, value) -> "AffineExpr":
        value = _matrix(value)
        return cls(value.shape, constant=value)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "AffineExpr":
        return cls((rows, cols))

    @property
    def variables(self) -> List[MatrixVariable]:
        seen = {}
        for term in self.terms:
            seen.setdefault(term.variable.name, term.variable)
        return list(seen.values())

    @property
    def T(self) -> "AffineExpr":
        terms = [Term(t.variable,
                      left=None if t.right is None else t.right.T,
                      right=None if t.left is None else t.left.T,
                      transpose=not t.transpose) for t in self.terms]
        constant = None if self.constant is None else self.constant.T
        return AffineExpr((self.shape[1], self.shape[0]), terms, constant)

    def _coerce(self, other) -> "AffineExpr":
        if isinstance(other, AffineExpr):
            return other
        other = _matrix(other)
        if other.shape == (1, 1) and self.shape != (1, 1):
            other = other[0, 0] * np.ones(self.shape)
        return AffineExpr.const(other)

    def __add__(self, other) -> "AffineExpr":
        other = self._coerce(other)
        if other.shape != self.shape:
            raise MalformedProblem(f"cannot add shapes {self.shape} and {other.shape}")
        if self.constant is None:
            constant = other.constant
        elif other.constant is None:
            constant = self.constant
        else:
            constant = self.constant + other.constant
        return AffineExpr(self.shape, self.terms + other.terms, constant)

    __radd__ = __add__

    def __neg__(self) -> "AffineExpr":
        return self * -1.0

    def __sub__(self, other) -> "AffineExpr":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "AffineExpr":
        return self._coerce(other) + (-self)

    def __mul__(self, scalar) -> "AffineExpr":
        scalar = float(scalar)
        terms = [Term(t.variable,
                      left=scalar * (np.eye(t.shape[0]) if t.left is None else t.left),
                      right=t.right, transpose=t.transpose) for t in self.terms]
        constant = None if self.constant is None else scalar * self.constant
        return AffineExpr(self.shape, terms, constant)

    __rmul__ = __mul__

    def __matmul__(self, mtx) -> "AffineExpr":
        mtx = _matrix(mtx)
        if mtx.shape[0] != self.shape[1]:
            raise MalformedProblem(f"cannot multiply {self.shape} by {mtx.shape}")
        terms = [Term(t.variable, left=t.left, right=mtx if t.right is None else t.right @ mtx,
                      transpose=t.transpose) for t in self.terms]
        constant = None if self.constant is None else self.constant @ mtx
        return AffineExpr((self.shape[0], mtx.shape[1]), terms, constant)

    def __rmatmul__(self, mtx) -> "AffineExpr":
        mtx = _matrix(mtx)
        if mtx.shape[1] != self.shape[0]:
            raise MalformedProblem(f"cannot multiply {mtx.shape} by {self.shape}")
        terms = [Term(t.variable, left=mtx if t.left is None else mtx @ t.left, right=t.right,
                      transpose=t.transpose) for t in self.terms]
        constant = None if self.constant is None else mtx @ self.constant
        return AffineExpr((mtx.shape[0], self.shape[1]), terms, constant)

    def evaluate(self, values: Mapping[str, np.ndarray], include_constant: bool = True) -> np.ndarray:
        out = np.zeros(self.shape)
        if include_constant and self.constant is not None:
            out = out + self.constant
        for term in self.terms:
            out = out + term.evaluate(np.asarray(values[term.variable.name], dtype=float))
        return out

    def __repr__(self):
        names = ", ".join(v.name for v in self.variables) or "const"
        return f"AffineExpr(shape={self.shape}, vars=[{names}])"


@dataclass
class PsdConstraint:
    """
    Symmetric block matrix required to be positive semidefinite.

    ``blocks[i][j]`` for j >= i holds block (i, j); the lower triangle is
    its transpose. ``None`` stands for a zero block.
    """

    name: str
    sizes: Tuple[int, ...]
    blocks: List[List[Optional[AffineExpr]]]

    def __post_init__(self):
        k = len(self.sizes)
        if len(self.blocks) != k or any(len(row) != k - i for i, row in enumerate(self.blocks)):
            raise MalformedProblem(f"{self.name}: blocks must list the upper triangle of a {k}x{k} grid")
        for i, row in enumerate(self.blocks):
            for offset, block in enumerate(row):
                j = i + offset
                if block is not None and block.shape != (self.sizes[i], self.sizes[j]):
                    raise MalformedProblem(
                        f"{self.name}: block ({i}, {j}) has shape {block.shape}, "
                        f"expected {(self.sizes[i], self.sizes[j])}")

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def block(self, i: int, j: int) -> Optional[AffineExpr]:
        if j >= i:
            return self.blocks[i][j - i]
        upper = self.blocks[j][i - j]
        return None if upper is None else upper.T

    def assemble(self, values: Mapping[str, np.ndarray], include_constant: bool = True) -> np.ndarray:
        offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        out = np.zeros((self.dim, self.dim))
        for i in range(len(self.sizes)):
            for j in range(i, len(self.sizes)):
                block = self.block(i, j)
                if block is None:
                    continue
                value = block.evaluate(values, include_constant)
                out[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = value
                if i != j:
                    out[offsets[j]:offsets[j + 1], offsets[i]:offsets[i + 1]] = value.T
        # diagonal blocks may be non-symmetric expressions with a symmetric value at feasibility
        return 0.5 * (out + out.T)

    @property
    def variables(self) -> List[MatrixVariable]:
        seen = {}
        for row in self.blocks:
            for block in row:
                if block is not None:
                    for var in block.variables:
                        seen.setdefault(var.name, var)
        return list(seen.values())


@dataclass
class EqualityConstraint:
    name: str
    expr: AffineExpr


@dataclass
class ObjectiveTerm:
    """scale * trace(weight @ variable); identity weight when omitted."""

    variable: MatrixVariable
    scale: float = 1.0
    weight: Optional[np.ndarray] = None

    def evaluate(self, values: Mapping[str, np.ndarray]) -> float:
        value = np.asarray(values[self.variable.name], dtype=float)
        if self.weight is not None:
            value = self.weight @ value
        return float(self.scale * np.trace(value))


@dataclass
class SdpProblem:
    name: str
    variables: Dict[str, MatrixVariable] = field(default_factory=dict)
    psd_constraints: List[PsdConstraint] = field(default_factory=list)
    equality_constraints: List[EqualityConstraint] = field(default_factory=list)
    objective: List[ObjectiveTerm] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)

    # BUILD FUNCS
    def add_variable(self, name: str, shape, symmetric: bool = False) -> AffineExpr:
        if name in self.variables:
            raise MalformedProblem(f"variable {name} declared twice")
        var = MatrixVariable(name, (int(shape[0]), int(shape[1])), symmetric)
        self.variables[name] = var
        return AffineExpr.of(var)

    def variable(self, name: str) -> MatrixVariable:
        try:
            return self.variables[name]
        except KeyError:
            raise MalformedProblem(f"unknown variable {name}") from None

    def add_psd(self, name: str, blocks: List[List[Optional[AffineExpr]]], sizes=None):
        if sizes is None:
            sizes = tuple(row[0].shape[0] for row in blocks)
        constraint = PsdConstraint(name, tuple(int(s) for s in sizes), blocks)
        self._check_declared(constraint.variables, name)
        self.psd_constraints.append(constraint)
        return constraint

    def add_equality(self, name: str, expr: AffineExpr):
        self._check_declared(expr.variables, name)
        self.equality_constraints.append(EqualityConstraint(name, expr))

    def minimize_trace(self, name: str, scale: float = 1.0, weight=None):
        weight = None if weight is None else _matrix(weight)
        self.objective.append(ObjectiveTerm(self.variable(name), float(scale), weight))

    def _check_declared(self, variables, where):
        for var in variables:
            if self.variables.get(var.name) is not var:
                raise MalformedProblem(f"{where} references undeclared variable {var.name}")

    # EVAL FUNCS
    def objective_value(self, values: Mapping[str, np.ndarray]) -> float:
        return float(sum(term.evaluate(values) for term in self.objective))

    def zero_values(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros(var.shape) for name, var in self.variables.items()}

    def coordinate_index(self):
        """[(variable, i, j)] in the global scalar ordering used by the sparse format."""
        index = []
        for var in self.variables.values():
            index.extend((var, i, j) for i, j in var.coordinates())
        return index

    def to_sparse_text(self) -> str:
        """
        Sparse text form of the problem.

        Layout (1-based indices, ``repr`` floats):
            sdp-sparse 1
            name <name>
            var <name> <rows> <cols> <sym|full> <first coordinate>
            coords <N>
            c <k> <value>                       objective coefficient of coordinate k
            psd <p> <name> <dim>
            f <p> <k> <i> <j> <value>           entry (i <= j) of F_k, k = 0 is the constant
            eq <e> <name> <rows> <cols>
            a <e> <k> <i> <j> <value>           entry of A_k, k = 0 is the constant
        Block p reads F_0 + sum_k x_k F_k >= 0 and equality e reads A_0 + sum_k x_k A_k = 0.
        """
        index = self.coordinate_index()
        lines = ["sdp-sparse 1", f"name {self.name}"]
        first = 1
        for var in self.variables.values():
            lines.append(f"var {var.name} {var.shape[0]} {var.shape[1]} "
                         f"{'sym' if var.symmetric else 'full'} {first}")
            first += var.size
        lines.append(f"coords {len(index)}")

        zero = self.zero_values()
        for k, (var, i, j) in enumerate(index, start=1):
            values = dict(zero)
            values[var.name] = var.basis(i, j)
            coefficient = self.objective_value(values)
            if coefficient != 0.0:
                lines.append(f"c {k} {coefficient!r}")

        for p, constraint in enumerate(self.psd_constraints, start=1):
            lines.append(f"psd {p} {constraint.name} {constraint.dim}")
            relevant = {v.name for v in constraint.variables}
            mats = [(0, constraint.assemble(zero))]
            for k, (var, i, j) in enumerate(index, start=1):
                if var.name not in relevant:
                    continue
                values = dict(zero)
                values[var.name] = var.basis(i, j)
                mats.append((k, constraint.assemble(values, include_constant=False)))
            for k, F in mats:
                rows, cols = np.nonzero(np.triu(F))
                for r, c in zip(rows, cols):
                    lines.append(f"f {p} {k} {r + 1} {c + 1} {float(F[r, c])!r}")

        for e, constraint in enumerate(self.equality_constraints, start=1):
            expr = constraint.expr
            lines.append(f"eq {e} {constraint.name} {expr.shape[0]} {expr.shape[1]}")
            relevant = {v.name for v in expr.variables}
            mats = [(0, expr.evaluate(zero))]
            for k, (var, i, j) in enumerate(index, start=1):
                if var.name not in relevant:
                    continue
                values = dict(zero)
                values[var.name] = var.basis(i, j)
                mats.append((k, expr.evaluate(values, include_constant=False)))
            for k, A in mats:
                rows, cols = np.nonzero(A)
                for r, c in zip(rows, cols):
                    lines.append(f"a {e} {k} {r + 1} {c + 1} {float(A[r, c])!r}")
        return "\n".join(lines) + "\n"

    def write_sparse(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_sparse_text(), encoding="utf-8")
        return path
