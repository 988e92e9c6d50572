"""Dense linear algebra for product integrals.

Time-dependent generators are stored as :class:`PiecewiseMatrixFunction`
objects: a strictly increasing grid of breakpoints and one constant matrix per
interval.  On each interval the product integral is an ordinary matrix
exponential, and intervals are chained with the product rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import DomainError, StructuralError

DEFAULT_STEP = 1.0 / 252.0
ROW_SUM_TOL = 1e-10


def _as_matrix(a) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise StructuralError(f"expected a matrix, got array of shape {m.shape}")
    return m


@dataclass(frozen=True)
class PiecewiseMatrixFunction:
    """Matrix-valued function of time, constant on each ``[t_j, t_{j+1})``.

    ``breakpoints`` has length ``m + 1`` and may end in ``inf``; ``values``
    has shape ``(m, rows, cols)``.  Evaluation at the final finite breakpoint
    returns the last interval's matrix.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 2:
            vals = vals[None, :, :]
        if bp.ndim != 1 or bp.size < 2:
            raise StructuralError("need at least two breakpoints")
        if not np.all(np.diff(bp) > 0):
            raise DomainError("breakpoints must be strictly increasing")
        if vals.ndim != 3 or vals.shape[0] != bp.size - 1:
            raise StructuralError(
                f"{bp.size - 1} intervals but values have shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("matrix entries must be finite")
        bp.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    # construction -------------------------------------------------------

    @classmethod
    def constant(cls, matrix, start: float = 0.0, end: float = math.inf):
        return cls(np.array([start, end]), _as_matrix(matrix)[None])

    @classmethod
    def from_callable(cls, fn: Callable[[float], np.ndarray],
                      breakpoints: Sequence[float], step: float = DEFAULT_STEP):
        """Sample ``fn`` at interval midpoints of a refinement of ``breakpoints``.

        Each ``[t_j, t_{j+1}]`` is split into ``ceil(length / step)`` equal
        pieces, so the user breakpoints (jumps of ``fn``) are kept exactly.
        """
        bp = np.asarray(breakpoints, dtype=float)
        if not np.all(np.isfinite(bp)):
            raise DomainError("sampled functions need a finite horizon")
        grid = [bp[:1]]
        for lo, hi in zip(bp[:-1], bp[1:]):
            n = max(1, int(math.ceil((hi - lo) / step - 1e-9)))
            grid.append(np.linspace(lo, hi, n + 1)[1:])
        grid = np.concatenate(grid)
        mids = 0.5 * (grid[:-1] + grid[1:])
        vals = np.stack([_as_matrix(fn(x)) for x in mids])
        return cls(grid, vals)

    # basic queries ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def dim(self) -> int:
        rows, cols = self.shape
        if rows != cols:
            raise StructuralError(f"matrix function is not square: {self.shape}")
        return rows

    @property
    def start(self) -> float:
        return float(self.breakpoints[0])

    @property
    def end(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def is_constant(self) -> bool:
        return self.values.shape[0] == 1

    def interval_index(self, t: float) -> int:
        if t < self.start or t > self.end:
            raise DomainError(f"t={t} outside domain [{self.start}, {self.end}]")
        j = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return min(j, self.values.shape[0] - 1)

    def __call__(self, t: float) -> np.ndarray:
        return self.values[self.interval_index(t)]

    def pieces(self, s: float, t: float):
        """Yield ``(length, matrix)`` for the pieces covering ``[s, t]``."""
        if s > t:
            raise DomainError(f"need s <= t, got s={s}, t={t}")
        if s < self.start or t > self.end:
            raise DomainError(
                f"[{s}, {t}] outside domain [{self.start}, {self.end}]")
        if s == t:
            return
        bp = self.breakpoints
        j0 = int(np.searchsorted(bp, s, side="right")) - 1
        j1 = int(np.searchsorted(bp, t, side="left")) - 1
        for j in range(j0, j1 + 1):
            lo = max(bp[j], s)
            hi = min(bp[j + 1], t)
            if hi > lo:
                yield hi - lo, self.values[j]

    # algebra ------------------------------------------------------------

    def refine(self, grid: np.ndarray) -> "PiecewiseMatrixFunction":
        """Re-express on ``grid``, which must contain this function's breakpoints
        that fall inside it."""
        mids = 0.5 * (grid[:-1] + grid[1:])
        finite = np.where(np.isinf(grid[1:]), grid[:-1] + 1.0, mids)
        idx = np.searchsorted(self.breakpoints, finite, side="right") - 1
        idx = np.clip(idx, 0, self.values.shape[0] - 1)
        return PiecewiseMatrixFunction(grid, self.values[idx])

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "PiecewiseMatrixFunction":
        return PiecewiseMatrixFunction(
            self.breakpoints, np.stack([_as_matrix(fn(v)) for v in self.values]))

    def shift(self, t: float) -> "PiecewiseMatrixFunction":
        """The function ``x -> F(x + t)`` on ``[0, end - t]``."""
        if t < self.start or t >= self.end:
            raise DomainError(f"shift {t} outside domain")
        bp = self.breakpoints
        j = self.interval_index(t)
        new_bp = np.concatenate([[t], bp[j + 1:]]) - t
        return PiecewiseMatrixFunction(new_bp, self.values[j:])

    def __add__(self, other):
        return combine(np.add, self, other)

    def __radd__(self, other):
        return combine(np.add, other, self)

    def __sub__(self, other):
        return combine(np.subtract, self, other)

    def __rsub__(self, other):
        return combine(np.subtract, other, self)

    def __neg__(self):
        return PiecewiseMatrixFunction(self.breakpoints, -self.values)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return PiecewiseMatrixFunction(self.breakpoints, self.values * float(scalar))

    __rmul__ = __mul__


def as_piecewise(x) -> PiecewiseMatrixFunction:
    if isinstance(x, PiecewiseMatrixFunction):
        return x
    return PiecewiseMatrixFunction.constant(x)


def common_grid(*funcs: PiecewiseMatrixFunction) -> np.ndarray:
    start = max(f.start for f in funcs)
    end = min(f.end for f in funcs)
    if not start < end:
        raise DomainError("matrix functions have disjoint domains")
    grid = np.unique(np.concatenate([f.breakpoints for f in funcs]))
    return grid[(grid >= start) & (grid <= end)]


def align(*args):
    """Common grid and stacked per-interval values of several functions."""
    funcs = [as_piecewise(a) for a in args]
    if all(np.array_equal(f.breakpoints, funcs[0].breakpoints) for f in funcs):
        return funcs[0].breakpoints, [f.values for f in funcs]
    grid = common_grid(*funcs)
    return grid, [f.refine(grid).values for f in funcs]


def combine(fn, *args) -> PiecewiseMatrixFunction:
    """Apply ``fn`` interval-wise to the aligned values of several functions.

    Plain arrays are treated as constant functions.
    """
    grid, aligned = align(*args)
    vals = np.stack([_as_matrix(fn(*vs)) for vs in zip(*aligned)])
    return PiecewiseMatrixFunction(grid, vals)


# ---------------------------------------------------------------------------
# exponentials and product integrals


def expm(a) -> np.ndarray:
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise StructuralError(f"expm needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("expm of a matrix with non-finite entries")
    return scipy.linalg.expm(a)


def expm_action(a: np.ndarray, v: np.ndarray, tol: float = 1e-16) -> np.ndarray:
    """Compute ``expm(a) @ v`` by a scaled Taylor series (no dense exponential).

    Cheap when ``v`` has few columns compared with the dimension of ``a``.
    """
    norm = np.abs(a).sum(axis=0).max()
    steps = max(1, int(math.ceil(norm / 0.5)))
    a = a / steps
    out = np.array(v, dtype=float)
    for _ in range(steps):
        term = out
        acc = out.copy()
        scale = max(np.abs(acc).max(), 1e-300)
        for k in range(1, 60):
            term = a @ term / k
            acc += term
            if np.abs(term).max() <= tol * scale:
                break
        out = acc
    return out


def prod_integral(F, s: float, t: float) -> np.ndarray:
    """``prod_s^t (I + F(x) dx)`` for ``s <= t``."""
    F = as_piecewise(F)
    n = F.dim
    out = np.eye(n)
    for length, m in F.pieces(s, t):
        out = out @ expm(m * length)
    return out


def prod_integral_inverse(F, s: float, t: float) -> np.ndarray:
    """``prod_t^s (I + F(x) dx)``, the inverse of :func:`prod_integral`."""
    F = as_piecewise(F)
    out = np.eye(F.dim)
    for length, m in F.pieces(s, t):
        out = expm(-m * length) @ out
    return out


def prod_integral_apply(F, s: float, t: float, v: np.ndarray) -> np.ndarray:
    """``prod_s^t (I + F(x) dx) @ v`` evaluated right to left.

    Uses :func:`expm_action`, so only matrix-vector products are formed.
    """
    F = as_piecewise(F)
    out = np.array(v, dtype=float)
    for length, m in reversed(list(F.pieces(s, t))):
        out = expm_action(m * length, out)
    return out


def block_upper(blocks) -> np.ndarray:
    """Assemble a block matrix from a nested list where ``None`` means zero."""
    nrow = len(blocks)
    heights = [None] * nrow
    widths = [None] * len(blocks[0])
    for i, row in enumerate(blocks):
        for j, b in enumerate(row):
            if b is not None:
                b = _as_matrix(b)
                heights[i] = heights[i] or b.shape[0]
                widths[j] = widths[j] or b.shape[1]
                if b.shape != (heights[i], widths[j]):
                    raise StructuralError(f"block ({i},{j}) has shape {b.shape}")
    if None in heights or None in widths:
        raise StructuralError("every block row/column needs a non-empty block")
    return np.block([[(_as_matrix(b) if b is not None else np.zeros((h, w)))
                      for b, w in zip(row, widths)]
                     for row, h in zip(blocks, heights)])


def van_loan(A, B, C, s: float, t: float):
    """Blocks of the product integral of ``[[A, B], [0, C]]`` over ``[s, t]``.

    Returns ``(UL, UR, LR)`` where ``UR`` is
    ``int_s^t prod_s^x(I + A du) B(x) prod_x^t(I + C du) dx``.
    """
    A, B, C = as_piecewise(A), as_piecewise(B), as_piecewise(C)
    n, m = A.dim, C.dim
    if B.shape != (n, m):
        raise StructuralError(
            f"B has shape {B.shape}, expected {(n, m)} for A {n}x{n} and C {m}x{m}")
    G = combine(lambda a, b, c: np.block([[a, b], [np.zeros((m, n)), c]]), A, B, C)
    P = prod_integral(G, s, t)
    return P[:n, :n], P[:n, n:], P[n:, n:]


# ---------------------------------------------------------------------------
# Kronecker algebra and structural checks


def kron(a, b) -> np.ndarray:
    return np.kron(_as_matrix(a), _as_matrix(b))


def kron_sum(a, b) -> np.ndarray:
    """``A (+) B = A (x) I_b + I_a (x) B`` for square ``A`` (q x q) and ``B`` (p x p)."""
    a, b = _as_matrix(a), _as_matrix(b)
    return np.kron(a, np.eye(b.shape[0])) + np.kron(np.eye(a.shape[0]), b)


def delta(v) -> np.ndarray:
    """Diagonal matrix with ``v`` on the diagonal."""
    return np.diag(np.ravel(np.asarray(v, dtype=float)))


def check_intensity(m, sub: bool = False, tol: float = ROW_SUM_TOL, name: str = "matrix"):
    """Raise :class:`DomainError` unless ``m`` is a (sub-)intensity matrix."""
    mats = m.values if isinstance(m, PiecewiseMatrixFunction) else [_as_matrix(m)]
    for k, a in enumerate(mats):
        if a.shape[0] != a.shape[1]:
            raise StructuralError(f"{name} is not square")
        off = a - np.diag(np.diag(a))
        if off.min() < 0:
            raise DomainError(f"{name} has negative off-diagonal entries (piece {k})")
        rows = a.sum(axis=1)
        bad = rows > tol if sub else np.abs(rows) > tol
        if np.any(bad):
            kind = "sub-intensity" if sub else "intensity"
            raise DomainError(
                f"{name} is not an {kind} matrix on piece {k}: row sums {rows}")
