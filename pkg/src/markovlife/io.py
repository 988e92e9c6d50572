"""File formats: bond curves (CSV), rate models and products (JSON), run manifests."""
from __future__ import annotations

import ast
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .bondmarket import BondCurve, ShortRateModel
from .errors import DomainError
from .lifeval import PaymentSpec
from .matrixcore import DEFAULT_STEP, PiecewiseMatrixFunction


class InputError(DomainError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path, self.line = path, line


def fmt(x: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# curves


def read_curve_csv(path) -> BondCurve:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError("empty file", path, 1)
    header = [h.strip().lower() for h in rows[0]]
    if header[:2] != ["maturity", "price"] or header[2:] not in ([], ["forward"]):
        raise InputError("header must be maturity,price[,forward]", path, 1)
    T, P, F = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise InputError(f"non-numeric field in {row}", path, lineno) from None
        T.append(vals[0])
        P.append(vals[1])
        if len(vals) == 3:
            F.append(vals[2])
    if not T:
        raise InputError("no data rows", path, 2)
    try:
        return BondCurve(np.array(T), np.array(P), np.array(F) if F else None)
    except DomainError as exc:
        raise InputError(str(exc), path) from None


def write_curve_csv(path, curve: BondCurve, extra: Optional[dict] = None) -> None:
    cols = {"maturity": curve.maturities, "price": curve.prices}
    if curve.forwards is not None:
        cols["forward"] = curve.forwards
    cols.update(extra or {})
    write_columns(path, cols)


def write_columns(path, cols: dict) -> None:
    names = list(cols)
    data = [np.asarray(cols[n], dtype=float) for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([fmt(v) for v in row])


# ---------------------------------------------------------------------------
# rate models


def _bp_out(bp):
    return [None if math.isinf(b) else float(b) for b in bp]


def _bp_in(bp):
    return np.array([math.inf if b is None else float(b) for b in bp])


def model_to_dict(m: ShortRateModel) -> dict:
    L, r = m.intensity, m.rates
    if not np.array_equal(L.breakpoints, r.breakpoints):
        from .matrixcore import align
        grid, (Lv, rv) = align(L, r)
        L, r = PiecewiseMatrixFunction(grid, Lv), PiecewiseMatrixFunction(grid, rv)
    out = {"p": m.p, "rho": m.rho, "pi": m.pi.tolist()}
    if L.is_constant and math.isinf(L.end) and L.start == 0:
        out["intensity"] = L.values[0].tolist()
        out["rates"] = r.values[0, 0].tolist()
    else:
        out["breakpoints"] = _bp_out(L.breakpoints)
        out["intensity"] = L.values.tolist()
        out["rates"] = r.values[:, 0, :].tolist()
    return out


def model_from_dict(d: dict) -> ShortRateModel:
    try:
        p = int(d["p"])
        L = np.asarray(d["intensity"], dtype=float)
        r = np.asarray(d["rates"], dtype=float)
        pi = np.asarray(d.get("pi", np.eye(p)[0]), dtype=float)
        rho = float(d.get("rho", 0.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad model description: {exc}") from None
    if L.ndim == 2:
        L, r = L[None], r.reshape(1, -1)
    bp = _bp_in(d.get("breakpoints", [0.0, None]))
    if L.shape[1:] != (p, p) or r.shape[1:] != (p,) or bp.size != L.shape[0] + 1:
        raise InputError(f"model arrays do not match p={p} and its breakpoints")
    return ShortRateModel(PiecewiseMatrixFunction(bp, L),
                          PiecewiseMatrixFunction(bp, r[:, None, :]), pi, rho)


def read_model_json(path) -> ShortRateModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    try:
        return model_from_dict(d)
    except InputError as exc:
        raise InputError(str(exc), path) from None


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# safe expressions for products

_ALLOWED = (ast.Expression, ast.Constant, ast.Name, ast.Load, ast.BinOp, ast.UnaryOp,
            ast.Compare, ast.Call, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow,
            ast.USub, ast.UAdd, ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq)
_FUNCS = {"exp": math.exp, "log": math.log, "sqrt": math.sqrt, "abs": abs,
          "min": min, "max": max, "log10": math.log10}
_CONSTS = {"e": math.e, "pi": math.pi}


def compile_expr(text: str) -> Callable[..., float]:
    """Compile an arithmetic expression in ``s`` (contract time) and ``theta``.

    Comparisons evaluate to 0/1 so indicators can be written as ``(s <= 25)``.
    The syntax tree is checked against a whitelist of arithmetic, comparisons
    and a few math functions before it is compiled.
    """
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise InputError(f"cannot parse expression {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise InputError(f"unsupported construct in expression {text!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise InputError(f"only numeric constants allowed in {text!r}")
        if isinstance(node, ast.Call) and (not isinstance(node.func, ast.Name)
                                           or node.func.id not in _FUNCS or node.keywords):
            raise InputError(f"unsupported function call in {text!r}")
        if isinstance(node, ast.Name) and node.id not in _FUNCS and \
                node.id not in _CONSTS and node.id not in ("s", "theta"):
            raise InputError(f"unknown name {node.id!r} in {text!r}")
    code = compile(tree, "<expr>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def f(s, theta=0.0):
        try:
            return float(eval(code, env, {"s": float(s), "theta": float(theta)}))
        except (ArithmeticError, ValueError, TypeError) as exc:
            raise InputError(f"evaluating {text!r} at s={s}: {exc}") from None

    return f


@dataclass
class ProductSpec:
    """Biometric part of a contract: states, intensities and payments on ``E_b``."""

    states: list
    horizon: float
    start: int
    intensity: PiecewiseMatrixFunction
    payments: PaymentSpec
    raw: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return len(self.states)


def product_from_dict(d: dict, step: Optional[float] = None) -> ProductSpec:
    try:
        states = list(d["states"])
        horizon = float(d["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad product description: {exc}") from None
    q = len(states)
    pos = {name: i for i, name in enumerate(states)}

    def sidx(name):
        if name not in pos:
            raise InputError(f"unknown state {name!r}; states are {states}")
        return pos[name]

    step = float(d.get("step", DEFAULT_STEP)) if step is None else step
    bps = {0.0, horizon} | {float(b) for b in d.get("breakpoints", [])}
    trans = [(sidx(t["from"]), sidx(t["to"]), compile_expr(t["rate"]))
             for t in d.get("transitions", [])]
    blocks = []
    for blk in d.get("payments", []):
        lo, hi = (float(v) for v in blk.get("interval", [0.0, horizon]))
        bps |= {lo, hi}
        rates = {sidx(k): compile_expr(v) for k, v in blk.get("rates", {}).items()}
        lumps = [(sidx(l["from"]), sidx(l["to"]), compile_expr(l["amount"]),
                  compile_expr(l.get("trigger", "1")))
                 for l in blk.get("lumps", [])]
        blocks.append((lo, hi, rates, lumps))
    bps = sorted(b for b in bps if 0 <= b <= horizon)

    def block_at(s):
        return [bl for bl in blocks if bl[0] <= s < bl[1] or (s == horizon == bl[1])]

    def intensity(s):
        L = np.zeros((q, q))
        for i, j, f in trans:
            if i == j:
                raise InputError("transitions must change state")
            L[i, j] += f(s)
        if L.min() < 0:
            raise InputError(f"negative transition rate at s={s}")
        np.fill_diagonal(L, -L.sum(axis=1))
        return L

    def pay_parts(s, theta):
        b = np.zeros((1, q))
        B = np.zeros((q, q))
        L1 = np.zeros((q, q))
        L = None
        for _, _, rates, lumps in block_at(s):
            for i, f in rates.items():
                b[0, i] += f(s, theta)
            for i, j, amt, trig in lumps:
                L = intensity(s) if L is None else L
                B[i, j] += amt(s, theta)
                L1[i, j] = trig(s) * (L[i, j] if i != j else 1.0)
        return b, B, L1

    L = PiecewiseMatrixFunction.from_callable(intensity, bps, step)
    grid = L.breakpoints
    mids = 0.5 * (grid[:-1] + grid[1:])
    parts = [[pay_parts(s, th) for s in mids] for th in (0.0, 1.0, 2.0)]
    stack = [[np.stack([p[k] for p in ps]) for k in range(3)] for ps in parts]
    (b0, B0, L1), (b1, B1, _), (b2, B2, _) = stack
    if np.abs(b2 - 2 * b1 + b0).max() > 1e-9 or np.abs(B2 - 2 * B1 + B0).max() > 1e-9:
        raise InputError("payments must be affine in theta")
    has_lumps = np.any(L1) and (np.any(B0) or np.any(B1 - B0))
    pw = lambda v: PiecewiseMatrixFunction(grid, v)
    pay = PaymentSpec(pw(b0), pw(B0) if has_lumps else None, pw(L1) if has_lumps else None,
                      pw(b1 - b0) if np.any(b1 - b0) else None,
                      pw(B1 - B0) if has_lumps and np.any(B1 - B0) else None)
    start = sidx(d.get("start", states[0]))
    return ProductSpec(states, horizon, start, L, pay, d)


def read_product_json(path, step: Optional[float] = None) -> ProductSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    try:
        return product_from_dict(d, step)
    except InputError as exc:
        raise InputError(str(exc), path) from None


# ---------------------------------------------------------------------------
# run manifests


@dataclass
class RunManifest:
    subcommand: str
    inputs: dict
    config: dict
    seed: Optional[int]
    version: str
    outputs: list = field(default_factory=list)
    argv: list = field(default_factory=lambda: list(sys.argv[1:]))

    def write(self, path) -> None:
        write_json(path, asdict(self))


def tool_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:  # not installed as a distribution
        return "0.1.0"


def data_path(name: str) -> Path:
    """Path of a bundled data file."""
    return Path(__file__).resolve().parent / "data" / name
