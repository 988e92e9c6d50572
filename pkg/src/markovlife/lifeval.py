"""Multi-state life insurance valuation under Markovian interest.

The combined state space is ``E_b x E_r`` in lexicographic order: biometric
state ``i`` and rate state ``j`` (both 0-based) map to ``i * p + j``.

Everything on the combined space is a :class:`PiecewiseMatrixFunction`.
Payment rates and interest rates are ``1 x n`` functions, matrices are
``n x n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .bondmarket import ShortRateModel
from .errors import (ConvergenceError, DomainError, NoPremiumSensitivity,
                     NumericError, StructuralError)
from .matrixcore import (DEFAULT_STEP, PiecewiseMatrixFunction, align, as_piecewise,
                         check_intensity, common_grid, prod_integral, van_loan)

StateLike = Union[int, tuple, np.ndarray, Sequence[float]]


def _row(v) -> PiecewiseMatrixFunction:
    if isinstance(v, PiecewiseMatrixFunction):
        return v
    return PiecewiseMatrixFunction.constant(np.asarray(v, dtype=float).reshape(1, -1))


def _diag_stack(rows: np.ndarray) -> np.ndarray:
    """``(m, 1, n)`` stack of row vectors -> ``(m, n, n)`` stack of diagonals."""
    m, _, n = rows.shape
    out = np.zeros((m, n, n))
    idx = np.arange(n)
    out[:, idx, idx] = rows[:, 0, :]
    return out


def _kron_stack(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, r1, c1 = a.shape
    _, r2, c2 = b.shape
    return np.einsum("mij,mkl->mikjl", a, b).reshape(m, r1 * r2, c1 * c2)


@dataclass(frozen=True)
class PaymentSpec:
    """Payment stream ``b(t; theta)``, ``B(t; theta)`` and the lump trigger intensity.

    The premium parameter enters affinely: ``b = rates + theta * rates_theta``
    and likewise for lumps.  ``lump_intensity`` is the part of the intensity
    that triggers lump sums; its diagonal gives Poisson lumps paid while
    staying in a state.
    """

    rates: PiecewiseMatrixFunction
    lumps: Optional[PiecewiseMatrixFunction] = None
    lump_intensity: Optional[PiecewiseMatrixFunction] = None
    rates_theta: Optional[PiecewiseMatrixFunction] = None
    lumps_theta: Optional[PiecewiseMatrixFunction] = None

    def __post_init__(self):
        object.__setattr__(self, "rates", _row(self.rates))
        n = self.n
        for name in ("lumps", "lump_intensity", "lumps_theta"):
            v = getattr(self, name)
            if v is not None:
                v = as_piecewise(v)
                if v.shape != (n, n):
                    raise StructuralError(f"{name} is {v.shape}, expected {(n, n)}")
                object.__setattr__(self, name, v)
        if self.rates_theta is not None:
            rt = _row(self.rates_theta)
            if rt.shape != (1, n):
                raise StructuralError("rates_theta does not match rates")
            object.__setattr__(self, "rates_theta", rt)
        if self.lump_intensity is not None and self.lump_intensity.values.min() < 0:
            raise DomainError("lump-trigger intensity must be nonnegative")

    @property
    def n(self) -> int:
        return self.rates.shape[1]

    @property
    def has_theta(self) -> bool:
        return self.rates_theta is not None or self.lumps_theta is not None

    @property
    def has_lumps(self) -> bool:
        return self.lumps is not None and self.lump_intensity is not None

    def at(self, theta: float) -> "PaymentSpec":
        """Payments with the premium parameter fixed at ``theta``."""
        b = self.rates
        if self.rates_theta is not None:
            b = b + self.rates_theta * theta
        B = self.lumps
        if self.lumps_theta is not None:
            B = self.lumps_theta * theta if B is None else B + self.lumps_theta * theta
        return PaymentSpec(b, B, self.lump_intensity)

    def derivative(self) -> "PaymentSpec":
        """The payment stream ``d/dtheta`` (zero where ``theta`` does not enter)."""
        zero = PiecewiseMatrixFunction.constant(np.zeros((1, self.n)))
        return PaymentSpec(self.rates_theta if self.rates_theta is not None else zero,
                           self.lumps_theta, self.lump_intensity)


@dataclass(frozen=True)
class RewardMatrices:
    """``R = L1 * B + Delta(b)`` and ``C^(k) = L1 * B^k`` (entrywise powers)."""

    R: PiecewiseMatrixFunction
    C: dict = field(default_factory=dict)

    def reduced(self, k: int) -> Optional[PiecewiseMatrixFunction]:
        c = self.C.get(k)
        return None if c is None else c * (1.0 / math.factorial(k))


def reward_matrices(pay: PaymentSpec, k_max: int = 1) -> RewardMatrices:
    if pay.has_lumps:
        grid, (b, B, L1) = align(pay.rates, pay.lumps, pay.lump_intensity)
        R = PiecewiseMatrixFunction(grid, L1 * B + _diag_stack(b))
        C = {k: PiecewiseMatrixFunction(grid, L1 * B ** k) for k in range(2, k_max + 1)}
        C = {k: c for k, c in C.items() if np.any(c.values)}
        return RewardMatrices(R, C)
    R = PiecewiseMatrixFunction(pay.rates.breakpoints, _diag_stack(pay.rates.values))
    return RewardMatrices(R, {})


@dataclass(frozen=True)
class ProductModel:
    """Insurance contract on the combined biometric x rate state space."""

    intensity: PiecewiseMatrixFunction
    rates: PiecewiseMatrixFunction
    payments: PaymentSpec
    horizon: float
    q: int = 1
    p: int = 1
    rate_pi: Optional[np.ndarray] = None

    def __post_init__(self):
        L = as_piecewise(self.intensity)
        r = _row(self.rates)
        n = L.dim
        if r.shape != (1, n) or self.payments.n != n:
            raise StructuralError(
                f"intensity is {n}x{n} but rates have {r.shape[1]} and payments "
                f"{self.payments.n} states")
        if self.q * self.p != n:
            raise StructuralError(f"q*p = {self.q * self.p} does not match {n} states")
        check_intensity(L, name="combined intensity")
        if not (self.horizon > 0 and self.horizon <= L.end and L.start <= 0):
            raise DomainError(f"horizon {self.horizon} outside the model domain")
        if self.payments.lump_intensity is not None:
            grid, (Lv, L1) = align(L, self.payments.lump_intensity)
            off = L1.copy()
            idx = np.arange(n)
            off[:, idx, idx] = 0.0
            Loff = Lv.copy()
            Loff[:, idx, idx] = 0.0
            if np.any(off > Loff + 1e-10):
                raise DomainError("lump-trigger intensity exceeds the transition intensity")
        pi = np.eye(self.p)[0] if self.rate_pi is None else np.asarray(self.rate_pi, float).ravel()
        if pi.size != self.p:
            raise StructuralError("rate_pi does not match p")
        object.__setattr__(self, "intensity", L)
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "rate_pi", pi)
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def n(self) -> int:
        return self.intensity.dim

    def index(self, bio: int, rate: int) -> int:
        if not (0 <= bio < self.q and 0 <= rate < self.p):
            raise DomainError(f"state ({bio}, {rate}) outside {self.q} x {self.p}")
        return bio * self.p + rate

    def start_vector(self, state: StateLike) -> np.ndarray:
        """Initial distribution on the combined space.

        ``state`` is a combined index, a ``(bio, rate)`` pair, a ``(bio, None)``
        pair (rate state drawn from ``rate_pi``), or a full probability vector.
        """
        if isinstance(state, (int, np.integer)):
            if not 0 <= state < self.n:
                raise DomainError(f"state {state} outside 0..{self.n - 1}")
            return np.eye(self.n)[state]
        if isinstance(state, tuple) and len(state) == 2:
            bio, rate = state
            if rate is None:
                return np.kron(np.eye(self.q)[bio], self.rate_pi)
            return np.eye(self.n)[self.index(bio, rate)]
        v = np.asarray(state, dtype=float).ravel()
        if v.size != self.n or v.min() < 0 or abs(v.sum() - 1) > 1e-12:
            raise DomainError("start distribution must be a probability vector on E")
        return v

    def with_payments(self, payments: PaymentSpec) -> "ProductModel":
        return replace(self, payments=payments)

    def discount_generator(self, power: float = 1.0) -> PiecewiseMatrixFunction:
        grid, (L, r) = align(self.intensity, self.rates)
        return PiecewiseMatrixFunction(grid, L - power * _diag_stack(r))


def build_product_model(bio_intensity, payments: PaymentSpec, rate_model: ShortRateModel,
                        horizon: float) -> ProductModel:
    """Lift a biometric model and its payments to ``E_b x E_r`` assuming independence.

    ``Lambda = Lambda_b (+) Lambda_r``, lumps only on biometric transitions
    (``B = B_b (x) I``, ``L1 = L1_b (x) I``), ``b = b_b (x) e`` and
    ``r = e (x) r_rate``.
    """
    Lb = as_piecewise(bio_intensity)
    q = Lb.dim
    if payments.n != q:
        raise StructuralError(f"payments have {payments.n} states, biometric model {q}")
    p = rate_model.p
    Ip = np.eye(p)[None]
    Iq = np.eye(q)[None]

    grid, (lb, lr) = align(Lb, rate_model.intensity)
    m = lb.shape[0]
    L = _kron_stack(lb, np.broadcast_to(Ip, (m, p, p))) + \
        _kron_stack(np.broadcast_to(Iq, (m, q, q)), lr)
    L = PiecewiseMatrixFunction(grid, L)
    r = rate_model.rates
    r = PiecewiseMatrixFunction(r.breakpoints, np.tile(r.values, (1, 1, q)))

    def lift_row(f):
        if f is None:
            return None
        return PiecewiseMatrixFunction(f.breakpoints, np.repeat(f.values, p, axis=2))

    def lift_mat(f):
        if f is None:
            return None
        k = f.values.shape[0]
        return PiecewiseMatrixFunction(f.breakpoints,
                                       _kron_stack(f.values, np.broadcast_to(Ip, (k, p, p))))

    pay = PaymentSpec(lift_row(payments.rates), lift_mat(payments.lumps),
                      lift_mat(payments.lump_intensity), lift_row(payments.rates_theta),
                      lift_mat(payments.lumps_theta))
    return ProductModel(L, r, pay, horizon, q, p, rate_model.pi)


# ---------------------------------------------------------------------------
# reserves


def reserve_matrix(m: ProductModel, s: float, t: float, theta: float = 0.0,
                   payments: Optional[PaymentSpec] = None) -> np.ndarray:
    """Partial state-wise reserves ``V(s,t)``: Van Loan block with
    ``A = Lambda - Delta(r)``, ``B = R`` and ``C = Lambda``."""
    if not 0 <= s <= t <= m.horizon:
        raise DomainError(f"need 0 <= s <= t <= {m.horizon}, got s={s}, t={t}")
    pay = payments if payments is not None else m.payments.at(theta)
    R = reward_matrices(pay).R
    return van_loan(m.discount_generator(), R, m.intensity, s, t)[1]


def state_reserves(m: ProductModel, s: float = 0.0, theta: float = 0.0) -> np.ndarray:
    """Classic prospective reserves ``V(s, T) e``."""
    return reserve_matrix(m, s, m.horizon, theta).sum(axis=1)


def _step_grid(funcs, s: float, t: float, step: float, extra=()) -> tuple[np.ndarray, list]:
    """Stepping grid on ``[s,t]`` containing every breakpoint, with steps <= ``step``,
    and the aligned per-step values of ``funcs``."""
    grid = common_grid(*funcs)
    pts = np.concatenate([grid[(grid > s) & (grid < t)], [s, t], np.asarray(extra, float)])
    pts = np.unique(pts[(pts >= s) & (pts <= t)])
    fine = [pts[:1]]
    for lo, hi in zip(pts[:-1], pts[1:]):
        k = max(1, int(math.ceil((hi - lo) / step - 1e-9)))
        fine.append(np.linspace(lo, hi, k + 1)[1:])
    fine = np.concatenate(fine)
    fine[-1] = t
    vals = [as_piecewise(f).refine(fine).values if len(fine) > 1 else None for f in funcs]
    return fine, vals


def _rk4(f, u, h):
    k1 = f(u)
    k2 = f(u + 0.5 * h * k1)
    k3 = f(u + 0.5 * h * k2)
    k4 = f(u + h * k3)
    return u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class ThieleSolution:
    times: np.ndarray
    values: np.ndarray  # (len(times), n)

    def at(self, t: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9:
            raise DomainError(f"t={t} is not on the solution grid")
        return self.values[j]


def thiele_solve(m: ProductModel, grid=None, theta: float = 0.0,
                 step: float = DEFAULT_STEP) -> ThieleSolution:
    """Backward RK4 solve of ``V' = Delta(r) V - Lambda V - R e``, ``V(T) = 0``.

    Coefficients are held at their value on each grid interval, so the
    stepping grid always contains every breakpoint of the model.
    """
    T = m.horizon
    extra = () if grid is None else np.asarray(grid, float)
    if grid is not None and (extra.min() < 0 or extra.max() > T):
        raise DomainError("evaluation grid must lie in [0, T]")
    R = reward_matrices(m.payments.at(theta)).R
    times, (A, Rv) = _step_grid([m.discount_generator(), R], 0.0, T, step, extra)
    e = np.ones(m.n)
    out = np.zeros((times.size, m.n))
    v = np.zeros(m.n)
    for j in range(times.size - 2, -1, -1):
        a, c = A[j], Rv[j] @ e
        v = _rk4(lambda u: a @ u + c, v, times[j + 1] - times[j])
        out[j] = v
    if grid is not None:
        idx = np.searchsorted(times, extra)
        return ThieleSolution(extra, out[idx])
    return ThieleSolution(times, out)


# ---------------------------------------------------------------------------
# higher order moments


@dataclass
class MomentStack:
    """Reduced moments ``V_r^(0..k)(t, T)``; ``V_r^(0)`` is the transition matrix."""

    order: int
    reduced: list
    t: float
    T: float

    def moment_matrix(self, k: int) -> np.ndarray:
        """Partial moments ``V^(k) = k! V_r^(k)``."""
        return math.factorial(k) * self.reduced[k]

    def raw_moments(self, start: np.ndarray) -> np.ndarray:
        e = np.ones(self.reduced[0].shape[1])
        return np.array([math.factorial(k) * start @ V @ e for k, V in enumerate(self.reduced)])


def _stack_terms(m: ProductModel, k: int, theta: float):
    """Functions driving the stack: ``Lambda``, ``r``, ``R`` and reduced ``C^(j)``."""
    rew = reward_matrices(m.payments.at(theta), k)
    Cr = [rew.reduced(j) for j in range(2, k + 1)]
    return [m.intensity, m.rates, rew.R] + [c for c in Cr if c is not None], \
        [j for j, c in zip(range(2, k + 1), Cr) if c is not None]


def moment_generator(m: ProductModel, k: int, theta: float = 0.0) -> PiecewiseMatrixFunction:
    """The block generator whose product integral carries ``V_r^(k..0)`` in its last
    block column: diagonal ``Lambda - (k-i) Delta(r)``, first superdiagonal ``R``,
    ``j``-th superdiagonal the reduced ``C^(j)``."""
    funcs, orders = _stack_terms(m, k, theta)
    grid, vals = align(*funcs)
    L, r, R = vals[:3]
    C = dict(zip(orders, vals[3:]))
    n = m.n
    nb = (k + 1) * n
    out = np.zeros((grid.size - 1, nb, nb))
    D = _diag_stack(r)
    for i in range(k + 1):
        out[:, i * n:(i + 1) * n, i * n:(i + 1) * n] = L - (k - i) * D
        for j in range(1, k - i + 1):
            blk = R if j == 1 else C.get(j)
            if blk is not None:
                out[:, i * n:(i + 1) * n, (i + j) * n:(i + j + 1) * n] = blk
    return PiecewiseMatrixFunction(grid, out)


def _stack_apply(L, r, R, C, U):
    """Generator of the order-indexed stack acting on ``U[j]``, ``j = 0..k``."""
    k = U.shape[0] - 1
    out = L @ U - np.arange(k + 1)[:, None, None] * r[None, :, None] * U
    if k >= 1:
        out[1:] += R @ U[:-1]
    for j, c in C.items():
        if j <= k:
            out[j:] += c @ U[:-j]
    return out


def _propagate_stack(m: ProductModel, k: int, t: float, T: float, theta: float,
                     U0: np.ndarray, method: str, step: float = DEFAULT_STEP) -> np.ndarray:
    funcs, orders = _stack_terms(m, k, theta)
    if method == "ode":
        times, vals = _step_grid(funcs, t, T, step)
        lengths = np.diff(times)
    else:
        grid, vals = align(*funcs)
        lo = np.maximum(grid[:-1], t)
        hi = np.minimum(grid[1:], T)
        keep = hi > lo
        lengths = (hi - lo)[keep]
        vals = [v[keep] for v in vals]
    L, r, R = vals[:3]
    Cs = vals[3:]
    U = U0.copy()
    for j in range(lengths.size - 1, -1, -1):
        Lj, rj, Rj = L[j], r[j, 0], R[j]
        Cj = {o: c[j] for o, c in zip(orders, Cs)}
        h = lengths[j]
        f = lambda u: _stack_apply(Lj, rj, Rj, Cj, u)
        if method == "ode":
            U = _rk4(f, U, h)
            continue
        norm = (np.abs(Lj).sum(axis=1).max() + k * np.abs(rj).max()
                + np.abs(Rj).sum(axis=1).max() + sum(np.abs(c).sum(axis=1).max() for c in Cj.values()))
        sub = max(1, int(math.ceil(norm * h / 0.5)))
        hs = h / sub
        for _ in range(sub):
            term = U
            acc = U.copy()
            for i in range(1, 40):
                term = f(term) * (hs / i)
                acc += term
                if np.abs(term).max() <= 1e-17 * max(np.abs(acc).max(), 1e-300):
                    break
            U = acc
    return U


def moment_stack(m: ProductModel, k: int, t: float = 0.0, T: Optional[float] = None,
                 theta: float = 0.0, method: str = "auto", check: bool = False) -> MomentStack:
    """Reduced partial moments ``V_r^(0..k)(t, T)``.

    ``method``: ``"block"`` forms the block generator and product-integrates it,
    ``"action"`` applies the same generator block-wise (cheap for large ``k``),
    ``"ode"`` solves the Hattendorff-type system with RK4.  ``"auto"`` picks
    ``block`` for small stacks.
    """
    T = m.horizon if T is None else T
    if k < 0:
        raise DomainError("order must be nonnegative")
    if t > T:
        raise DomainError(f"need t <= T, got {t} > {T}")
    n = m.n
    if method == "auto":
        method = "block" if (k + 1) * n <= 48 else "action"
    if method == "block":
        P = prod_integral(moment_generator(m, k, theta), t, T)
        col = P[:, k * n:]
        reduced = [col[(k - j) * n:(k - j + 1) * n] for j in range(k + 1)]
    elif method in ("action", "ode"):
        U0 = np.zeros((k + 1, n, n))
        U0[0] = np.eye(n)
        U = _propagate_stack(m, k, t, T, theta, U0, method)
        reduced = list(U)
    else:
        raise DomainError(f"unknown method {method!r}")
    stack = MomentStack(k, reduced, t, T)
    if check and k >= 1:
        V = reserve_matrix(m, t, T, theta)
        err = np.abs(V - reduced[1]).max()
        if err > 1e-8:
            raise NumericError(f"first moment disagrees with the reserve by {err:.3g}")
    return stack


def hattendorff_solve(m: ProductModel, k: int, t: float = 0.0, T: Optional[float] = None,
                      theta: float = 0.0, step: float = DEFAULT_STEP) -> MomentStack:
    """Backward RK4 solution of the reduced moment ODE system."""
    return moment_stack(m, k, t, T, theta, method="ode")


def raw_moments_of_pv(m: ProductModel, start: StateLike, N: int, theta: float = 0.0,
                      t: float = 0.0) -> np.ndarray:
    """``E X^0..E X^N`` of the present value at time ``t``, starting from ``start``."""
    if N < 0:
        raise DomainError("N must be nonnegative")
    w = m.start_vector(start)
    U0 = np.zeros((N + 1, m.n, 1))
    U0[0, :, 0] = 1.0
    U = _propagate_stack(m, N, t, m.horizon, theta, U0, "action")
    return np.array([math.factorial(j) * float(w @ U[j, :, 0]) for j in range(N + 1)])


# ---------------------------------------------------------------------------
# equivalence premium


@dataclass
class PremiumResult:
    theta: float
    reserve_at_zero: float
    sensitivity: float
    residual: float
    iterations: int
    trace: list = field(default_factory=list)


def _reserve_and_slope(m: ProductModel, w: np.ndarray, pay: PaymentSpec,
                       dpay: PaymentSpec) -> tuple[float, float]:
    e = np.ones(m.n)
    A = m.discount_generator()
    V = van_loan(A, reward_matrices(pay).R, m.intensity, 0.0, m.horizon)[1]
    dR = reward_matrices(dpay).R
    Vd = van_loan(A, dR, m.intensity, 0.0, m.horizon)[1]
    return float(w @ V @ e), float(w @ Vd @ e)


def equivalence_premium(m: Union[ProductModel, Callable[[float], ProductModel]],
                        start: StateLike, theta0: float = 0.0, tol: float = 1e-10,
                        max_iter: int = 50, eps: float = 1e-6) -> PremiumResult:
    """Premium parameter making the initial reserve zero, by Newton's method.

    For a :class:`ProductModel` with affine payments one step from ``theta0``
    is exact.  A callable ``theta -> ProductModel`` is treated as a general
    parameterisation with the derivative of ``R`` taken by central differences.
    """
    if isinstance(m, ProductModel):
        if not m.payments.has_theta:
            raise NoPremiumSensitivity("payments do not depend on the premium parameter")
        w = m.start_vector(start)
        V0, dV = _reserve_and_slope(m, w, m.payments.at(theta0), m.payments.derivative())
        if abs(dV) < 1e-300:
            raise NoPremiumSensitivity("reserve has zero derivative in theta")
        theta = theta0 - V0 / dV
        res, _ = _reserve_and_slope(m, w, m.payments.at(theta), m.payments.derivative())
        scale = max(abs(V0), abs(dV * theta), 1.0)
        if abs(res) > 1e-8 * scale:
            raise NumericError(f"affine premium leaves residual {res:.3g}")
        return PremiumResult(theta, V0 - theta0 * dV, dV, res, 1,
                             [(theta0, V0), (theta, res)])

    theta = theta0
    trace = []
    for it in range(1, max_iter + 1):
        mod = m(theta)
        w = mod.start_vector(start)
        lo, hi = m(theta - eps).payments, m(theta + eps).payments
        dR = (reward_matrices(hi).R - reward_matrices(lo).R) * (1.0 / (2 * eps))
        e = np.ones(mod.n)
        A = mod.discount_generator()
        V = float(w @ van_loan(A, reward_matrices(mod.payments).R, mod.intensity,
                               0.0, mod.horizon)[1] @ e)
        dV = float(w @ van_loan(A, dR, mod.intensity, 0.0, mod.horizon)[1] @ e)
        trace.append((theta, V))
        if abs(V) < tol:
            return PremiumResult(theta, trace[0][1], dV, V, it, trace)
        if abs(dV) < 1e-300:
            raise NoPremiumSensitivity(f"zero derivative at theta={theta}")
        theta = theta - V / dV
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", trace)
