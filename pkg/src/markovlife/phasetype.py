"""Phase-type and inhomogeneous phase-type distributions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, HazardUnavailable, NumericError
from .matrixcore import (PiecewiseMatrixFunction, as_piecewise, check_intensity,
                         expm, prod_integral)

HAZARD_FLOOR = 1e-300


@dataclass(frozen=True)
class PhaseTypeDist:
    """Absorption time of a Markov jump process with sub-intensity ``T(x)``.

    Exit rates are never stored; they are always ``-T(x) e``.
    """

    pi: np.ndarray
    T: PiecewiseMatrixFunction

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).ravel()
        T = as_piecewise(self.T)
        if pi.size != T.dim:
            raise DomainError(f"pi has length {pi.size}, T is {T.dim}x{T.dim}")
        if pi.min() < 0 or abs(pi.sum() - 1.0) > 1e-12:
            raise DomainError(f"pi must be a probability vector, got {pi}")
        check_intensity(T, sub=True, name="T")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "T", T)

    @classmethod
    def constant(cls, pi, T):
        return cls(pi, PiecewiseMatrixFunction.constant(T))

    @property
    def p(self) -> int:
        return self.pi.size

    @property
    def is_homogeneous(self) -> bool:
        return self.T.is_constant

    def matrix(self) -> np.ndarray:
        """The constant sub-intensity matrix (homogeneous case only)."""
        if not self.is_homogeneous:
            raise DomainError("distribution is time-inhomogeneous")
        return self.T.values[0]

    def exit_rates(self, x: float = 0.0) -> np.ndarray:
        return -self.T(x).sum(axis=1)

    def transient_probs(self, x: float) -> np.ndarray:
        """Row vector of P(Y(x) = i) over the transient states."""
        if x < 0:
            raise DomainError(f"x must be nonnegative, got {x}")
        if self.is_homogeneous:
            return self.pi @ expm(self.matrix() * x)
        return self.pi @ prod_integral(self.T, 0.0, x)


def survival(d: PhaseTypeDist, x: float) -> float:
    if x == 0:
        return 1.0
    return float(np.clip(d.transient_probs(x).sum(), 0.0, 1.0))


def density(d: PhaseTypeDist, x: float) -> float:
    return max(float(d.transient_probs(x) @ d.exit_rates(x)), 0.0)


def cdf(d: PhaseTypeDist, x: float) -> float:
    return 1.0 - survival(d, x)


def hazard(d: PhaseTypeDist, x: float) -> float:
    """Density over survival; raises :class:`HazardUnavailable` in the deep tail."""
    a = d.transient_probs(x)
    surv = a.sum()
    if surv <= HAZARD_FLOOR:
        raise HazardUnavailable(f"survival underflow at x={x} ({surv:.3g})")
    return float(a @ d.exit_rates(x)) / surv


def _green(d: PhaseTypeDist) -> np.ndarray:
    T = d.matrix()
    try:
        return np.linalg.inv(-T)
    except np.linalg.LinAlgError as exc:
        raise NumericError("sub-intensity matrix is singular") from exc


def ph_mean(d: PhaseTypeDist) -> float:
    """``pi (-T)^{-1} e``."""
    return float(d.pi @ _green(d) @ np.ones(d.p))


def renewal_stationary(d: PhaseTypeDist) -> np.ndarray:
    """Stationary phase distribution of the PH renewal process, ``pi(-T)^{-1} / mu``."""
    v = d.pi @ _green(d)
    return v / v.sum()


def ph_moment(d: PhaseTypeDist, k: int) -> float:
    """``E tau^k = k! pi (-T)^{-k} e``."""
    U = _green(d)
    v = d.pi.copy()
    fact = 1.0
    for j in range(1, k + 1):
        v = v @ U
        fact *= j
    return fact * float(v.sum())


@dataclass
class AbsorptionSample:
    tau: float
    states: list = field(default_factory=list)
    sojourns: list = field(default_factory=list)


def sample(d: PhaseTypeDist, rng_seed=None, with_path: bool = False) -> AbsorptionSample:
    """Simulate one absorption time.

    On a piecewise-constant ``T`` the exponential clock is redrawn at every
    breakpoint; memorylessness makes this exact.
    """
    rng = np.random.default_rng(rng_seed)
    T = d.T
    bp = T.breakpoints
    p = d.p
    state = int(rng.choice(p, p=d.pi))
    t = 0.0
    j = 0
    states, sojourns = [state], [0.0]
    while True:
        m = T.values[j]
        out_rate = -m[state, state]
        hi = bp[j + 1]
        wait = rng.exponential(1.0 / out_rate) if out_rate > 0 else np.inf
        if t + wait >= hi:
            if not np.isfinite(hi):
                raise NumericError("process never absorbs")
            sojourns[-1] += hi - t
            t = hi
            j += 1
            continue
        t += wait
        sojourns[-1] += wait
        row = m[state].copy()
        row[state] = 0.0
        exit_rate = out_rate - row.sum()
        probs = np.append(row, max(exit_rate, 0.0)) / out_rate
        nxt = int(rng.choice(p + 1, p=probs / probs.sum()))
        if nxt == p:
            break
        state = nxt
        states.append(state)
        sojourns.append(0.0)
    if with_path:
        return AbsorptionSample(t, states, sojourns)
    return AbsorptionSample(t)


def sample_many(d: PhaseTypeDist, n: int, rng_seed=None) -> np.ndarray:
    """Vectorised absorption times for a homogeneous distribution."""
    rng = np.random.default_rng(rng_seed)
    T = d.matrix()
    p = d.p
    out_rate = -np.diag(T)
    jump = np.zeros((p, p + 1))
    jump[:, :p] = T / out_rate[:, None]
    np.fill_diagonal(jump[:, :p], 0.0)
    jump[:, p] = d.exit_rates() / out_rate
    cum = np.cumsum(jump, axis=1)
    cum[:, -1] = 1.0
    state = rng.choice(p, size=n, p=d.pi)
    tau = np.zeros(n)
    alive = np.arange(n)
    while alive.size:
        s = state[alive]
        tau[alive] += rng.exponential(size=alive.size) / out_rate[s]
        u = rng.random(alive.size)
        nxt = (u[:, None] > cum[s]).sum(axis=1)
        state[alive] = nxt
        alive = alive[nxt < p]
    return tau
