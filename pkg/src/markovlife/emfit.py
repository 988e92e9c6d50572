"""EM fitting of phase-type distributions to weighted, right-censored data.

The E-step uses exact conditional expectations of the complete-data
sufficient statistics.  Each observation needs one exponential of the
``2p x 2p`` block generator ``[[T, k pi], [0, T]]`` with ``k = t`` (exact
points) or ``k = e`` (censored points).  Observations are processed in
increasing order and the exponentials are chained, so an equally spaced
histogram costs two dense exponentials per iteration.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, FitDegeneracyError, FitFailureError
from .matrixcore import expm
from .phasetype import PhaseTypeDist, ph_mean

log = logging.getLogger(__name__)

STRUCTURES = ("general", "coxian")


@dataclass(frozen=True)
class WeightedSample:
    exact_times: np.ndarray
    exact_weights: np.ndarray
    censored_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    censored_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, n), dtype=float).ravel() for n in
                ("exact_times", "exact_weights", "censored_times", "censored_weights")]
        y, w, c, v = arrs
        if y.size != w.size or c.size != v.size:
            raise DomainError("times and weights must have equal lengths")
        if y.size + c.size == 0:
            raise DomainError("sample is empty")
        if np.any(y <= 0) or np.any(c <= 0):
            raise DomainError("all observation times must be positive")
        if np.any(w <= 0) or np.any(v <= 0):
            raise DomainError("all weights must be positive")
        for name, a in zip(("exact_times", "exact_weights",
                            "censored_times", "censored_weights"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_points(cls, times, weights=None):
        times = np.asarray(times, dtype=float)
        if weights is None:
            weights = np.ones_like(times)
        return cls(times, weights)

    @property
    def total_weight(self) -> float:
        return float(self.exact_weights.sum() + self.censored_weights.sum())

    @property
    def mean_time(self) -> float:
        """Weighted mean of all times; censored times count at face value."""
        s = self.exact_times @ self.exact_weights + self.censored_times @ self.censored_weights
        return float(s) / self.total_weight

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}


@dataclass
class EMStatistics:
    B: np.ndarray       # expected starts per state
    Z: np.ndarray       # expected total sojourn per state
    N: np.ndarray       # expected i -> j transitions, zero diagonal
    N_exit: np.ndarray  # expected absorptions from each state
    loglik: float = float("nan")


@dataclass
class FitConfig:
    p: int
    structure: str = "general"
    fixed_exit: Optional[Sequence[float]] = None
    initial: str = "free"      # "free" or "first" (start in state 1)
    max_iters: int = 5000
    tol: float = 1e-10
    seed: int = 0
    restarts: int = 5

    def __post_init__(self):
        if self.p < 1:
            raise DomainError("dimension p must be at least 1")
        if self.structure not in STRUCTURES:
            raise DomainError(f"structure must be one of {STRUCTURES}")
        if self.initial not in ("free", "first"):
            raise DomainError("initial must be 'free' or 'first'")
        if self.tol <= 0:
            raise DomainError("tolerance must be positive")
        if self.fixed_exit is not None:
            fe = np.asarray(self.fixed_exit, dtype=float).ravel()
            if fe.size != self.p or np.any(fe < 0):
                raise DomainError(f"fixed_exit must be {self.p} nonnegative rates")
            self.fixed_exit = fe

    @property
    def start_in_first(self) -> bool:
        return self.structure == "coxian" or self.initial == "first"

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.fixed_exit is not None:
            d["fixed_exit"] = [float(x) for x in self.fixed_exit]
        return d


@dataclass
class FitResult:
    dist: PhaseTypeDist
    loglik: float
    trace: list
    config: FitConfig
    restart_logliks: list
    exit_rates: np.ndarray
    small_states: list = field(default_factory=list)

    def report(self) -> dict:
        return {
            "pi": self.dist.pi.tolist(),
            "T": self.dist.matrix().tolist(),
            "exit_rates": self.exit_rates.tolist(),
            "loglik": self.loglik,
            "loglik_trace": self.trace,
            "restart_logliks": self.restart_logliks,
            "small_states": self.small_states,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
        }


# ---------------------------------------------------------------------------


def _chain(times: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Stack ``expm(G * y)`` for sorted ``times`` by chaining increments."""
    dts = np.diff(times, prepend=0.0)
    keys, inverse = np.unique(np.round(dts, 12), return_inverse=True)
    steps = [expm(G * dts[np.argmax(inverse == k)]) for k in range(keys.size)]
    out = np.empty((times.size,) + G.shape)
    cur = np.eye(G.shape[0])
    for k, j in enumerate(inverse):
        cur = cur @ steps[j]
        out[k] = cur
    return out


def e_step(d: PhaseTypeDist, sample: WeightedSample, exit_rates=None) -> EMStatistics:
    """Weighted conditional expectations of ``B, Z, N_ij, N_i`` given the data.

    ``exit_rates`` overrides ``-T e`` (used when exit rates are held fixed).
    """
    T = d.matrix()
    p = d.p
    pi = d.pi
    t = d.exit_rates() if exit_rates is None else np.asarray(exit_rates, dtype=float)
    B = np.zeros(p)
    Z = np.zeros(p)
    JT = np.zeros((p, p))
    N_exit = np.zeros(p)
    ll = 0.0
    parts = ((sample.exact_times, sample.exact_weights, t, True),
             (sample.censored_times, sample.censored_weights, np.ones(p), False))
    for times, weights, kernel, exact in parts:
        if times.size == 0:
            continue
        order = np.argsort(times, kind="stable")
        G = np.zeros((2 * p, 2 * p))
        G[:p, :p] = T
        G[p:, p:] = T
        G[:p, p:] = np.outer(kernel, pi)
        E = _chain(times[order], G)
        w = weights[order]
        eT = E[:, :p, :p]
        a = pi @ eT                     # state distribution at y
        bvec = eT @ kernel              # e^{Ty} t  or  e^{Ty} e
        lik = a @ kernel
        bad = np.flatnonzero(~(lik > 0))
        if bad.size:
            kind = "density" if exact else "survival"
            k = order[bad[0]]
            raise FitDegeneracyError(
                f"zero {kind} at observation y={times[k]} (weight {weights[k]})")
        ww = w / lik
        B += pi * (ww @ bvec)
        J = E[:, :p, p:]
        Z += ww @ np.diagonal(J, axis1=1, axis2=2)
        JT += np.einsum("k,kij->ji", ww, J)
        if exact:
            N_exit += t * (ww @ a)
        ll += float(w @ np.log(lik))
    N = T * JT
    np.fill_diagonal(N, 0.0)
    np.clip(N, 0.0, None, out=N)
    return EMStatistics(B, Z, N, N_exit, ll)


def m_step(stats: EMStatistics, config: FitConfig) -> PhaseTypeDist:
    p = config.p
    Z = stats.Z
    bad = np.flatnonzero(~(Z > 0))
    if bad.size:
        raise FitDegeneracyError(f"states {bad.tolist()} have zero expected sojourn")
    if config.start_in_first:
        pi = np.zeros(p)
        pi[0] = 1.0
    else:
        pi = stats.B / stats.B.sum()
    rates = stats.N / Z[:, None]
    if config.structure == "coxian":
        rates = np.diag(np.diag(rates, 1), 1)
    if config.fixed_exit is not None:
        exit_rates = config.fixed_exit
    else:
        exit_rates = stats.N_exit / Z
    T = rates.copy()
    np.fill_diagonal(T, -(exit_rates + rates.sum(axis=1)))
    return PhaseTypeDist.constant(pi, T)


def loglikelihood(d: PhaseTypeDist, sample: WeightedSample) -> float:
    """``sum w log f(y) + sum v log S(c)``."""
    T = d.matrix()
    t = d.exit_rates()
    ll = 0.0
    for y, w in zip(sample.exact_times, sample.exact_weights):
        ll += w * np.log(d.pi @ expm(T * y) @ t)
    for c, v in zip(sample.censored_times, sample.censored_weights):
        ll += v * np.log(d.pi @ expm(T * c).sum(axis=1))
    return float(ll)


def random_start(sample: WeightedSample, config: FitConfig, rng) -> PhaseTypeDist:
    """Random strictly positive parameters with mean near the sample mean."""
    p = config.p
    if config.structure == "coxian":
        off = np.diag(rng.uniform(0.5, 1.5, p - 1), 1)
    else:
        off = rng.uniform(0.1, 1.0, (p, p))
        np.fill_diagonal(off, 0.0)
    if config.start_in_first:
        pi = np.zeros(p)
        pi[0] = 1.0
    else:
        pi = rng.dirichlet(np.ones(p))
    scale = 1.0 / max(sample.mean_time, 1e-12)
    if config.fixed_exit is not None:
        exit_rates = config.fixed_exit
        off = off * scale * p
    else:
        exit_rates = rng.uniform(0.1, 1.0, p)
        if config.structure == "coxian":
            exit_rates[:-1] *= 0.1
        exit_rates[-1] = max(exit_rates[-1], 0.5)
        off = off * scale * p
        exit_rates = exit_rates * scale
        # rescale the whole generator so the initial mean matches the data
        d = _assemble(pi, off, exit_rates)
        factor = ph_mean(d) / max(sample.mean_time, 1e-12)
        off, exit_rates = off * factor, exit_rates * factor
    return _assemble(pi, off, exit_rates)


def _assemble(pi, off, exit_rates) -> PhaseTypeDist:
    T = off.copy()
    np.fill_diagonal(T, -(exit_rates + off.sum(axis=1)))
    return PhaseTypeDist.constant(pi, T)


def _run(d: PhaseTypeDist, sample: WeightedSample, config: FitConfig):
    exit_fixed = config.fixed_exit
    trace = []
    for _ in range(config.max_iters):
        stats = e_step(d, sample, exit_rates=exit_fixed)
        trace.append(stats.loglik)
        d = m_step(stats, config)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < config.tol:
            break
    final = e_step(d, sample, exit_rates=exit_fixed).loglik
    trace.append(final)
    return d, trace


def em_fit(sample: WeightedSample, config: FitConfig, init: PhaseTypeDist = None) -> FitResult:
    """Best of ``config.restarts`` seeded EM runs (or a single run from ``init``)."""
    rng = np.random.default_rng(config.seed)
    starts = [init] if init is not None else [
        random_start(sample, config, rng) for _ in range(config.restarts)]
    best = None
    restart_ll = []
    failures = []
    for k, d0 in enumerate(starts):
        try:
            d, trace = _run(d0, sample, config)
        except FitDegeneracyError as exc:
            log.info("restart %d degenerate: %s", k, exc)
            failures.append(str(exc))
            restart_ll.append(None)
            continue
        restart_ll.append(trace[-1])
        if best is None or trace[-1] > best[1][-1]:
            best = (d, trace)
    if best is None:
        raise FitFailureError("all EM restarts degenerate: " + "; ".join(failures))
    d, trace = best
    Z = e_step(d, sample, exit_rates=config.fixed_exit).Z
    small = np.flatnonzero(Z < 1e-12 * Z.sum()).tolist()
    if small:
        log.warning("states %s carry negligible expected sojourn", small)
    exit_rates = (np.array(config.fixed_exit) if config.fixed_exit is not None
                  else d.exit_rates())
    return FitResult(d, trace[-1], trace, config, restart_ll, exit_rates, small)


def discretize_density(f: Callable[[float], float], grid: Sequence[float],
                       survival: Callable[[float], float] = None) -> WeightedSample:
    """Histogram of a density: trapezoid cell masses placed at cell midpoints.

    The mass beyond the last grid point becomes a censored point there, taken
    from ``survival`` when given and as ``1 - total`` otherwise.
    """
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or not np.all(np.diff(g) > 0):
        raise DomainError("grid must be strictly increasing with at least two points")
    fv = np.array([f(x) for x in g], dtype=float)
    if np.any(fv < 0):
        raise DomainError("density must be nonnegative on the grid")
    mass = 0.5 * (fv[:-1] + fv[1:]) * np.diff(g)
    mids = 0.5 * (g[:-1] + g[1:])
    keep = mass > 0
    if mids[0] <= 0:
        raise DomainError("grid must start at a nonnegative point")
    tail = survival(g[-1]) if survival is not None else 1.0 - mass.sum()
    cens_t = np.array([g[-1]]) if tail > 0 else np.zeros(0)
    cens_w = np.array([tail]) if tail > 0 else np.zeros(0)
    return WeightedSample(mids[keep], mass[keep], cens_t, cens_w)
