"""Monte Carlo simulation of discounted payment streams.

Paths of the combined chain are simulated jointly (vectorised over paths,
event by event).  Each state's holding hazard is integrated exactly on the
model grid and inverted, rate payments and discounting are integrated in
closed form per interval, so the only error is sampling error.
"""
from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError
from .lifeval import ProductModel, StateLike
from .matrixcore import align


@dataclass(frozen=True)
class SimulationConfig:
    n_paths: int = 100_000
    seed: int = 0
    workers: int = 1
    keep_raw: bool = True

    def __post_init__(self):
        if self.n_paths < 1 or self.workers < 1:
            raise DomainError("need at least one path and one worker")

    def split(self) -> list[int]:
        base, extra = divmod(self.n_paths, self.workers)
        return [base + (1 if i < extra else 0) for i in range(self.workers)]


@dataclass
class PVSample:
    values: np.ndarray
    summary: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.size

    def raw_moment(self, k: int) -> tuple[float, float]:
        """Empirical ``E X^k`` and its standard error."""
        xk = self.values ** k
        return float(xk.mean()), float(xk.std(ddof=1) / np.sqrt(xk.size))

    def summarize(self, qs=(0.95, 0.97, 0.99, 0.995), bins: int = 200) -> dict:
        v = self.values
        self.summary = {
            "n": int(v.size),
            "mean": float(v.mean()),
            "variance": float(v.var(ddof=1)) if v.size > 1 else 0.0,
            "quantiles": dict(zip([str(q) for q in qs], empirical_quantiles(self, qs).tolist())),
        }
        return self.summary

    def histogram(self, bins: int = 200, range_=None) -> np.ndarray:
        dens, edges = np.histogram(self.values, bins=bins, range=range_, density=True)
        return np.column_stack([0.5 * (edges[:-1] + edges[1:]), dens])


def empirical_quantiles(sample: PVSample, qs) -> np.ndarray:
    """Type-1 (inverse empirical CDF) quantiles."""
    qs = np.atleast_1d(np.asarray(qs, dtype=float))
    if np.any((qs <= 0) | (qs >= 1)):
        raise DomainError("quantile levels must lie in (0, 1)")
    if sample.values.size == 0:
        raise DomainError("empty sample")
    return np.quantile(sample.values, qs, method="inverted_cdf")


@dataclass
class _Tables:
    grid: np.ndarray
    L: np.ndarray        # (m, n, n) intensities
    L1: np.ndarray       # (m, n, n) lump triggers
    lumps: np.ndarray    # (m, n, n)
    H: np.ndarray        # (n, m+1) cumulative event hazard
    haz: np.ndarray      # (m, n)
    Rc: np.ndarray       # (n, m+1) cumulative short rate
    r: np.ndarray        # (m, n)
    K: np.ndarray        # (n, m+1) int b exp(-int r)
    b: np.ndarray        # (m, n)
    dead: np.ndarray     # states that never pay again


def _tables(m: ProductModel, theta: float) -> _Tables:
    pay = m.payments.at(theta)
    n = m.n
    L1f = pay.lump_intensity if pay.lump_intensity is not None else np.zeros((n, n))
    Bf = pay.lumps if pay.lumps is not None else np.zeros((n, n))
    grid, (L, r, b, L1, B) = align(m.intensity, m.rates, pay.rates, L1f, Bf)
    keep = grid[:-1] < m.horizon
    L, r, b, L1, B = (v[keep] for v in (L, r, b, L1, B))
    grid = np.append(grid[:-1][keep], m.horizon)
    r, b = r[:, 0, :], b[:, 0, :]
    idx = np.arange(n)
    dt = np.diff(grid)
    haz = -L[:, idx, idx] + L1[:, idx, idx]
    H = np.vstack([np.zeros(n), np.cumsum(haz * dt[:, None], axis=0)]).T
    Rc = np.vstack([np.zeros(n), np.cumsum(r * dt[:, None], axis=0)]).T
    # int_{t_j}^{t_{j+1}} b e^{-Rc(u)} du in closed form
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(np.abs(r) > 1e-12, -np.expm1(-r * dt[:, None]) / r,
                       dt[:, None] * (1 - r * dt[:, None] / 2))
    inc = b * np.exp(-Rc.T[:-1]) * fac
    K = np.vstack([np.zeros(n), np.cumsum(inc, axis=0)]).T
    # states from which no payment can ever be made
    pays = (np.abs(b).max(axis=0) > 0) | (np.abs(L1 * B).max(axis=(0, 2)) > 0)
    reach = (L.max(axis=0) > 0) | np.eye(n, dtype=bool)
    live = pays.copy()
    for _ in range(n):
        live = live | (reach & live[None, :]).any(axis=1)
    return _Tables(grid, L, L1, B, H, haz, Rc, r, K, b, ~live)


def _interp(table: np.ndarray, rates: np.ndarray, grid: np.ndarray, s: np.ndarray,
            t: np.ndarray) -> np.ndarray:
    """Evaluate a per-state piecewise-linear cumulative table at ``(state, time)``."""
    j = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, rates.shape[0] - 1)
    return table[s, j] + rates[j, s] * (t - grid[j])


def _eval_K(tb: _Tables, s, t):
    j = np.clip(np.searchsorted(tb.grid, t, side="right") - 1, 0, tb.r.shape[0] - 1)
    dt = t - tb.grid[j]
    rr = tb.r[j, s]
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(np.abs(rr) > 1e-12, -np.expm1(-rr * dt) / rr, dt * (1 - rr * dt / 2))
    return tb.K[s, j] + tb.b[j, s] * np.exp(-tb.Rc[s, j]) * fac


def _simulate_block(m: ProductModel, tb: _Tables, start: np.ndarray, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    ns = m.n
    T = m.horizon
    grid = tb.grid
    state = rng.choice(ns, size=n, p=start)
    t = np.zeros(n)
    logdisc = np.zeros(n)
    pv = np.zeros(n)
    alive = np.flatnonzero(~tb.dead[state])
    while alive.size:
        s = state[alive]
        t0 = t[alive]
        target = _interp(tb.H, tb.haz, grid, s, t0) + rng.exponential(size=alive.size)
        t1 = np.full(alive.size, T)
        hit = target < tb.H[s, -1]
        for st in np.unique(s[hit]):
            sel = np.flatnonzero(hit & (s == st))
            row = tb.H[st]
            j = np.clip(np.searchsorted(row, target[sel], side="right") - 1, 0, grid.size - 2)
            rate = tb.haz[j, st]
            t1[sel] = grid[j] + np.where(rate > 0, (target[sel] - row[j]) / np.where(rate > 0, rate, 1), 0)
        t1 = np.minimum(np.maximum(t1, t0), T)
        hit &= t1 < T
        # accrue continuous payments over [t0, t1] and discount to t1
        R0 = _interp(tb.Rc, tb.r, grid, s, t0)
        R1 = _interp(tb.Rc, tb.r, grid, s, t1)
        pv[alive] += np.exp(-logdisc[alive] + R0) * (_eval_K(tb, s, t1) - _eval_K(tb, s, t0))
        logdisc[alive] += R1 - R0
        t[alive] = t1
        done = alive[~hit]
        alive, s, t1 = alive[hit], s[hit], t1[hit]
        if alive.size:
            j = np.clip(np.searchsorted(grid, t1, side="right") - 1, 0, grid.size - 2)
            w = tb.L[j, s, :].copy()
            w[np.arange(alive.size), s] = tb.L1[j, s, s]
            cum = np.cumsum(w, axis=1)
            u = rng.random(alive.size) * cum[:, -1]
            nxt = np.minimum((u[:, None] >= cum).sum(axis=1), ns - 1)
            trig = rng.random(alive.size) * w[np.arange(alive.size), nxt] < tb.L1[j, s, nxt]
            lump = np.where(trig, tb.lumps[j, s, nxt], 0.0)
            pv[alive] += np.exp(-logdisc[alive]) * lump
            state[alive] = nxt
            alive = alive[~tb.dead[nxt]]
        del done
    return pv


def _worker(args):
    m, theta, start, n, seed_seq = args
    tb = _tables(m, theta)
    return _simulate_block(m, tb, start, n, np.random.default_rng(seed_seq))


def simulate_pv(m: ProductModel, start: StateLike, config: SimulationConfig,
                theta: float = 0.0) -> PVSample:
    """Present values of ``config.n_paths`` simulated paths from ``start``.

    Worker ``i`` draws from child ``i`` of ``SeedSequence(seed)`` and the
    blocks are concatenated in worker order, so output only depends on
    ``(seed, workers)``.
    """
    w = m.start_vector(start)
    seeds = np.random.SeedSequence(config.seed).spawn(config.workers)
    jobs = [(m, theta, w, k, sq) for k, sq in zip(config.split(), seeds)]
    if config.workers == 1:
        parts = [_worker(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            parts = list(ex.map(_worker, jobs))
    sample = PVSample(np.concatenate(parts))
    sample.summarize()
    return sample


def write_raw(path, sample: PVSample) -> None:
    """Little-endian binary dump: uint64 count followed by float64 values."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", sample.n))
        fh.write(sample.values.astype("<f8").tobytes())


def read_raw(path) -> PVSample:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        vals = np.frombuffer(fh.read(8 * n), dtype="<f8")
    if vals.size != n:
        raise DomainError(f"raw file truncated: expected {n} values, found {vals.size}")
    return PVSample(vals.astype(float))
