"""Markovian short-rate models: discounting, bond prices and calibration.

The short rate is ``r_{X(u)}(u)`` for a Markov jump process ``X``.  Bond
prices are survival functions of a phase-type variable after scaling by
``exp(-rho (T - t))``, which is what makes EM calibration possible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .emfit import FitConfig, FitResult, WeightedSample, em_fit
from .errors import DomainError, NonMonotoneCurveError, NumericError
from .matrixcore import (PiecewiseMatrixFunction, as_piecewise, check_intensity,
                         combine, expm, prod_integral)
from .phasetype import PhaseTypeDist, hazard

MONOTONE_TOL = 1e-9


@dataclass(frozen=True)
class BondCurve:
    maturities: np.ndarray
    prices: np.ndarray
    forwards: Optional[np.ndarray] = None

    def __post_init__(self):
        T = np.asarray(self.maturities, dtype=float).ravel()
        P = np.asarray(self.prices, dtype=float).ravel()
        if T.size == 0 or T.size != P.size:
            raise DomainError("curve needs matching, nonempty maturities and prices")
        if np.any(T <= 0) or np.any(np.diff(T) <= 0):
            raise DomainError("maturities must be positive and strictly increasing")
        if np.any(P <= 0):
            bad = T[P <= 0].tolist()
            raise DomainError(f"nonpositive prices at maturities {bad}")
        object.__setattr__(self, "maturities", T)
        object.__setattr__(self, "prices", P)
        if self.forwards is not None:
            f = np.asarray(self.forwards, dtype=float).ravel()
            if f.size != T.size or np.any(f <= -1):
                raise DomainError("discrete forwards must match maturities and exceed -1")
            object.__setattr__(self, "forwards", f)

    def __len__(self):
        return self.maturities.size


@dataclass(frozen=True)
class ShortRateModel:
    """Rate-state intensity, state-wise rates, initial law and floor ``rho``.

    ``rates`` is stored as a ``1 x p`` piecewise function so that it can be
    aligned with the intensity on a common grid.
    """

    intensity: PiecewiseMatrixFunction
    rates: PiecewiseMatrixFunction
    pi: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        L = as_piecewise(self.intensity)
        r = self.rates
        if not isinstance(r, PiecewiseMatrixFunction):
            r = PiecewiseMatrixFunction.constant(np.asarray(r, dtype=float).reshape(1, -1))
        pi = np.asarray(self.pi, dtype=float).ravel()
        p = L.dim
        if r.shape != (1, p) or pi.size != p:
            raise DomainError(f"rates {r.shape} / pi {pi.size} do not match {p} states")
        check_intensity(L, name="rate intensity")
        if pi.min() < 0 or abs(pi.sum() - 1) > 1e-12:
            raise DomainError("pi must be a probability vector")
        if self.rho < 0:
            raise DomainError("rho must be nonnegative")
        if r.values.min() < -self.rho - 1e-12:
            raise DomainError(f"rates fall below -rho = {-self.rho}")
        object.__setattr__(self, "intensity", L)
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "rho", float(self.rho))

    @classmethod
    def constant(cls, intensity, rates, pi=None, rho: float = 0.0):
        L = np.asarray(intensity, dtype=float)
        if pi is None:
            pi = np.eye(L.shape[0])[0]
        return cls(PiecewiseMatrixFunction.constant(L),
                   PiecewiseMatrixFunction.constant(np.asarray(rates, dtype=float).reshape(1, -1)),
                   pi, rho)

    @property
    def p(self) -> int:
        return self.intensity.dim

    @property
    def is_homogeneous(self) -> bool:
        return self.intensity.is_constant and self.rates.is_constant

    def rate_vector(self, t: float = 0.0) -> np.ndarray:
        return self.rates(t)[0]

    def generator(self, power: float = 1.0, shift: float = 0.0) -> PiecewiseMatrixFunction:
        """``Lambda(u) - power * Delta(r(u)) - shift * I`` as a piecewise function."""
        p = self.p
        return combine(lambda L, r: L - power * np.diag(r[0]) - shift * np.eye(p),
                       self.intensity, self.rates)


def discount_matrix(m: ShortRateModel, s: float, t: float, power: int = 1) -> np.ndarray:
    """``D^(power)(s,t)``; ``power=0`` gives the transition matrix ``P(s,t)``."""
    if power < 0:
        raise DomainError("power must be nonnegative")
    return prod_integral(m.generator(power), s, t)


def bond_price(m: ShortRateModel, t: float, T: float, state: Optional[int] = None) -> float:
    D = discount_matrix(m, t, T)
    w = m.pi if state is None else np.eye(m.p)[state]
    return float(w @ D.sum(axis=1))


def bond_prices(m: ShortRateModel, maturities: Sequence[float], state: Optional[int] = None) -> np.ndarray:
    """Prices ``B(0, T_i)`` for increasing maturities, chaining the product integral."""
    G = m.generator()
    w = m.pi if state is None else np.eye(m.p)[state]
    out = []
    row = w.copy()
    prev = 0.0
    for T in maturities:
        row = row @ prod_integral(G, prev, T)
        prev = T
        out.append(row.sum())
    return np.array(out)


def rate_phase_type(m: ShortRateModel, t: float = 0.0, state: Optional[int] = None) -> PhaseTypeDist:
    """The IPH variable whose survival is ``exp(-rho (T-t)) B(t, T)``, in time ``T - t``."""
    G = m.generator(1.0, shift=m.rho)
    if t > 0:
        G = G.shift(t)
    pi = m.pi if state is None else np.eye(m.p)[state]
    return PhaseTypeDist(pi, G)


def forward_rate(m: ShortRateModel, t: float, T: float, state: Optional[int] = None) -> float:
    """Instantaneous forward rate: hazard of the scaled bond survival, less ``rho``."""
    if t > T:
        raise DomainError(f"need t <= T, got {t} > {T}")
    d = rate_phase_type(m, t, state)
    return hazard(d, T - t) - m.rho


def yield_curve(m: ShortRateModel, maturities, state: Optional[int] = None) -> np.ndarray:
    T = np.asarray(maturities, dtype=float)
    return -np.log(bond_prices(m, T, state)) / T


def rho_from_prices(curve: BondCurve, use_forwards: bool = True) -> float:
    """Smallest nonnegative ``rho`` with ``exp(-rho T_i) B(0,T_i) <= 1`` for all ``i``.

    Uses the discrete forward rates when the curve carries them (and
    ``use_forwards`` is set); rounded forwards can then leave a scaled price a
    hair above one, see :func:`calibrate`.
    """
    if use_forwards and curve.forwards is not None:
        rho = -np.min(np.log1p(curve.forwards))
    else:
        rho = np.max(np.log(curve.prices) / curve.maturities)
    return max(0.0, float(rho))


def prices_to_survival_sample(curve: BondCurve, rho: float,
                              placement: str = "midpoint") -> WeightedSample:
    """Turn scaled prices into a histogram with a censored tail.

    Interval ``(T_{i-1}, T_i]`` (with ``T_0 = 0``, ``B(0) = 1``) gets the mass
    ``S(T_{i-1}) - S(T_i)`` at its midpoint (or right end), and the final
    scaled price becomes a right-censored point at ``T_n``.
    """
    if placement not in ("midpoint", "right"):
        raise DomainError("placement must be 'midpoint' or 'right'")
    T = np.concatenate([[0.0], curve.maturities])
    S = np.concatenate([[1.0], np.exp(-rho * curve.maturities) * curve.prices])
    if S[1:].max() > 1 + MONOTONE_TOL:
        raise NonMonotoneCurveError(
            "scaled prices exceed one; rho is too small",
            curve.maturities[S[1:] > 1 + MONOTONE_TOL])
    mass = S[:-1] - S[1:]
    if mass.min() < -MONOTONE_TOL:
        bad = curve.maturities[mass < -MONOTONE_TOL]
        raise NonMonotoneCurveError(
            f"scaled prices increase at maturities {bad.tolist()}", bad)
    pos = 0.5 * (T[:-1] + T[1:]) if placement == "midpoint" else T[1:]
    keep = mass > 0
    return WeightedSample(pos[keep], mass[keep], [T[-1]], [S[-1]])


@dataclass
class CalibrationResult:
    model: ShortRateModel
    dist: PhaseTypeDist
    loglik: float
    rho: float
    mode: str
    fit: FitResult
    maturities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    observed: np.ndarray = field(default_factory=lambda: np.zeros(0))
    model_prices: np.ndarray = field(default_factory=lambda: np.zeros(0))
    curve_rho: Optional[float] = None  # rho_from_prices(curve); may differ from rho in the last digits

    @property
    def max_price_error(self) -> float:
        return float(np.max(np.abs(self.model_prices - self.observed)))

    def report(self) -> dict:
        rep = self.fit.report()
        rep.update({
            "rho": self.rho,
            "curve_rho": self.curve_rho,
            "mode": self.mode,
            "intensity": self.model.intensity.values[0].tolist(),
            "rates": self.model.rate_vector().tolist(),
            "maturities": self.maturities.tolist(),
            "observed_prices": self.observed.tolist(),
            "model_prices": self.model_prices.tolist(),
            "max_price_error": self.max_price_error,
        })
        return rep


def calibrate(curve: BondCurve, config: FitConfig, rates: Optional[Sequence[float]] = None,
              placement: str = "midpoint") -> CalibrationResult:
    """Fit a time-homogeneous Markovian rate model to a bond curve.

    With ``rates`` given the exit rates are fixed at ``rates + rho`` (restricted
    mode); otherwise EM chooses them and ``r = t - rho`` (unrestricted).
    """
    # rounded forwards may give a floor slightly below the one the prices need
    curve_rho = rho_from_prices(curve)
    rho = max(curve_rho, rho_from_prices(curve, use_forwards=False))
    sample = prices_to_survival_sample(curve, rho, placement)
    if rates is not None:
        r = np.asarray(rates, dtype=float).ravel()
        if r.size != config.p:
            raise DomainError(f"{r.size} rates given for p={config.p}")
        if r.min() < -rho:
            raise DomainError("restricted rates must be >= -rho")
        config = replace(config, fixed_exit=r + rho)
        mode = "restricted"
    else:
        config = replace(config, fixed_exit=None)
        mode = "unrestricted"
    fit = em_fit(sample, config)
    T = fit.dist.matrix()
    t = fit.exit_rates
    M = T + np.diag(t)
    np.fill_diagonal(M, 0.0)
    np.fill_diagonal(M, -M.sum(axis=1))
    r = r if rates is not None else t - rho
    model = ShortRateModel.constant(M, r, fit.dist.pi, rho)
    prices = bond_prices(model, curve.maturities)
    return CalibrationResult(model, fit.dist, fit.loglik, rho, mode, fit,
                             curve.maturities, curve.prices, prices, curve_rho)


# ---------------------------------------------------------------------------
# G2++ reference curve


G2PP_REFERENCE_PARAMS = dict(r0=-0.01, k1=0.401, k2=0.178, sigma1=0.0378,
                         sigma2=0.0372, theta=0.01297, sigma12=-0.996)


def _bk(k: float, T: np.ndarray) -> np.ndarray:
    x = k * T
    small = np.abs(x) < 1e-5
    out = np.empty_like(T)
    out[~small] = -np.expm1(-x[~small]) / k
    xs = x[small]
    out[small] = T[small] * (1 - xs / 2 + xs * xs / 6)
    return out


def g2pp_prices(params: dict, maturities, printed_psi: bool = False) -> BondCurve:
    """Zero-coupon prices ``exp(-psi(T) + V^2(0,T)/2)`` of the two-factor Vasicek model.

    ``psi(T) = theta T + (r0 - theta)(1 - exp(-k1 T)) / k1`` by default, which
    gives ``B(0,0) = 1``.  ``printed_psi=True`` uses the variant
    ``((theta - r0)(1 + exp(-k1 T)) + k1 theta T) / k1`` instead.
    """
    r0, k1, k2 = params["r0"], params["k1"], params["k2"]
    s1, s2, th, s12 = params["sigma1"], params["sigma2"], params["theta"], params["sigma12"]
    if k1 <= 0 or k2 <= 0:
        raise DomainError("mean-reversion speeds must be positive")
    T = np.asarray(maturities, dtype=float)
    V2 = (s1 ** 2 / k1 ** 2 * (T - _bk(k1, T) - k1 / 2 * _bk(k1, T) ** 2)
          + s2 ** 2 / k2 ** 2 * (T - _bk(k2, T) - k2 / 2 * _bk(k2, T) ** 2)
          + 2 * s1 * s2 * s12 / (k1 * k2)
          * (T - _bk(k1, T) - _bk(k2, T) + _bk(k1 + k2, T)))
    if printed_psi:
        psi = ((th - r0) * (1 + np.exp(-k1 * T)) + k1 * th * T) / k1
    else:
        psi = th * T + (r0 - th) * _bk(k1, T)
    return BondCurve(T, np.exp(-psi + 0.5 * V2))


def swap_rate(m: ShortRateModel, T: float) -> float:
    """Par rate ``F_tau(T) / int_0^T P(tau > y) dy`` for a homogeneous model."""
    if not m.is_homogeneous:
        raise DomainError("swap rate formula needs a time-homogeneous model")
    S = m.generator().values[0]
    e = np.ones(m.p)
    E = expm(S * T)
    try:
        G = np.linalg.inv(-S)
    except np.linalg.LinAlgError as exc:
        raise NumericError("M - Delta(r) is singular") from exc
    num = 1.0 - m.pi @ E @ e
    den = m.pi @ G @ (e - E @ e)
    if den <= 0:
        raise NumericError("annuity factor is not positive")
    return float(num / den)
