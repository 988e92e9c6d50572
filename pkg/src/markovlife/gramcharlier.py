"""Gram-Charlier density and CDF approximations from raw moments.

The reference density is a beta law stretched to ``[a, b]``,
``f*(y) ~ (b - y)^alpha (y - a)^beta``, whose orthonormal polynomials are
rescaled Jacobi polynomials.  Coefficients are ``c_n = E p_n(X)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import special

from .errors import DomainError

PRECISION = 60  # decimal digits for coefficient sums
HANKEL_PRECISION = 150


@dataclass(frozen=True)
class JacobiReference:
    alpha: float = 1.0
    beta: float = 0.05
    a: float = -3.0
    b: float = 70.0

    def __post_init__(self):
        if self.alpha <= -1 or self.beta <= -1:
            raise DomainError("alpha and beta must exceed -1")
        if not self.a < self.b:
            raise DomainError("need a < b")

    def to_unit(self, y):
        return (2 * np.asarray(y, dtype=float) - self.a - self.b) / (self.b - self.a)

    def _check(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y < self.a) or np.any(y > self.b):
            raise DomainError(f"points outside the support [{self.a}, {self.b}]")
        return y

    def density(self, y):
        y = self._check(y)
        u = (y - self.a) / (self.b - self.a)
        return special.beta(self.beta + 1, self.alpha + 1) ** -1 * \
            u ** self.beta * (1 - u) ** self.alpha / (self.b - self.a)

    def cdf(self, y):
        y = self._check(y)
        return special.betainc(self.beta + 1, self.alpha + 1, (y - self.a) / (self.b - self.a))

    def moments(self, N: int, exact: bool = False):
        """Raw moments ``E Y^0..E Y^N`` under the reference.

        ``exact=True`` returns extended-precision values (a list of mpf).
        """
        with mpmath.workdps(HANKEL_PRECISION):
            out = self._moments(N)
        return out if exact else np.array([float(v) for v in out])

    def _moments(self, N):
        bm = [mpmath.mpf(1)]
        a1, b1 = mpmath.mpf(self.beta) + 1, mpmath.mpf(self.alpha) + 1
        for k in range(1, N + 1):
            bm.append(bm[-1] * (a1 + k - 1) / (a1 + b1 + k - 1))
        a, w = mpmath.mpf(self.a), mpmath.mpf(self.b) - mpmath.mpf(self.a)
        out = []
        for n in range(N + 1):
            out.append(mpmath.fsum(mpmath.binomial(n, k) * a ** (n - k) * w ** k * bm[k]
                                   for k in range(n + 1)))
        return out


def _norm(n: int, alpha: float, beta: float) -> float:
    """Normalising constant turning ``q_n`` into an orthonormal polynomial."""
    if n == 0:
        return 1.0
    lg = (special.gammaln(n + 1) + math.log(2 * n + alpha + beta + 1)
          + special.gammaln(alpha + beta + 2 + n - 1) - special.gammaln(alpha + beta + 2)
          - special.gammaln(alpha + 1 + n) + special.gammaln(alpha + 1)
          - special.gammaln(beta + 1 + n) + special.gammaln(beta + 1))
    return math.exp(0.5 * lg)


def jacobi_poly(n: int, alpha: float, beta: float, x, exact: bool = False):
    """Jacobi polynomial ``q_n^(alpha, beta)(x)`` on ``[-1, 1]``.

    ``exact=True`` evaluates the finite Pochhammer sum in extended precision;
    otherwise the stable three-term recurrence is used.
    """
    if n < 0:
        raise DomainError("n must be nonnegative")
    if not exact:
        return special.eval_jacobi(n, alpha, beta, np.asarray(x, dtype=float))
    with mpmath.workdps(PRECISION):
        al, be = mpmath.mpf(alpha), mpmath.mpf(beta)

        def one(xv):
            z = (1 - mpmath.mpf(xv)) / 2
            s = mpmath.fsum(mpmath.rf(al + be + 1 + n, k) * mpmath.rf(-n, k)
                            / (mpmath.rf(al + 1, k) * mpmath.factorial(k)) * z ** k
                            for k in range(n + 1))
            return float(mpmath.rf(al + 1, n) / mpmath.factorial(n) * s)

        xs = np.asarray(x, dtype=float)
        return np.vectorize(one, otypes=[float])(xs) if xs.ndim else one(float(xs))


def orthonormal_p(n: int, alpha: float, beta: float, a: float, b: float, x):
    """Orthonormal polynomial of degree ``n`` for the reference on ``[a, b]``."""
    x = np.asarray(x, dtype=float)
    return _norm(n, alpha, beta) * jacobi_poly(n, alpha, beta, (2 * x - a - b) / (b - a))


@dataclass(frozen=True)
class GCApproximation:
    reference: JacobiReference
    order: int
    coefficients: np.ndarray
    moments: np.ndarray

    def basis(self, y) -> np.ndarray:
        r = self.reference
        return np.array([orthonormal_p(n, r.alpha, r.beta, r.a, r.b, y)
                         for n in range(self.order + 1)])


def gc_coefficients(moments, ref: JacobiReference, N: int) -> np.ndarray:
    """``c_n = E p_n(X)`` for ``n = 0..N`` from ``E X^0..E X^N``.

    The alternating sums span tens of orders of magnitude, so they are
    accumulated in extended precision.
    """
    mom = list(moments)
    if len(mom) < N + 1:
        raise DomainError(f"need {N + 1} moments, got {len(mom)}")
    if abs(mom[0] - 1) > 1e-10:
        raise DomainError("E X^0 must be 1")
    out = []
    with mpmath.workdps(PRECISION):
        al, be = mpmath.mpf(ref.alpha), mpmath.mpf(ref.beta)
        bb, w = mpmath.mpf(ref.b), mpmath.mpf(ref.b) - mpmath.mpf(ref.a)
        m = [mpmath.mpf(v) for v in mom[:N + 1]]
        fact = [mpmath.factorial(k) for k in range(N + 1)]
        inner = []
        for k in range(N + 1):
            s = mpmath.fsum((-1) ** i * bb ** (k - i) / fact[k - i] * m[i] / fact[i]
                            for i in range(k + 1))
            inner.append(s / w ** k)
        for n in range(N + 1):
            s = mpmath.fsum(mpmath.rf(al + be + 1 + n, k) * mpmath.rf(-n, k)
                            / mpmath.rf(al + 1, k) * inner[k] for k in range(n + 1))
            q = mpmath.rf(al + 1, n) / fact[n] * s
            out.append(float(q) * _norm(n, ref.alpha, ref.beta))
    return np.array(out)


def gc_approximation(moments, ref: JacobiReference, N: int) -> GCApproximation:
    c = gc_coefficients(moments, ref, N)
    return GCApproximation(ref, N, c, np.asarray(moments[:N + 1], dtype=float))


def gc_density(approx: GCApproximation, x):
    """Truncated series ``f*(x) sum c_n p_n(x)``; negative values are kept."""
    x = np.asarray(x, dtype=float)
    return approx.reference.density(x) * (approx.coefficients @ approx.basis(x))


def _cdf_weight(n: int, alpha: float, beta: float) -> float:
    """Ratio of the degree-``n`` normaliser (over ``n``) to the shifted-parameter
    degree ``n-1`` normaliser."""
    return math.sqrt((2 + alpha + beta) * (alpha + beta + 3)
                     / (n * (1 + alpha) * (1 + beta) * (alpha + beta + n + 1)))


def gc_cdf_raw(approx: GCApproximation, y):
    """Antiderivative of :func:`gc_density` from ``a``, without clamping."""
    ref = approx.reference
    y = np.asarray(y, dtype=float)
    x = ref.to_unit(y)
    s = np.zeros_like(x)
    for n in range(1, approx.order + 1):
        s = s + approx.coefficients[n] * _cdf_weight(n, ref.alpha, ref.beta) * \
            orthonormal_p(n - 1, ref.alpha + 1, ref.beta + 1, -1.0, 1.0, x)
    return ref.cdf(y) - (ref.b - ref.a) / 4 * (1 - x ** 2) * ref.density(y) * s


def gc_cdf(approx: GCApproximation, y, report: bool = False):
    """Series CDF clamped to ``[0, 1]``; ``report=True`` also returns the clamp count."""
    raw = gc_cdf_raw(approx, y)
    out = np.clip(raw, 0.0, 1.0)
    if report:
        return out, int(np.count_nonzero(out != raw))
    return out


@dataclass
class Quantile:
    value: float
    non_monotone: bool = False

    def __float__(self):
        return self.value


def gc_quantile(approx: GCApproximation, q: float, tol: float = 1e-8,
                scan: int = 4000) -> Quantile:
    """Smallest ``y`` with ``F(y) = q`` on the clamped series CDF.

    ``non_monotone`` is set when the CDF crosses ``q`` more than once.
    """
    if not 0 < q < 1:
        raise DomainError("q must lie in (0, 1)")
    ref = approx.reference
    ys = np.linspace(ref.a, ref.b, scan + 1)
    F = gc_cdf(approx, ys)
    above = F >= q
    if not above.any():
        return Quantile(ref.b, True)
    j = int(np.argmax(above))
    crossings = np.count_nonzero(above[1:] != above[:-1])
    if j == 0:
        return Quantile(ref.a, crossings > 1)
    lo, hi = ys[j - 1], ys[j]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gc_cdf(approx, mid) >= q:
            hi = mid
        else:
            lo = mid
    return Quantile(0.5 * (lo + hi), crossings > 1)


def gc_table(approx: GCApproximation, n_points: int = 501) -> np.ndarray:
    """Columns ``x, density, cdf`` on an even grid over the support."""
    r = approx.reference
    xs = np.linspace(r.a, r.b, n_points)
    return np.column_stack([xs, gc_density(approx, xs), gc_cdf(approx, xs)])


@dataclass
class HankelBasis:
    moments: np.ndarray
    determinants: list  # A_{-1}, A_0, ..., A_N
    coefficients: np.ndarray  # row n holds p_n's coefficients, lowest degree first
    _exact: list = field(default_factory=list, repr=False)

    @property
    def order(self) -> int:
        return self.coefficients.shape[0] - 1

    def evaluate(self, n: int, x):
        """``p_n(x)``, summed in extended precision (the monomial form cancels badly)."""
        coef = self._exact[n][::-1]
        with mpmath.workdps(HANKEL_PRECISION):
            f = lambda v: float(mpmath.polyval(coef, mpmath.mpf(float(v))))
            xs = np.asarray(x, dtype=float)
            return np.vectorize(f, otypes=[float])(xs) if xs.ndim else f(xs)

    def expansion_coefficients(self, moments) -> np.ndarray:
        """``c_n = E p_n(X)`` via the determinant representation."""
        with mpmath.workdps(HANKEL_PRECISION):
            m = [mpmath.mpf(v) for v in moments]
            return np.array([float(mpmath.fsum(self._exact[n][j] * m[j] for j in range(n + 1)))
                             for n in range(self.order + 1)])


def hankel_basis(ref_moments) -> HankelBasis:
    """Orthonormal polynomials for an arbitrary reference from ``a_0..a_{2N}``.

    Hankel matrices of moments are extremely ill-conditioned, so everything is
    done in extended precision; pass exact moments where available.
    """
    mom = list(ref_moments)
    if len(mom) % 2 == 0:
        raise DomainError("need an odd number of moments a_0..a_{2N}")
    N = (len(mom) - 1) // 2
    with mpmath.workdps(HANKEL_PRECISION):
        a = [mpmath.mpf(v) for v in mom]
        A = [mpmath.mpf(1)]
        for n in range(N + 1):
            H = mpmath.matrix([[a[i + j] for j in range(n + 1)] for i in range(n + 1)])
            d = mpmath.det(H)
            scale = mpmath.fprod(mpmath.norm(H[i, :]) for i in range(n + 1))
            if d <= mpmath.mpf(10) ** (-HANKEL_PRECISION + 10) * scale:
                raise DomainError(f"invalid moment sequence: Hankel determinant A_{n} = {d}")
            A.append(d)
        exact = []
        table = np.zeros((N + 1, N + 1))
        for n in range(N + 1):
            if n == 0:
                coef = [1 / mpmath.sqrt(A[1])]
            else:
                rows = [[a[i + j] for j in range(n)] for i in range(n + 1)]
                coef = []
                for j in range(n + 1):
                    minor = mpmath.matrix([r for i, r in enumerate(rows) if i != j])
                    coef.append((-1) ** (j + n) * mpmath.det(minor))
                norm = mpmath.sqrt(A[n] * A[n + 1])
                coef = [c / norm for c in coef]
            exact.append(coef)
            table[n, :n + 1] = [float(c) for c in coef]
    return HankelBasis(np.array([float(v) for v in mom]), [float(v) for v in A], table, exact)
