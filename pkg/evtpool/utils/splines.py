"""B-spline basis and penalties for the pooled log-scale link.

Basis evaluation goes through scipy's Cox-de Boor implementation; the
monotonicity penalty locates stationary points exactly from the piecewise
polynomial form of the derivative.
"""
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline, PPoly

from .errors import DimensionError, DomainError

DOMAIN_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SplineBasis:
    degree: int
    knots: tuple
    clamped: bool = True

    def __post_init__(self):
        t = np.asarray(self.knots, dtype=float)
        if self.degree < 1:
            raise DimensionError("Spline degree must be at least 1")
        if len(t) < 2 * (self.degree + 1):
            raise DimensionError("Too few knots for the spline degree")
        if np.any(np.diff(t) < 0):
            raise DomainError("Knots must be nondecreasing")
        if np.any(np.diff(t[self.degree:-self.degree]) <= 0):
            raise DomainError("Interior knots must be strictly increasing")

    @classmethod
    def uniform(cls, lo, hi, q=10, degree=4, margin=0.01, clamped=True):
        """q basis functions, equally spaced knots over [lo - m, hi + m].

        ``margin`` is a fraction of (hi - lo). A clamped basis repeats each end
        knot degree + 1 times; otherwise the knot grid extends past the domain.
        """
        if q < degree + 1:
            raise DimensionError(f"q={q} is too small for degree {degree}")
        width = hi - lo if hi > lo else 1.0
        a, b = lo - margin * width, hi + margin * width
        n_inner = q - degree - 1
        if clamped:
            inner = np.linspace(a, b, n_inner + 2)[1:-1]
            knots = np.concatenate([np.full(degree + 1, a), inner, np.full(degree + 1, b)])
        else:
            h = (b - a) / (q - degree)
            knots = a + h * np.arange(-degree, q + 1)
        return cls(degree=degree, knots=tuple(float(k) for k in knots), clamped=clamped)

    @property
    def t(self):
        return np.asarray(self.knots, dtype=float)

    @property
    def q(self):
        return len(self.knots) - self.degree - 1

    @property
    def domain(self):
        t = self.t
        return float(t[self.degree]), float(t[self.q])

    def greville(self):
        """Greville abscissae; coefficients a_k = c0 + c1 g_k reproduce c0 + c1 x"""
        t, d = self.t, self.degree
        return np.array([t[k + 1:k + d + 1].mean() for k in range(self.q)])

    def design_matrix(self, x):
        x = self._check(x)
        return BSpline.design_matrix(x, self.t, self.degree).toarray()

    def spline(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (self.q,):
            raise DimensionError(f"Expected {self.q} coefficients, got {a.shape}")
        return BSpline(self.t, a, self.degree, extrapolate=False)

    def _check(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.domain
        if np.any(x < lo - DOMAIN_TOLERANCE) or np.any(x > hi + DOMAIN_TOLERANCE):
            raise DomainError(f"Spline argument outside [{lo}, {hi}]")
        return np.clip(x, lo, hi)

    def to_dict(self):
        return {'degree': self.degree, 'knots': list(self.knots), 'clamped': self.clamped}

    @classmethod
    def from_dict(cls, data):
        return cls(degree=int(data['degree']), knots=tuple(data['knots']), clamped=bool(data['clamped']))


def basis_eval(x, basis):
    """Values of the q basis functions at scalar x"""
    return basis.design_matrix(x)[0]


def spline_eval(x, a, basis):
    x_arr = basis._check(x)
    y = basis.spline(a)(x_arr)
    return float(y[0]) if np.ndim(x) == 0 else y


def derivative_eval(x, a, basis):
    x_arr = basis._check(x)
    y = basis.spline(a).derivative()(x_arr)
    return float(y[0]) if np.ndim(x) == 0 else y


def build_penalty_matrix(q):
    """Second-order difference penalty P = D2' D2"""
    if q < 3:
        raise DimensionError("Second-order penalty needs q >= 3")
    d2 = np.diff(np.eye(q), 2, axis=0)
    return d2.T @ d2


def roughness_penalty(a, P):
    a = np.asarray(a, dtype=float)
    if P.shape != (a.size, a.size):
        raise DimensionError(f"Penalty {P.shape} does not match {a.size} coefficients")
    return float(max(a @ P @ a, 0.0))


def stationary_points(a, basis, lo=None, hi=None):
    """Roots of the derivative on each polynomial piece inside [lo, hi]"""
    dom_lo, dom_hi = basis.domain
    lo = dom_lo if lo is None else lo
    hi = dom_hi if hi is None else hi
    if basis.degree < 2:
        return np.array([])
    deriv = basis.spline(a).derivative()
    pp = PPoly.from_spline(deriv, extrapolate=False)
    roots = pp.roots(discontinuity=False, extrapolate=False)
    roots = roots[np.isfinite(roots)]
    return np.unique(roots[(roots > lo) & (roots < hi)])


def monotonicity_penalty(a, basis, lo=None, hi=None):
    """Total decrease of the spline over [lo, hi].

    Sums the negative increments between consecutive points of
    {lo} + stationary points + {hi}; zero iff the spline is nondecreasing.
    """
    dom_lo, dom_hi = basis.domain
    lo = dom_lo if lo is None else max(lo, dom_lo)
    hi = dom_hi if hi is None else min(hi, dom_hi)
    if hi <= lo:
        return 0.0
    z = np.concatenate([[lo], stationary_points(a, basis, lo, hi), [hi]])
    values = basis.spline(a)(z)
    steps = np.diff(values)
    return float(-np.sum(steps[steps < 0]))
