"""Extreme-value primitives: GEV/GPd laws and the Poisson-process intensity.

All functions accept numpy arrays where it makes sense. The shape parameter
switches to the exponential/Gumbel limit when |xi| < XI_ZERO.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np

from .errors import DomainError, NoFiniteEndpointError, NumericalError, ParameterError

XI_ZERO = 1e-9
GL_NODES = 32
NEGATIVE_TOLERANCE = 1e-13


@dataclass(frozen=True)
class GevParams:
    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not np.all(np.asarray(self.sigma) > 0):
            raise ParameterError("GEV scale must be positive", sigma=float(np.min(self.sigma)))


@dataclass(frozen=True)
class GpdParams:
    u: float
    sigma_tilde: float
    xi: float

    def __post_init__(self):
        if not self.sigma_tilde > 0:
            raise ParameterError("GPd scale must be positive", sigma_tilde=self.sigma_tilde)


class ParameterPath(Protocol):
    """Time-varying GEV parameters: path(t) -> (mu, sigma, xi) arrays"""
    breakpoints: tuple

    def __call__(self, t): ...


class FunctionPath:
    """Wrap three callables of standardized time"""

    def __init__(self, mu, sigma, xi, breakpoints=()):
        self._mu, self._sigma, self._xi = mu, sigma, xi
        self.breakpoints = tuple(breakpoints)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return (np.broadcast_to(self._mu(t), t.shape).astype(float),
                np.broadcast_to(self._sigma(t), t.shape).astype(float),
                np.broadcast_to(self._xi(t), t.shape).astype(float))


class ConstantPath:
    def __init__(self, params):
        self.params = params
        self.breakpoints = ()

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        return np.full(t.shape, p.mu), np.full(t.shape, p.sigma), np.full(t.shape, p.xi)


def tail_term(z, xi):
    """[1 + xi z]_+^(-1/xi), the GEV/GPd tail kernel.

    Below the lower endpoint (xi > 0) the kernel is +inf, above the upper
    endpoint (xi < 0) it is 0.
    """
    z, xi = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(xi, dtype=float))
    out = np.empty(z.shape)
    gumbel = np.abs(xi) < XI_ZERO
    with np.errstate(over='ignore', divide='ignore', invalid='ignore'):
        out[gumbel] = np.exp(-z[gumbel])
        general = ~gumbel
        xg, zg = xi[general], z[general]
        base = 1.0 + xg * zg
        inside = base > 0
        vals = np.where(xg < 0, 0.0, np.inf)
        vals[inside] = base[inside] ** (-1.0 / xg[inside])
        out[general] = vals
    return out if out.ndim else float(out)


def gev_cdf(x, p):
    return np.exp(-tail_term((np.asarray(x, dtype=float) - p.mu) / p.sigma, p.xi))


def _check_above_threshold(x, p):
    x = np.asarray(x, dtype=float)
    if np.any(x < p.u):
        raise DomainError("GPd is defined above its threshold", u=p.u)
    return x


def gpd_survival(x, p):
    """P(X > x | X > u)"""
    x = _check_above_threshold(x, p)
    return tail_term((x - p.u) / p.sigma_tilde, p.xi)


def gpd_cdf(x, p):
    return 1.0 - gpd_survival(x, p)


def gpd_density(x, p):
    x = _check_above_threshold(x, p)
    z = (x - p.u) / p.sigma_tilde
    if abs(p.xi) < XI_ZERO:
        return np.exp(-z) / p.sigma_tilde
    base = 1.0 + p.xi * z
    with np.errstate(divide='ignore', invalid='ignore'):
        dens = np.where(base > 0, np.abs(base) ** (-1.0 / p.xi - 1.0) / p.sigma_tilde, 0.0)
    return dens if np.ndim(dens) else float(dens)


def gpd_quantile(prob, p):
    prob = np.asarray(prob, dtype=float)
    if np.any((prob < 0) | (prob >= 1)) or np.any(np.isnan(prob)):
        raise DomainError("GPd quantile needs probabilities in [0, 1)")
    if abs(p.xi) < XI_ZERO:
        q = p.u - p.sigma_tilde * np.log1p(-prob)
    else:
        q = p.u + p.sigma_tilde / p.xi * ((1.0 - prob) ** (-p.xi) - 1.0)
    return q if q.ndim else float(q)


def upper_endpoint(p):
    if p.xi >= 0:
        raise NoFiniteEndpointError("Upper endpoint exists only for xi < 0", xi=p.xi)
    return p.u - p.sigma_tilde / p.xi


def intensity(t, x, theta):
    """Point-process intensity density at (t, x) for GEV parameters theta(t)"""
    if not np.all(np.asarray(theta.sigma) > 0):
        raise ParameterError("Intensity needs sigma(t) > 0")
    z = (np.asarray(x, dtype=float) - theta.mu) / theta.sigma
    if abs(float(np.max(np.abs(theta.xi)))) < XI_ZERO:
        return np.exp(-z) / theta.sigma
    base = 1.0 + theta.xi * z
    with np.errstate(divide='ignore', invalid='ignore'):
        lam = np.where(base > 0, np.abs(base) ** (-1.0 / theta.xi - 1.0) / theta.sigma, 0.0)
    return lam if np.ndim(lam) else float(lam)


@lru_cache(maxsize=8)
def gauss_legendre(n=GL_NODES):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def panel_edges(t_a, t_b, breakpoints=()):
    inner = sorted(b for b in breakpoints if t_a < b < t_b)
    return np.array([t_a, *inner, t_b], dtype=float)


def quadrature_nodes(t_a, t_b, breakpoints=(), n=GL_NODES):
    """Composite Gauss-Legendre nodes/weights with panels split at breakpoints"""
    edges = panel_edges(t_a, t_b, breakpoints)
    x, w = gauss_legendre(n)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = (hi - lo) / 2
    nodes = (lo + hi) / 2 + half * x
    return nodes.ravel(), (half * w).ravel()


def exceedance_rate(t, u, path):
    """[1 + xi(u - mu(t))/sigma(t)]_+^(-1/xi) along a parameter path"""
    mu, sigma, xi = path(t)
    if np.any(sigma <= 0):
        raise ParameterError("sigma(t) must be positive along the path")
    return tail_term((u - mu) / sigma, xi)


def integrated_intensity(window, u, path, breakpoints=None):
    """Expected number of exceedances of u over a standardized time window"""
    t_a, t_b = window
    if t_b < t_a:
        raise DomainError("Window must satisfy t_a <= t_b")
    if t_b == t_a:
        return 0.0
    bps = path.breakpoints if breakpoints is None else breakpoints
    nodes, weights = quadrature_nodes(t_a, t_b, bps)
    rate = exceedance_rate(nodes, u, path)
    if not np.all(np.isfinite(rate)):
        raise ParameterError("Non-finite intensity inside the window")
    return float(np.dot(weights, rate))


def cumulative_intensity(grid, u, path, breakpoints=None):
    """Lambda(grid[0], grid[k]) for every knot of an increasing grid"""
    grid = np.asarray(grid, dtype=float)
    bps = path.breakpoints if breakpoints is None else breakpoints
    pieces = [integrated_intensity((a, b), u, path, bps) for a, b in zip(grid[:-1], grid[1:])]
    return np.concatenate([[0.0], np.cumsum(pieces)])


def straddles_breakpoint(t_a, t_b, breakpoints):
    return any(t_a < b < t_b for b in breakpoints)


def yearly_rate_approx(year_index, u, path, year_boundaries):
    """Expected exceedances in one year from the mid-year rate.

    Years with a parameter jump strictly inside them are integrated exactly.
    """
    y0, y1 = float(year_boundaries[year_index]), float(year_boundaries[year_index + 1])
    if straddles_breakpoint(y0, y1, path.breakpoints):
        return integrated_intensity((y0, y1), u, path)
    mid = np.array([(y0 + y1) / 2])
    return float(exceedance_rate(mid, u, path)[0]) * (y1 - y0)


def censored_terms(x, s, mu, sigma, xi):
    """Probability mass of the rounding interval [x - s/2, x + s/2] (vectorized)"""
    x, mu, sigma, xi = (np.asarray(a, dtype=float) for a in (x, mu, sigma, xi))
    if np.any(sigma <= 0):
        raise ParameterError("sigma(t) must be positive at every point")
    lower = tail_term((x - s / 2 - mu) / sigma, xi)
    upper = tail_term((x + s / 2 - mu) / sigma, xi)
    with np.errstate(invalid='ignore'):
        mass = lower - upper
    if np.any(mass < -NEGATIVE_TOLERANCE):
        raise NumericalError("Censored term is negative beyond round-off", minimum=float(np.min(mass)))
    return np.maximum(mass, 0.0)


def censored_term(x_i, s, theta):
    return float(censored_terms(x_i, s, theta.mu, theta.sigma, theta.xi))


def event_log_likelihood(data, path, s=None, window=None):
    """-Lambda(window) + sum_i log P(rounding interval of x_i at t_i).

    Infeasible parameters give -inf rather than an exception.
    """
    s = data.censor_s if s is None else s
    window = window or data.window
    try:
        lam = integrated_intensity(window, data.threshold_u, path)
        if len(data.x) == 0:
            return -lam
        mu, sigma, xi = path(data.t_std)
        terms = censored_terms(data.x, s, mu, sigma, xi)
    except (ParameterError, NumericalError):
        return -np.inf
    if np.any(terms <= 0) or not np.all(np.isfinite(terms)):
        return -np.inf
    return float(np.sum(np.log(terms)) - lam)
