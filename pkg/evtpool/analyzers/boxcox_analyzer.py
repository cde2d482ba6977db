"""Link-function diagnostics: transformed independent fits against u_L and
Box-Cox profiles for the trend and suit parameters.
"""
import math

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq, minimize_scalar
from scipy.special import boxcox
from scipy.stats import chi2
from sklearn.linear_model import LinearRegression

from ..utils.errors import DomainError, InsufficientDataError
from ..utils.logger import get_logger, log_event
from .pooled_model import fit_event, profile_xi_ci, transformed_params

logger = get_logger('links')

GRID_STEP = 0.01
DELTA_BOUNDS = (-2.0, 2.0)


def _profile(values, covariate):
    y = np.asarray(values, dtype=float)
    X = np.asarray(covariate, dtype=float).reshape(-1, 1)
    n = len(y)
    log_sum = float(np.sum(np.log(y)))

    def loglik(delta):
        z = boxcox(y, delta)
        resid = z - LinearRegression().fit(X, z).predict(X)
        rss = max(float(resid @ resid), np.finfo(float).tiny)
        return -n / 2 * math.log(rss / n) + (delta - 1.0) * log_sum

    return loglik


def boxcox_profile(values, covariate, level=0.95, bounds=DELTA_BOUNDS, step=GRID_STEP):
    """MLE and profile interval of the Box-Cox power making values linear in covariate.

    Sides of the interval that do not cross the cutoff inside ``bounds`` are nan.
    """
    values = np.asarray(values, dtype=float)
    if len(values) < 4:
        raise InsufficientDataError("Box-Cox profile needs at least 4 points", available=len(values))
    if np.any(values <= 0):
        raise DomainError("Box-Cox values must be positive")
    loglik = _profile(values, covariate)

    # 1. Grid, then local refinement
    grid = np.arange(bounds[0], bounds[1] + step / 2, step)
    scores = np.array([loglik(d) for d in grid])
    k = int(np.argmax(scores))
    lo, hi = max(bounds[0], grid[k] - 2 * step), min(bounds[1], grid[k] + 2 * step)
    res = minimize_scalar(lambda d: -loglik(d), bounds=(lo, hi), method='bounded', options={'xatol': 1e-6})
    delta = float(res.x) if -res.fun >= scores[k] else float(grid[k])
    peak = loglik(delta)

    # 2. Profile cutoff
    cutoff = peak - chi2.ppf(level, 1) / 2
    f = lambda d: loglik(d) - cutoff

    def side(edge):
        if f(edge) > 0:
            return math.nan
        a, b = sorted((delta, edge))
        return brentq(f, a, b, xtol=1e-8)

    return delta, (side(bounds[0]), side(bounds[1]))


class LinkAnalyzer:
    """Independent per-event fits on the link scales, plus Box-Cox checks"""

    def analyze(self, datasets, epochs, config, threads=1, xi_interval_events=()):
        datasets = sorted(datasets, key=lambda d: d.event_id)
        issues = []
        fits = Parallel(n_jobs=threads)(delayed(fit_event)(d, epochs, config) for d in datasets)

        # 1. Link-scale parameters
        links = []
        for d, f in zip(datasets, fits):
            row = {'event_id': d.event_id, 'u_L': d.u_L, 'converged': f.converged}
            row.update(transformed_params(f.params, d.threshold_u))
            links.append(row)
            if not f.converged:
                issues.append(f"{d.event_id}: independent fit did not converge")

        # 2. Box-Cox for beta and gamma
        boxcox_rows = []
        for name in ('beta', 'gamma1'):
            values = np.array([getattr(f.params, name) for f in fits])
            keep = values > 0
            if (~keep).any():
                issues.append(f"{int((~keep).sum())} events have {name} <= 0 and are left out of its Box-Cox profile")
            try:
                delta, (lo, hi) = boxcox_profile(values[keep], [d.u_L for d, k in zip(datasets, keep) if k])
            except InsufficientDataError as e:
                issues.append(e.message)
                continue
            boxcox_rows.append({'parameter': 'gamma' if name == 'gamma1' else name, 'n': int(keep.sum()),
                                'delta': delta, 'ci_lo': lo, 'ci_hi': hi})

        # 3. Shape intervals for selected events
        xi_rows = []
        for d in datasets:
            if d.event_id in xi_interval_events:
                xi_hat, lo, hi = profile_xi_ci(d, epochs, config)
                xi_rows.append({'event_id': d.event_id, 'xi': xi_hat, 'ci_lo': lo, 'ci_hi': hi})

        log_event(logger, 'link_diagnostics', events=len(links), boxcox=len(boxcox_rows), xi_intervals=len(xi_rows))
        details = {'boxcox': {r['parameter']: r['delta'] for r in boxcox_rows}}
        return {'links': links, 'boxcox': boxcox_rows, 'xi_intervals': xi_rows, 'issues': issues, 'details': details}
