"""Goodness-of-fit checks: pooled PP plot data and per-year exceedance counts"""
import numpy as np
from scipy.stats import beta, poisson

from ..utils.evt import gpd_cdf, integrated_intensity
from ..utils.logger import get_logger, log_event

logger = get_logger('diagnostics')

PP_LEVEL = 0.95


def pooled_pp(fitted, datasets, window=None, level=PP_LEVEL):
    """Probability-integral values of every exceedance, pooled over events.

    ``window`` is an optional (first, last) pair of calendar years, both included;
    points outside it are left out. Bands are pointwise order-statistic beta quantiles.
    """
    probs, events = [], []
    for d in sorted(datasets, key=lambda d: d.event_id):
        keep = np.ones(len(d), dtype=bool)
        if window is not None:
            keep = (d.decimal_years >= window[0]) & (d.decimal_years < window[1] + 1)
        if not keep.any():
            continue
        probs.append(np.atleast_1d(gpd_cdf(d.x[keep], fitted.gpd(d.event_id))))
        events += [d.event_id] * int(keep.sum())
    if not probs:
        return []
    p = np.concatenate(probs)
    order = np.argsort(p, kind='stable')
    n = len(p)
    i = np.arange(1, n + 1)
    alpha = 1.0 - level
    lo = beta.ppf(alpha / 2, i, n + 1 - i)
    hi = beta.ppf(1 - alpha / 2, i, n + 1 - i)
    expected = i / (n + 1)
    return [
        {'rank': int(k), 'event_id': events[j], 'expected': float(e), 'observed': float(p[j]),
         'difference': float(p[j] - e), 'band_lo': float(b0 - e), 'band_hi': float(b1 - e)}
        for k, j, e, b0, b1 in zip(i, order, expected, lo, hi)
    ]


def _expected_counts(model, event_id, boundaries_std):
    u, path = model.thresholds[event_id], model.path(event_id)
    return np.array([integrated_intensity((a, b), u, path) for a, b in zip(boundaries_std[:-1], boundaries_std[1:])])


def rate_check(fitted, dataset, ensemble=None, level=PP_LEVEL):
    """Expected and observed exceedances of u_e per calendar year.

    Intervals are bootstrap percentiles of the expected count when an ensemble
    is given, otherwise Poisson quantiles around the fitted expectation.
    """
    event_id = dataset.event_id
    scaler = fitted.scaler(event_id)
    years = np.asarray(scaler.year_boundaries)
    expected = _expected_counts(fitted, event_id, scaler.boundaries_std)
    observed, _ = np.histogram(dataset.decimal_years, bins=years)
    alpha = 1.0 - level
    if ensemble is not None and ensemble.models():
        samples = np.array([_expected_counts(m, event_id, scaler.boundaries_std) for m in ensemble.models()])
        lo = np.quantile(samples, alpha / 2, axis=0, method='lower')
        hi = np.quantile(samples, 1 - alpha / 2, axis=0, method='higher')
    else:
        lo = poisson.ppf(alpha / 2, expected)
        hi = poisson.ppf(1 - alpha / 2, expected)
    return [
        {'event_id': event_id, 'year': int(y), 'expected': float(e), 'observed': int(o),
         'ci_lo': float(a), 'ci_hi': float(b)}
        for y, e, o, a, b in zip(years[:-1], expected, observed, lo, hi)
    ]


class DiagnosticsAnalyzer:
    """PP plot and yearly rate checks for a fitted model"""

    def analyze(self, fitted, datasets, ensemble=None, window=None):
        issues = []
        details = {}

        # 1. Pooled PP
        pp = pooled_pp(fitted, datasets, window=window)
        outside = sum(not (r['band_lo'] <= r['difference'] <= r['band_hi']) for r in pp)
        details['pp_points'] = len(pp)
        details['pp_outside_band'] = outside
        if pp and outside > (1 - PP_LEVEL) * len(pp):
            issues.append(f"{outside} of {len(pp)} PP points fall outside the {PP_LEVEL:.0%} band")

        # 2. Per-year counts
        rates = {}
        misses = 0
        cells = 0
        for d in sorted(datasets, key=lambda d: d.event_id):
            rows = rate_check(fitted, d, ensemble=ensemble)
            rates[d.event_id] = rows
            cells += len(rows)
            misses += sum(not (r['ci_lo'] <= r['observed'] <= r['ci_hi']) for r in rows)
        details['event_years'] = cells
        details['event_years_outside'] = misses
        if cells and misses > 0.1 * cells:
            issues.append(f"{misses} of {cells} event-years have counts outside their interval")
        log_event(logger, 'diagnostics', pp_points=len(pp), pp_outside=outside, event_years_outside=misses)
        return {'pp': pp, 'rates': rates, 'issues': issues, 'details': details}
