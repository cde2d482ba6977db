"""World-record analytics: ultimate times, next-record size and timing.

Forecast horizons are in years after the forecast origin (by default the end
of the observation window). The fitted linear trend is extrapolated while the
scale sigma(t) stays positive; past that point the rate is unbounded, so the
survival of the waiting time has already reached zero.
"""
import math
from dataclasses import dataclass
from datetime import date

import numpy as np
from scipy.integrate import quad, quad_vec
from scipy.optimize import brentq

from ..utils.errors import (
    DomainError,
    EnsembleDegeneracyError,
    NoFiniteEndpointError,
    QuadratureAccuracyError,
    RecordBeyondModelError,
)
from ..utils.evt import quadrature_nodes, tail_term, upper_endpoint
from ..utils.logger import get_logger, log_event
from ..utils.swim_loader import decimal_year

logger = get_logger('records')

SURVIVAL_FLOOR = 1e-10
HORIZON_YEARS = 500.0
QUAD_ABS_TOL = 1e-8
SUM_TOLERANCE = 2e-3
EDGE = 1e-9


@dataclass(frozen=True)
class RecordState:
    event_id: str
    record_x: float
    record_date: object
    holder: str | None = None

    @property
    def time_s(self):
        return -self.record_x


def current_records(datasets):
    """Fastest swim of each event"""
    records = {}
    for d in datasets:
        i = d.record_index
        records[d.event_id] = RecordState(d.event_id, float(d.x[i]), d.dates[i], d.swimmer_ids[i])
    return records


def ultimate_time(fitted, event_id):
    """Fitted upper endpoint, in seconds"""
    gpd = fitted.gpd(event_id)
    if gpd.xi >= 0:
        raise NoFiniteEndpointError(f"{event_id} has xi >= 0 and no finite ultimate time", xi=gpd.xi)
    return -upper_endpoint(gpd)


def sigma_at_record(fitted, event_id, record_x):
    return fitted.sigma_tilde(event_id) + fitted.per_event[event_id].xi * (record_x - fitted.thresholds[event_id])


def expected_next_record(fitted, event_id, record):
    """Mean of the next record given it beats the current one, in seconds"""
    xi = fitted.per_event[event_id].xi
    if xi >= 1:
        raise DomainError("Expected next record needs xi < 1", xi=xi)
    scale = sigma_at_record(fitted, event_id, record.record_x)
    if not scale > 0:
        raise RecordBeyondModelError(f"{event_id} record lies beyond the fitted endpoint", scale=scale)
    return -(record.record_x + scale / (1.0 - xi))


def record_survival(fitted, event_id, record_x):
    """P(a swim above u_e also beats record_x)"""
    gpd = fitted.gpd(event_id)
    return float(tail_term((record_x - gpd.u) / gpd.sigma_tilde, gpd.xi))


def forecast_origin(fitted, origin=None):
    """Origin as a decimal year; defaults to the end of the observation window"""
    if origin is None:
        return max(s.year_boundaries[-1] for s in fitted.scalers.values())
    if isinstance(origin, (int, float)):
        return float(origin)
    if isinstance(origin, str):
        origin = date.fromisoformat(origin)
    return decimal_year(origin)


class _Forecast:
    """Exceedance-of-record hazard of one event on a years-after-origin axis"""

    def __init__(self, fitted, event_id, record_x, origin, abs_tol=QUAD_ABS_TOL):
        self.abs_tol = abs_tol
        self.scaler = fitted.scaler(event_id)
        self.path = fitted.path(event_id)
        self.u = fitted.thresholds[event_id]
        self.p = record_survival(fitted, event_id, record_x)
        self.t0 = float(self.scaler.standardize(origin))
        t_star = self.path.feasible_horizon()
        self.max_years = (t_star - self.t0) * self.scaler.sd if math.isfinite(t_star) else math.inf

    def _std(self, years):
        return self.t0 + np.asarray(years, dtype=float) / self.scaler.sd

    def hazard_rate(self, years):
        """Records per year at `years` after the origin"""
        if np.any(np.asarray(years) >= self.max_years):
            return math.inf
        rate = self.path.instantaneous_rate(self._std(years), self.u)
        return self.p * rate / self.scaler.sd

    def cumulative_hazard(self, years):
        if years <= 0:
            return 0.0
        if years >= self.max_years or self.p == 0.0:
            return math.inf if self.p > 0 else 0.0
        value, _ = quad(lambda t: self.path.instantaneous_rate(t, self.u), self.t0, float(self._std(years)),
                        epsabs=self.abs_tol, epsrel=1e-10, limit=200, points=self._breaks(years))
        return self.p * value

    def cumulative_hazard_gl(self, years):
        """Composite Gauss-Legendre version with one-year panels"""
        if years <= 0:
            return 0.0
        if years >= self.max_years:
            return math.inf
        edges = np.arange(1.0, years, 1.0)
        nodes, weights = quadrature_nodes(0.0, years, tuple(edges))
        return self.p * float(np.dot(weights, self.path.instantaneous_rate(self._std(nodes), self.u))) / self.scaler.sd

    def _breaks(self, years):
        end = float(self._std(years))
        inner = [b for b in self.path.breakpoints if self.t0 < b < end]
        return inner or None


def _truncation_point(cumulative, target, cap):
    """Smallest horizon with cumulative hazard >= target (doubling + brentq), or cap"""
    hi = 1.0
    while hi < cap and cumulative(hi) < target:
        hi *= 2.0
    if hi >= cap:
        cap_in = cap * (1 - EDGE) if math.isfinite(cap) else cap
        if not math.isfinite(cap_in) or cumulative(cap_in) < target:
            return cap_in, False
        hi = cap_in
    lo = hi / 2.0 if hi > 1.0 else 0.0
    return brentq(lambda y: cumulative(y) - target, lo, hi, xtol=1e-10), True


def record_waiting_cdf(fitted, event_id, record, t, origin=None, abs_tol=QUAD_ABS_TOL):
    """P(record broken within t years of the origin)"""
    if t < 0:
        raise DomainError("Waiting time must be nonnegative")
    fc = _Forecast(fitted, event_id, record.record_x, forecast_origin(fitted, origin), abs_tol)
    return 1.0 - math.exp(-fc.cumulative_hazard(t))


def record_waiting_density(fitted, event_id, record, t, origin=None):
    if t < 0:
        raise DomainError("Waiting time must be nonnegative")
    fc = _Forecast(fitted, event_id, record.record_x, forecast_origin(fitted, origin))
    if t >= fc.max_years:
        return 0.0
    return float(fc.hazard_rate(t)) * math.exp(-fc.cumulative_hazard(t))


def expected_waiting_time(fitted, event_id, record, origin=None, floor=SURVIVAL_FLOOR, horizon=HORIZON_YEARS,
                          abs_tol=QUAD_ABS_TOL):
    """E[T] in years: integral of the survival up to where it drops below floor.

    Returns inf when the survival is still above floor at the horizon.
    """
    fc = _Forecast(fitted, event_id, record.record_x, forecast_origin(fitted, origin), abs_tol)
    if fc.p == 0.0:
        log_event(logger, 'waiting_time_divergent', level=30, event_id=event_id, reason='record at endpoint')
        return math.inf
    cap = min(horizon, fc.max_years)
    end, reached = _truncation_point(fc.cumulative_hazard, -math.log(floor), cap)
    if not reached and cap == horizon:
        log_event(logger, 'waiting_time_divergent', level=30, event_id=event_id, horizon=horizon)
        return math.inf
    value, _ = quad(lambda y: math.exp(-fc.cumulative_hazard(y)), 0.0, end, epsabs=abs_tol, limit=200)
    return value


def prob_next_record_in_event(fitted, records, origin=None, floor=SURVIVAL_FLOOR, horizon=HORIZON_YEARS,
                              sum_tolerance=SUM_TOLERANCE, raw=False, abs_tol=QUAD_ABS_TOL):
    """Probability that the next record of all events falls in each event.

    Integrates h_e(t) exp(-sum_k H_k(t)) with adaptive Gauss-Kronrod; the
    cumulative hazards use Gauss-Legendre panels. Raw values must sum to one
    within sum_tolerance before they are renormalised.
    """
    o = forecast_origin(fitted, origin)
    events = sorted(e for e in records if e in fitted.per_event)
    forecasts = [_Forecast(fitted, e, records[e].record_x, o) for e in events]
    cap = min([horizon] + [fc.max_years for fc in forecasts])

    def total_hazard(y):
        return sum(fc.cumulative_hazard_gl(y) for fc in forecasts)

    end, _ = _truncation_point(total_hazard, -math.log(floor), cap)

    def integrand(y):
        survival = math.exp(-total_hazard(y))
        return np.array([float(fc.hazard_rate(y)) for fc in forecasts]) * survival

    probs, _ = quad_vec(integrand, 0.0, end, epsabs=abs_tol, limit=400)
    total = float(np.sum(probs))
    log_event(logger, 'next_record_probabilities', raw_sum=total, horizon=end)
    if abs(total - 1.0) > sum_tolerance:
        raise QuadratureAccuracyError(f"Next-record probabilities sum to {total:.6f}", raw_sum=total)
    result = dict(zip(events, probs.tolist() if raw else (probs / total).tolist()))
    return result


class RecordAnalyzer:
    """Ultimate times and record forecasts for every event"""

    def analyze(self, fitted, datasets, ensemble=None, origin=None, forecast=None):
        from .bootstrap_analyzer import ci, predictive_record_quantile

        forecast = forecast or {}
        floor = forecast.get('survival_floor', SURVIVAL_FLOOR)
        horizon = forecast.get('horizon_years', HORIZON_YEARS)
        tolerance = forecast.get('sum_tolerance', SUM_TOLERANCE)
        abs_tol = forecast.get('quad_abs_tol', QUAD_ABS_TOL)
        origin = origin if origin is not None else forecast.get('origin')
        records = current_records(datasets)
        issues = []
        ultimate_rows, next_rows, waiting_rows = [], [], []

        def interval(stat):
            if ensemble is None:
                return None, None
            try:
                return ci(stat, ensemble)
            except EnsembleDegeneracyError as e:
                if e.message not in issues:
                    issues.append(e.message)
                return None, None

        for event_id in sorted(records):
            record = records[event_id]
            gpd = fitted.gpd(event_id)
            # 1. Ultimate time
            try:
                ult = ultimate_time(fitted, event_id)
            except NoFiniteEndpointError:
                ult = math.nan
                issues.append(f"{event_id}: xi >= 0, no finite ultimate time")
            lo, hi = interval(lambda m: ultimate_time(m, event_id))
            ultimate_rows.append({'event_id': event_id, 'u': gpd.u, 'sigma_tilde': gpd.sigma_tilde, 'xi': gpd.xi,
                                  'ultimate_s': ult, 'ci_lo': lo, 'ci_hi': hi})

            # 2. Expected next record
            try:
                nxt = expected_next_record(fitted, event_id, record)
            except RecordBeyondModelError:
                nxt = math.nan
                issues.append(f"{event_id}: current record is beyond the fitted endpoint")
            lo, hi = interval(lambda m: expected_next_record(m, event_id, record))
            pred_lo = pred_hi = None
            if ensemble is not None:
                pred_lo = -predictive_record_quantile(ensemble, event_id, 0.975, record.record_x)
                pred_hi = -predictive_record_quantile(ensemble, event_id, 0.025, record.record_x)
            next_rows.append({
                'event_id': event_id, 'record_s': record.time_s, 'record_date': record.record_date.isoformat(),
                'holder': record.holder, 'expected_next_s': nxt,
                'improvement_pct': 100.0 * (record.time_s - nxt) / record.time_s if math.isfinite(nxt) else math.nan,
                'ci_lo': lo, 'ci_hi': hi, 'pred_lo': pred_lo, 'pred_hi': pred_hi,
            })

            # 3. Waiting time
            wait = expected_waiting_time(fitted, event_id, record, origin, floor, horizon, abs_tol)
            if math.isinf(wait):
                issues.append(f"{event_id}: expected waiting time diverges within {horizon} years")
            lo, hi = interval(lambda m: expected_waiting_time(m, event_id, record, origin, floor, horizon, abs_tol))
            row = {'event_id': event_id, 'expected_wait_years': wait, 'ci_lo': lo, 'ci_hi': hi}
            for years in (1, 5, 10):
                row[f'p_within_{years}y'] = record_waiting_cdf(fitted, event_id, record, years, origin, abs_tol)
            waiting_rows.append(row)

        # 4. Which event sees the next record
        raw = prob_next_record_in_event(fitted, records, origin, floor, horizon, tolerance, raw=True,
                                        abs_tol=abs_tol)
        total = sum(raw.values())
        prob_rows = []
        replicate_probs = []
        if ensemble is not None:
            for m in ensemble.models():
                try:
                    replicate_probs.append(prob_next_record_in_event(m, records, origin, floor, horizon, tolerance,
                                                                     abs_tol=abs_tol))
                except QuadratureAccuracyError:
                    issues.append("A bootstrap replicate failed the next-record probability check")
        for event_id, value in raw.items():
            lo = hi = None
            if len(replicate_probs) >= 20:
                samples = np.array([p[event_id] for p in replicate_probs])
                lo = float(np.quantile(samples, 0.025, method='lower'))
                hi = float(np.quantile(samples, 0.975, method='higher'))
            prob_rows.append({'event_id': event_id, 'probability': value / total, 'raw': value,
                              'ci_lo': lo, 'ci_hi': hi})

        details = {
            'origin': forecast_origin(fitted, origin),
            'most_likely_next_record': max(prob_rows, key=lambda r: r['probability'])['event_id'] if prob_rows else None,
            'raw_probability_sum': total,
        }
        return {'ultimate': ultimate_rows, 'next_record': next_rows, 'waiting': waiting_rows,
                'next_event_prob': prob_rows, 'issues': issues, 'details': details}
