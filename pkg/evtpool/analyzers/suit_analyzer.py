"""Swim-suit adjustment of times and would-be world records"""
import math

import numpy as np

from ..utils.errors import ConsistencyError, DomainError, NotRankableError
from ..utils.evt import XI_ZERO, tail_term
from ..utils.logger import get_logger, log_event
from ..utils.swim_loader import suit_indicator

logger = get_logger('suits')

DIRECTIONS = ('remove', 'add1', 'add2')
NO_SUIT = (0.0, 0.0)


def _flags(direction, swim_date, epochs):
    """(source flags, target flags) for an adjustment direction"""
    if direction == 'remove':
        in1, in2 = suit_indicator(swim_date, epochs)
        if not (in1 or in2):
            raise DomainError(f"{swim_date.isoformat()} is outside both suit epochs", direction=direction)
        return (float(in1), float(in2)), NO_SUIT
    if direction in ('add1', 'add2'):
        return NO_SUIT, (1.0, 0.0) if direction == 'add1' else (0.0, 1.0)
    raise DomainError(f"Unknown adjustment direction {direction!r}; expected one of {', '.join(DIRECTIONS)}")


def adjust_suit_time(fitted, event_id, x, swim_date, direction='remove'):
    """Swim time (seconds, unrounded) with the same tail rate under other suit conditions.

    Solves H(z) * rate_target = H(x) * rate_source, the rates taken at the
    middle of the swim's calendar year.
    """
    gpd = fitted.gpd(event_id)
    u, s_tilde, xi = gpd.u, gpd.sigma_tilde, gpd.xi
    if not x > u:
        raise NotRankableError(f"Swim {-x:.2f}s is not above the {event_id} threshold", event_id=event_id)
    source, target = _flags(direction, swim_date, fitted.suit_epochs)

    # 1. Rate ratio at mid-year
    scaler, path = fitted.scaler(event_id), fitted.path(event_id)
    mid = float(np.mean(scaler.year_window_std(swim_date.year)))
    rate_src = path.instantaneous_rate(mid, u, source)
    rate_tgt = path.instantaneous_rate(mid, u, target)
    if not (0 < rate_tgt < math.inf and 0 < rate_src < math.inf):
        raise ConsistencyError(f"{event_id}: suit rates are not finite in {swim_date.year}",
                               rate_source=rate_src, rate_target=rate_tgt)

    # 2. Match the tail probability
    ratio = rate_src * float(tail_term((x - u) / s_tilde, xi)) / rate_tgt
    if ratio >= 1.0:
        raise ConsistencyError(f"{event_id}: adjusted swim falls below the threshold", ratio=ratio)
    if ratio <= 0.0:
        raise ConsistencyError(f"{event_id}: swim lies at the fitted ultimate time", ratio=ratio)
    if abs(xi) < XI_ZERO:
        z = u - s_tilde * math.log(ratio)
    else:
        z = u + s_tilde / xi * (ratio ** (-xi) - 1.0)
        if xi < 0 and z > u - s_tilde / xi:
            raise ConsistencyError(f"{event_id}: adjusted time is faster than the ultimate time", z=-z)
    log_event(logger, 'suit_adjust', event_id=event_id, direction=direction, time_s=-x, adjusted_s=-z)
    return -z


def _outside_epochs(dates, epochs):
    return np.array([not any(suit_indicator(d, epochs)) for d in dates])


def would_be_records(fitted, datasets):
    """Suit-era world records against the best swim outside the suit epochs"""
    rows = []
    for d in sorted(datasets, key=lambda d: d.event_id):
        if d.event_id not in fitted.per_event:
            continue
        i = d.record_index
        if not any(suit_indicator(d.dates[i], fitted.suit_epochs)):
            continue
        adjusted = adjust_suit_time(fitted, d.event_id, float(d.x[i]), d.dates[i], 'remove')
        clean = _outside_epochs(d.dates, fitted.suit_epochs)
        best = best_holder = best_date = None
        if clean.any():
            j = int(np.flatnonzero(clean)[np.argmax(d.x[clean])])
            best, best_holder, best_date = float(-d.x[j]), d.swimmer_ids[j], d.dates[j].isoformat()
        stands = best is None or adjusted < best
        rows.append({
            'event_id': d.event_id,
            'record_s': float(-d.x[i]),
            'record_holder': d.swimmer_ids[i],
            'record_date': d.dates[i].isoformat(),
            'adjusted_s': round(adjusted, 2),
            'adjusted_unrounded_s': adjusted,
            'best_non_suit_s': best,
            'best_non_suit_holder': best_holder,
            'best_non_suit_date': best_date,
            'record_stands': stands,
            'holder': d.swimmer_ids[i] if stands else best_holder,
        })
    return rows


class SuitAnalyzer:
    """Suit-free view of the record list"""

    def analyze(self, fitted, datasets):
        issues = []
        rows = []
        for d in sorted(datasets, key=lambda d: d.event_id):
            try:
                rows += would_be_records(fitted, [d])
            except ConsistencyError as e:
                issues.append(f"{d.event_id} left out: {e.message}")
        surviving = [r['event_id'] for r in rows if r['record_stands']]
        if not rows and not issues:
            issues.append("No current record was set inside a suit epoch")
        details = {
            'suit_era_records': len(rows),
            'surviving': surviving,
            'displaced': [r['event_id'] for r in rows if not r['record_stands']],
        }
        return {'records': rows, 'issues': issues, 'details': details}
