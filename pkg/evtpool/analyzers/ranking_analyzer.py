"""Cross-event rankings by r-value.

The r-value of a swim is the expected number of swims per year, in the swim's
own event and year, that would beat it. Smaller is better.
"""
from dataclasses import asdict, dataclass

import numpy as np

from ..utils.errors import NotRankableError
from ..utils.evt import tail_term, yearly_rate_approx
from ..utils.logger import get_logger, log_event

logger = get_logger('ranking')


@dataclass
class RankedSwim:
    swimmer_id: str
    event_id: str
    time_s: float
    date: object
    r_value: float
    rank: int
    ci_lo: int | None = None
    ci_hi: int | None = None
    nation: str | None = None

    def to_dict(self):
        row = asdict(self)
        row['date'] = self.date.isoformat()
        return row


def year_rate(fitted, event_id, year):
    """Expected exceedances of u_e in a calendar year"""
    y0, y1 = fitted.scaler(event_id).year_window_std(year)
    return yearly_rate_approx(0, fitted.thresholds[event_id], fitted.path(event_id), [y0, y1])


def r_value(fitted, event_id, x, date):
    """Yearly rate of swims better than x (negated seconds) at the given date"""
    u, s = fitted.thresholds[event_id], fitted.censor_s
    if not x + s / 2 > u:
        raise NotRankableError(f"Swim {-x:.2f}s is not above the {event_id} threshold", event_id=event_id)
    gpd = fitted.gpd(event_id)
    survival = tail_term((x + s / 2 - u) / gpd.sigma_tilde, gpd.xi)
    return float(survival) * year_rate(fitted, event_id, date.year)


def _r_values(fitted, swims):
    """Vectorised r-values for (event_id, x, date) triples"""
    out = np.empty(len(swims))
    cache = {}
    by_event = {}
    for i, (event_id, *_) in enumerate(swims):
        by_event.setdefault(event_id, []).append(i)
    for event_id, idx in by_event.items():
        u, s = fitted.thresholds[event_id], fitted.censor_s
        gpd = fitted.gpd(event_id)
        x = np.array([swims[i][1] for i in idx])
        if np.any(x + s / 2 <= u):
            raise NotRankableError(f"{event_id} has swims below its threshold", event_id=event_id)
        survival = tail_term((x + s / 2 - u) / gpd.sigma_tilde, gpd.xi)
        rates = []
        for i in idx:
            key = (event_id, swims[i][2].year)
            if key not in cache:
                cache[key] = year_rate(fitted, event_id, swims[i][2].year)
            rates.append(cache[key])
        out[idx] = np.atleast_1d(survival) * np.array(rates)
    return out


def _ranks(r, swims):
    order = sorted(range(len(swims)), key=lambda i: (r[i], swims[i][0], swims[i][3]))
    ranks = np.empty(len(swims), dtype=int)
    ranks[order] = np.arange(1, len(swims) + 1)
    return ranks


def rank_table(fitted, datasets, top_n=None, nation=None, ensemble=None, level=0.95):
    """All exceedances ranked by r-value, best first.

    ``nation`` restricts the table (and the ranks) to one nation. With an
    ensemble, each swim also gets a percentile interval for its rank.
    """
    swims, meta = [], []
    for d in sorted(datasets, key=lambda d: d.event_id):
        nations = d.nations or (None,) * len(d)
        for x, day, swimmer, nat in zip(d.x.tolist(), d.dates, d.swimmer_ids, nations):
            if nation is not None and nat != nation:
                continue
            swims.append((d.event_id, x, day, swimmer))
            meta.append(nat)
    if not swims:
        return []
    r = _r_values(fitted, swims)
    ranks = _ranks(r, swims)

    lo = hi = None
    if ensemble is not None:
        samples = np.array([_ranks(_r_values(m, swims), swims) for m in ensemble.models()])
        alpha = 1.0 - level
        lo = np.quantile(samples, alpha / 2, axis=0, method='lower')
        hi = np.quantile(samples, 1 - alpha / 2, axis=0, method='higher')

    table = [
        RankedSwim(swimmer_id=s[3], event_id=s[0], time_s=round(-s[1], 2), date=s[2], r_value=float(r[i]),
                   rank=int(ranks[i]), nation=meta[i],
                   ci_lo=None if lo is None else int(lo[i]), ci_hi=None if hi is None else int(hi[i]))
        for i, s in enumerate(swims)
    ]
    table.sort(key=lambda row: row.rank)
    log_event(logger, 'rank_table', swims=len(table), nation=nation, with_ci=ensemble is not None)
    return table[:top_n] if top_n else table


class RankingAnalyzer:
    """Rank swims across events"""

    def analyze(self, fitted, datasets, top_n=None, nation=None, ensemble=None):
        issues = []
        details = {}
        table = rank_table(fitted, datasets, top_n=top_n, nation=nation, ensemble=ensemble)
        details['n_ranked'] = len(table)
        if not table:
            issues.append(f"No swims to rank{' for nation ' + nation if nation else ''}")
            return {'ranks': [], 'issues': issues, 'details': details}

        # 1. Swims at or beyond the fitted ultimate time
        beyond = [row for row in table if row.r_value == 0.0]
        if beyond:
            issues.append(f"{len(beyond)} swims are at or beyond their event's fitted ultimate time")
        # 2. Best swim per event
        best = {}
        for row in table:
            best.setdefault(row.event_id, row.rank)
        details['best_rank_per_event'] = best
        details['top'] = table[0].to_dict()
        return {'ranks': table, 'issues': issues, 'details': details}
