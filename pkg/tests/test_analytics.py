import math
from datetime import date

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid, quad

from conftest import event_params, hand_model, swims
from evtpool.analyzers.boxcox_analyzer import boxcox_profile
from evtpool.analyzers.diagnostics_analyzer import DiagnosticsAnalyzer, pooled_pp, rate_check
from evtpool.analyzers.ranking_analyzer import RankingAnalyzer, r_value, rank_table
from evtpool.analyzers.record_analyzer import (
    RecordAnalyzer,
    RecordState,
    expected_next_record,
    expected_waiting_time,
    forecast_origin,
    prob_next_record_in_event,
    record_waiting_cdf,
    record_waiting_density,
    ultimate_time,
)
from evtpool.analyzers.suit_analyzer import SuitAnalyzer, adjust_suit_time, would_be_records
from evtpool.utils.errors import (
    DomainError,
    InsufficientDataError,
    NoFiniteEndpointError,
    NotRankableError,
    RecordBeyondModelError,
)
from evtpool.utils.evt import integrated_intensity, tail_term, upper_endpoint
from evtpool.utils.swim_loader import SwimRecord, build_event_dataset, standardize_datasets

FREE = '100_free_M'
FLY = '50_fly_F'


def datasets_for(model, records_by_event):
    built = [build_event_dataset(recs, e, n_exceed=len(recs)) for e, recs in sorted(records_by_event.items())]
    out, _ = standardize_datasets(built, scalers={e: model.scaler(e) for e in records_by_event})
    return out


def hazard_per_year(model, event_id, record_x):
    """Constant-rate hazard of a record-breaking swim"""
    ep, u = model.per_event[event_id], model.thresholds[event_id]
    rate = tail_term((u - ep.mu0) / ep.sigma0, ep.xi)
    p = tail_term((record_x - u) / ep.sigma_tilde(u), ep.xi)
    return p * rate / model.scaler(event_id).sd


class TestRecordSize:
    def test_ultimate_time(self, flat_model):
        assert ultimate_time(flat_model, FREE) == pytest.approx(48.005 - 0.5 / 0.147, rel=1e-12)

    def test_heavy_tail_has_no_ultimate(self):
        model = hand_model({FREE: event_params(-48.005, 0.5, 0.1, mu0=-47.3)}, {FREE: -48.005})
        with pytest.raises(NoFiniteEndpointError):
            ultimate_time(model, FREE)

    def test_next_record_at_threshold(self, flat_model):
        record = RecordState(FREE, -48.005, date(2019, 1, 1))
        assert expected_next_record(flat_model, FREE, record) == pytest.approx(48.005 - 0.5 / 1.147)

    def test_next_record_matches_quadrature(self, flat_model):
        record = RecordState(FREE, -46.9, date(2019, 1, 1))
        sigma_r = 0.5 - 0.147 * (-46.9 + 48.005)
        gain, _ = quad(lambda y: (1 - 0.147 * y / sigma_r) ** (1 / 0.147), 0.0, sigma_r / 0.147)
        assert expected_next_record(flat_model, FREE, record) == pytest.approx(46.9 - gain, rel=1e-9)

    def test_ordering(self, flat_model):
        record = RecordState(FREE, -46.9, date(2019, 1, 1))
        nxt = expected_next_record(flat_model, FREE, record)
        assert ultimate_time(flat_model, FREE) < nxt < record.time_s

    def test_record_beyond_endpoint(self, flat_model):
        record = RecordState(FREE, -44.0, date(2019, 1, 1))
        with pytest.raises(RecordBeyondModelError):
            expected_next_record(flat_model, FREE, record)


class TestRValue:
    def test_below_threshold(self, flat_model):
        with pytest.raises(NotRankableError):
            r_value(flat_model, FREE, -48.02, date(2010, 6, 1))

    def test_faster_is_rarer(self, flat_model):
        day = date(2010, 6, 1)
        values = [r_value(flat_model, FREE, -t, day) for t in (47.9, 47.5, 47.0, 46.5)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_beyond_endpoint_is_zero(self, flat_model):
        assert r_value(flat_model, FREE, -44.0, date(2010, 6, 1)) == 0.0

    def test_earlier_swim_under_improving_trend_ranks_higher(self, trend_model):
        early = r_value(trend_model, FREE, -47.5, date(2003, 6, 1))
        late = r_value(trend_model, FREE, -47.5, date(2006, 6, 1))
        assert early < late

    def test_single_event_follows_time_order(self, flat_model):
        data = datasets_for(flat_model, {FREE: swims(FREE, [47.9, 47.0, 47.5, 46.8])})
        table = rank_table(flat_model, data)
        assert [row.time_s for row in table] == [46.8, 47.0, 47.5, 47.9]
        assert [row.rank for row in table] == [1, 2, 3, 4]

    def test_nation_filter(self, flat_model):
        recs = [SwimRecord(f'n{i}', FREE, t, date(2005, 3, 1 + i), nation=n)
                for i, (t, n) in enumerate([(47.0, 'AUS'), (47.2, 'USA'), (47.4, 'AUS')])]
        data = datasets_for(flat_model, {FREE: recs})
        result = RankingAnalyzer().analyze(flat_model, data, nation='AUS')
        assert [row.swimmer_id for row in result['ranks']] == ['n0', 'n2']
        assert [row.rank for row in result['ranks']] == [1, 2]


class TestWaiting:
    RECORD = RecordState(FREE, -47.5, date(2019, 6, 1))

    def test_constant_rate_mean(self, flat_model):
        c = hazard_per_year(flat_model, FREE, self.RECORD.record_x)
        wait = expected_waiting_time(flat_model, FREE, self.RECORD)
        assert wait == pytest.approx(1.0 / c, rel=1e-6)

    def test_constant_rate_cdf_and_density(self, flat_model):
        c = hazard_per_year(flat_model, FREE, self.RECORD.record_x)
        for t in (0.5, 2.0, 7.0):
            assert record_waiting_cdf(flat_model, FREE, self.RECORD, t) == pytest.approx(1 - math.exp(-c * t), rel=1e-8)
            assert record_waiting_density(flat_model, FREE, self.RECORD, t) == pytest.approx(c * math.exp(-c * t),
                                                                                             rel=1e-8)
        assert record_waiting_cdf(flat_model, FREE, self.RECORD, 0.0) == 0.0

    def test_negative_time(self, flat_model):
        with pytest.raises(DomainError):
            record_waiting_cdf(flat_model, FREE, self.RECORD, -1.0)

    def test_divergent_mean(self, flat_model):
        slow = RecordState(FREE, -45.0, date(2019, 6, 1))
        assert expected_waiting_time(flat_model, FREE, slow, horizon=50.0) == math.inf

    def test_trend_reaches_certainty(self, trend_model):
        cdf = [record_waiting_cdf(trend_model, FREE, self.RECORD, t) for t in (1, 10, 100, 1000)]
        assert all(a <= b for a, b in zip(cdf, cdf[1:]))
        assert cdf[-1] == 1.0

    def test_origin_forms_agree(self, flat_model):
        assert forecast_origin(flat_model) == 2020.0
        assert forecast_origin(flat_model, '2020-01-01') == forecast_origin(flat_model, date(2020, 1, 1)) == 2020.0


class TestNextEvent:
    def test_competing_constant_hazards(self, flat_model):
        records = {FREE: RecordState(FREE, -47.5, date(2019, 1, 1)), FLY: RecordState(FLY, -25.4, date(2019, 1, 1))}
        c = {e: hazard_per_year(flat_model, e, r.record_x) for e, r in records.items()}
        probs = prob_next_record_in_event(flat_model, records)
        total = sum(c.values())
        for e in records:
            assert probs[e] == pytest.approx(c[e] / total, abs=1e-6)
        raw = prob_next_record_in_event(flat_model, records, raw=True)
        assert sum(raw.values()) == pytest.approx(1.0, abs=2e-3)

    def test_identical_events_split_evenly(self):
        ep = event_params(-48.005, 0.5, -0.147, mu0=-47.3)
        model = hand_model({'a': ep, 'b': ep}, {'a': -48.005, 'b': -48.005})
        records = {e: RecordState(e, -47.5, date(2019, 1, 1)) for e in ('a', 'b')}
        probs = prob_next_record_in_event(model, records)
        assert probs['a'] == pytest.approx(0.5, abs=1e-9)
        assert probs['b'] == pytest.approx(0.5, abs=1e-9)

    def test_analyzer_tables(self, flat_model):
        data = datasets_for(flat_model, {FREE: swims(FREE, [47.5, 47.8, 47.9]),
                                         FLY: swims(FLY, [25.4, 25.6, 25.8])})
        result = RecordAnalyzer().analyze(flat_model, data)
        assert [r['event_id'] for r in result['ultimate']] == [FREE, FLY]
        assert sum(r['probability'] for r in result['next_event_prob']) == pytest.approx(1.0)
        assert result['next_record'][0]['record_s'] == 47.5
        assert result['next_record'][0]['ci_lo'] is None
        assert result['issues'] == []

    def test_analyzer_passes_quadrature_tolerance(self, flat_model, monkeypatch):
        import evtpool.analyzers.record_analyzer as records_module
        seen = []
        real = records_module.quad_vec

        def spy(*args, **kwargs):
            seen.append(kwargs['epsabs'])
            return real(*args, **kwargs)

        monkeypatch.setattr(records_module, 'quad_vec', spy)
        data = datasets_for(flat_model, {FREE: swims(FREE, [47.5, 47.8, 47.9]),
                                         FLY: swims(FLY, [25.4, 25.6, 25.8])})
        RecordAnalyzer().analyze(flat_model, data, forecast={'quad_abs_tol': 1e-9})
        assert seen == [1e-9]


def trending_pair():
    model = hand_model({FREE: event_params(-48.005, 0.5, -0.147, mu0=-47.3, beta=0.1),
                        FLY: event_params(-25.905, 0.3, -0.147, mu0=-25.5, beta=0.05)},
                       {FREE: -48.005, FLY: -25.905})
    records = {FREE: RecordState(FREE, -47.0, date(2019, 6, 1)), FLY: RecordState(FLY, -25.2, date(2019, 6, 1))}
    return model, records


def simulated_first_records(model, records, n, rng):
    """Years after the window end until each event's record falls, by inverting the cumulative hazard"""
    draws = {}
    for e, record in records.items():
        ep, u, scaler = model.per_event[e], model.thresholds[e], model.scaler(e)
        sigma_tilde = ep.sigma0 + ep.xi * (u - ep.mu0)
        p = (1.0 + ep.xi * (record.record_x - u) / sigma_tilde) ** (-1.0 / ep.xi)
        t0 = float(scaler.standardize(2020.0))
        years_max = (-ep.sigma0 / (ep.xi * ep.beta) - t0) * scaler.sd
        y = np.arange(0.0, 0.999 * years_max, 0.005)
        t = t0 + y / scaler.sd
        mu, sigma = ep.mu0 + ep.beta * t, ep.sigma0 + ep.xi * ep.beta * t
        rate = p * (1.0 + ep.xi * (u - mu) / sigma) ** (-1.0 / ep.xi) / scaler.sd
        H = cumulative_trapezoid(rate, y, initial=0.0)
        draws[e] = np.interp(rng.exponential(size=n), H, y)
    return draws


def check_against_simulation(n, tol, seed):
    model, records = trending_pair()
    draws = simulated_first_records(model, records, n, np.random.default_rng(seed))
    for e, record in records.items():
        for years in (1.0, 5.0, 15.0):
            empirical = float(np.mean(draws[e] <= years))
            assert record_waiting_cdf(model, e, record, years) == pytest.approx(empirical, abs=tol)
    free_first = float(np.mean(draws[FREE] < draws[FLY]))
    probs = prob_next_record_in_event(model, records)
    assert probs[FREE] == pytest.approx(free_first, abs=tol)
    assert probs[FLY] == pytest.approx(1.0 - free_first, abs=tol)
    raw = prob_next_record_in_event(model, records, raw=True)
    assert sum(raw.values()) == pytest.approx(1.0, abs=2e-3)


class TestTrendingForecast:
    def test_matches_simulated_arrivals(self):
        check_against_simulation(20_000, 0.02, seed=11)

    @pytest.mark.slow
    def test_matches_simulated_arrivals_large_sample(self):
        check_against_simulation(100_000, 0.01, seed=12)


def suited_pair():
    suits = dict(beta=0.1, gamma1=0.15, gamma2=0.25)
    return hand_model({FREE: event_params(-48.005, 0.5, -0.147, mu0=-47.3, **suits),
                       FLY: event_params(-25.905, 0.3, -0.147, mu0=-25.5, **suits)},
                      {FREE: -48.005, FLY: -25.905})


class TestSuits:
    SWIM_DATE = date(2008, 6, 1)

    def test_round_trip(self, trend_model):
        removed = adjust_suit_time(trend_model, FREE, -47.5, self.SWIM_DATE, 'remove')
        back = adjust_suit_time(trend_model, FREE, -removed, self.SWIM_DATE, 'add1')
        assert removed > 47.5
        assert back == pytest.approx(47.5, abs=1e-9)

    def test_second_epoch_uses_its_own_effect(self, trend_model):
        first = adjust_suit_time(trend_model, FREE, -47.5, date(2008, 6, 1), 'remove')
        second = adjust_suit_time(trend_model, FREE, -47.5, date(2009, 6, 1), 'remove')
        assert second > first

    def test_remove_outside_epochs(self, trend_model):
        with pytest.raises(DomainError):
            adjust_suit_time(trend_model, FREE, -47.5, date(2005, 6, 1), 'remove')

    def test_unknown_direction(self, trend_model):
        with pytest.raises(DomainError):
            adjust_suit_time(trend_model, FREE, -47.5, self.SWIM_DATE, 'sideways')

    def test_no_suit_effect_is_identity(self, flat_model):
        assert adjust_suit_time(flat_model, FREE, -47.5, self.SWIM_DATE, 'remove') == pytest.approx(47.5, abs=1e-12)

    def test_would_be_records(self, trend_model):
        recs = [
            SwimRecord('suit', FREE, 47.2, date(2009, 7, 30)),
            SwimRecord('clean', FREE, 47.6, date(2005, 3, 1)),
            SwimRecord('other', FREE, 47.9, date(2012, 3, 1)),
        ]
        data = datasets_for(trend_model, {FREE: recs})
        rows = would_be_records(trend_model, data)
        assert len(rows) == 1
        row = rows[0]
        assert row['record_s'] == 47.2
        assert row['best_non_suit_s'] == 47.6
        assert row['adjusted_s'] > 47.2
        assert row['record_stands'] == (row['adjusted_unrounded_s'] < 47.6)
        assert row['holder'] == ('suit' if row['record_stands'] else 'clean')
        result = SuitAnalyzer().analyze(trend_model, data)
        assert result['details']['suit_era_records'] == 1

    def test_one_bad_event_keeps_the_rest(self):
        model = suited_pair()
        suit_day = date(2009, 7, 30)
        data = datasets_for(model, {
            # a suit-era record this close to the threshold adjusts below it
            FREE: [SwimRecord('near', FREE, 48.00, suit_day), SwimRecord('slow', FREE, 48.30, date(2005, 3, 1))],
            FLY: [SwimRecord('fast', FLY, 24.90, suit_day), SwimRecord('slow', FLY, 25.60, date(2005, 3, 1))],
        })
        result = SuitAnalyzer().analyze(model, data)
        assert [r['event_id'] for r in result['records']] == [FLY]
        assert len(result['issues']) == 1
        assert result['issues'][0].startswith(f'{FREE} left out')

    def test_random_round_trips(self):
        model = suited_pair()
        rng = np.random.default_rng(2008)
        worst = 0.0
        for _ in range(1000):
            e = (FREE, FLY)[rng.integers(2)]
            year = int(rng.choice([2008, 2009]))
            day = date(year, int(rng.integers(1, 13)), int(rng.integers(1, 29)))
            gpd = model.gpd(e)
            x = gpd.u + rng.uniform(0.3, 0.8) * (upper_endpoint(gpd) - gpd.u)
            add = 'add1' if year == 2008 else 'add2'
            if rng.random() < 0.5:
                there = adjust_suit_time(model, e, x, day, 'remove')
                back = adjust_suit_time(model, e, -there, day, add)
            else:
                there = adjust_suit_time(model, e, x, day, add)
                back = adjust_suit_time(model, e, -there, day, 'remove')
            worst = max(worst, abs(back + x))
        assert worst < 1e-9


class TestDiagnostics:
    def test_pp_positions(self, flat_model):
        data = datasets_for(flat_model, {FREE: swims(FREE, [47.5, 47.8, 47.9]),
                                         FLY: swims(FLY, [25.4, 25.6])})
        rows = pooled_pp(flat_model, data)
        assert [r['expected'] for r in rows] == pytest.approx([i / 6 for i in range(1, 6)])
        observed = [r['observed'] for r in rows]
        assert observed == sorted(observed)
        assert all(r['band_lo'] <= 0 <= r['band_hi'] for r in rows)

    def test_empty_window(self, flat_model):
        data = datasets_for(flat_model, {FREE: swims(FREE, [47.5, 47.8, 47.9])})
        assert pooled_pp(flat_model, data, window=(1990.0, 1991.0)) == []

    def test_window_includes_its_last_year(self, flat_model):
        data = datasets_for(flat_model, {FREE: [SwimRecord('a', FREE, 47.5, date(2002, 3, 1)),
                                                SwimRecord('b', FREE, 47.8, date(2003, 6, 1)),
                                                SwimRecord('c', FREE, 47.9, date(2003, 12, 20)),
                                                SwimRecord('d', FREE, 47.6, date(2004, 1, 10))]})
        rows = pooled_pp(flat_model, data, window=(2001, 2003))
        assert len(rows) == 3

    def test_rate_check_totals(self, flat_model):
        data = datasets_for(flat_model, {FREE: swims(FREE, [47.5, 47.8, 47.9])})
        rows = rate_check(flat_model, data[0])
        scaler = flat_model.scaler(FREE)
        total = integrated_intensity(scaler.window_std, flat_model.thresholds[FREE], flat_model.path(FREE))
        assert sum(r['expected'] for r in rows) == pytest.approx(total, rel=1e-10)
        assert sum(r['observed'] for r in rows) == 3
        assert [r['year'] for r in rows] == list(range(2001, 2020))
        assert all(r['ci_lo'] <= r['expected'] <= r['ci_hi'] for r in rows)

    def test_analyzer(self, flat_model):
        data = datasets_for(flat_model, {FREE: swims(FREE, [47.5, 47.8, 47.9])})
        result = DiagnosticsAnalyzer().analyze(flat_model, data)
        assert len(result['pp']) == 3
        assert set(result['rates']) == {FREE}


class TestBoxCox:
    def test_square_root_law(self):
        x = np.linspace(1.0, 4.0, 12)
        delta, _ = boxcox_profile((0.5 + 0.8 * x) ** 2, x)
        assert delta == pytest.approx(0.5, abs=1e-3)

    def test_log_law(self):
        x = np.linspace(1.0, 4.0, 12)
        delta, _ = boxcox_profile(np.exp(0.3 + 0.4 * x), x)
        assert delta == pytest.approx(0.0, abs=1e-3)

    def test_too_few_points(self):
        with pytest.raises(InsufficientDataError):
            boxcox_profile([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    def test_positive_values_only(self):
        with pytest.raises(DomainError):
            boxcox_profile([1.0, 2.0, 0.0, 3.0], [1.0, 2.0, 3.0, 4.0])
