import json
import math
from dataclasses import replace
from datetime import date
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import event_params, hand_model
from evtpool.analyzers.bootstrap_analyzer import (
    BootstrapEnsemble,
    Replicate,
    bootstrap_ensemble,
    ci,
    predictive_record_cdf,
    predictive_record_quantile,
    rank_comparison_prob,
    replicate_feasibility,
    simulate_dataset,
    simulate_records,
    synthetic_model,
)
from evtpool.analyzers.pooled_model import fit
from evtpool.utils.errors import ArtifactVersionError, DomainError, EnsembleDegeneracyError, MissingInputError
from evtpool.utils.evt import cumulative_intensity, gpd_cdf
from evtpool.utils.config import load_config

EVENTS = ['100_free_M', '200_fly_F', '50_back_M']


@pytest.fixture(scope='module')
def truth():
    return synthetic_model(load_config(), event_ids=EVENTS)


def ensemble_of(base, xis, master_seed=7, start=0):
    """Replicates that differ from the base only in the shared shape"""
    k = base.layout().names().index('xi')
    reps = []
    for i, xi in enumerate(xis):
        theta = list(base.theta)
        theta[k] = xi
        reps.append(Replicate(start + i, theta, {}, feasible=True, converged=True))
    return BootstrapEnsemble(base, master_seed, len(reps), reps)


class TestSimulation:
    def test_counts_match_integrated_rate(self, truth):
        expected = 0.0
        for e in EVENTS:
            t_a, t_b = truth.scaler(e).window_std
            expected += cumulative_intensity([t_a, t_b], truth.thresholds[e], truth.path(e))[-1]
        rng = np.random.default_rng(3)
        totals = [sum(len(v) for v in simulate_records(truth, rng, time_knots=200).values()) for _ in range(40)]
        assert np.mean(totals) == pytest.approx(expected, rel=0.05)

    def test_marks_on_grid_and_above_threshold(self, truth):
        records = simulate_records(truth, 5, time_knots=200)
        for e, swims in records.items():
            times = np.array([r.time_s for r in swims])
            assert np.allclose(times * 100, np.round(times * 100), atol=1e-6)
            assert np.all(-times >= truth.thresholds[e])
            assert all(date(2001, 1, 1) <= r.date <= date(2020, 1, 1) for r in swims)

    def test_same_seed_same_draw(self, truth):
        a = simulate_dataset(truth, 99, time_knots=200)
        b = simulate_dataset(truth, 99, time_knots=200)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.x, db.x)
            assert da.dates == db.dates


class TestFeasibility:
    U = -48.005

    def _model(self, xi):
        return hand_model({'100_free_M': event_params(self.U, 0.5, xi, mu0=-47.3)}, {'100_free_M': self.U})

    def _data(self, record):
        return [SimpleNamespace(event_id='100_free_M', x=np.array([self.U + 0.1, record]))]

    def test_feasible(self):
        assert replicate_feasibility(self._model(-0.147), self._data(-46.0)) is None

    def test_heavy_tail(self):
        assert replicate_feasibility(self._model(0.05), self._data(-46.0)) == 'no_finite_endpoint'

    def test_record_beyond_endpoint(self):
        # endpoint is 48.005 - 0.5/0.147 = 44.60 s
        assert replicate_feasibility(self._model(-0.147), self._data(-44.0)) == 'ultimate_slower_than_data'

    def test_next_record_within_timing_grid(self):
        # record 0.006 s short of the endpoint: expected gain is about 0.0008 s < s/2
        model = self._model(-0.147)
        assert replicate_feasibility(model, self._data(-44.61)) == 'next_record_slower'
        assert replicate_feasibility(replace(model, censor_s=0.001), self._data(-44.61)) is None


class TestIntervals:
    def test_percentile_interval(self, truth):
        xis = truth.pooled.xi + 0.001 * np.random.default_rng(1).permutation(40)
        ens = ensemble_of(truth, xis)
        lo, hi = ci(lambda m: m.pooled.xi, ens, level=0.9)
        ordered = np.sort(xis)
        assert lo == pytest.approx(ordered[math.floor(0.05 * 39)])
        assert hi == pytest.approx(ordered[math.ceil(0.95 * 39)])

    def test_too_few_replicates(self, truth):
        ens = ensemble_of(truth, [truth.pooled.xi] * 19)
        with pytest.raises(EnsembleDegeneracyError):
            ci(lambda m: m.pooled.xi, ens)

    def test_require(self, truth):
        ens = ensemble_of(truth, [truth.pooled.xi] * 4)
        ens.replicates[0].feasible = False
        ens.requested_B = 10
        with pytest.raises(EnsembleDegeneracyError):
            ens.require(0.5)
        assert ens.counts == {'requested': 10, 'retained': 3, 'infeasible': 1, 'not_converged': 0}


class TestPredictive:
    def test_single_replicate_matches_gpd(self, truth):
        ens = ensemble_of(truth, [truth.pooled.xi])
        e = EVENTS[0]
        gpd = truth.gpd(e)
        record = gpd.u + 1.0
        sigma_r = gpd.sigma_tilde + gpd.xi * (record - gpd.u)
        x = record + 0.2
        expected = 1.0 - (1.0 + gpd.xi * 0.2 / sigma_r) ** (-1.0 / gpd.xi)
        assert predictive_record_cdf(ens, e, x, record) == pytest.approx(expected, rel=1e-8)

    def test_quantile_inverts_cdf(self, truth):
        ens = ensemble_of(truth, truth.pooled.xi + np.linspace(-0.01, 0.01, 5))
        e = EVENTS[1]
        record = truth.thresholds[e] + 2.0
        x = predictive_record_quantile(ens, e, 0.5, record)
        assert predictive_record_cdf(ens, e, x, record) == pytest.approx(0.5, abs=1e-8)

    def test_needs_x_above_record(self, truth):
        ens = ensemble_of(truth, [truth.pooled.xi])
        with pytest.raises(DomainError):
            predictive_record_cdf(ens, EVENTS[0], -48.0, -48.0)

    def test_beyond_endpoint_is_certain(self, truth):
        ens = ensemble_of(truth, [truth.pooled.xi])
        gpd = truth.gpd(EVENTS[0])
        assert predictive_record_cdf(ens, EVENTS[0], gpd.u - gpd.sigma_tilde / gpd.xi + 1.0, gpd.u + 0.5) == 1.0
        assert gpd_cdf(gpd.u, gpd) == 0.0

    def test_identical_swims_tie(self, truth):
        ens = ensemble_of(truth, truth.pooled.xi + np.linspace(-0.01, 0.01, 5))
        swim = (EVENTS[0], -48.0, date(2010, 6, 1))
        assert rank_comparison_prob(ens, swim, swim) == 0.5


class TestArtifact:
    def test_jsonl_round_trip(self, truth, tmp_path):
        ens = ensemble_of(truth, truth.pooled.xi + np.linspace(-0.01, 0.01, 3))
        ens.replicates.append(Replicate(3, list(truth.theta), {}, False, True, 'ultimate_slower_than_data', 12))
        path = tmp_path / 'ensemble.jsonl'
        ens.to_jsonl(path)
        header = json.loads(path.read_text().splitlines()[0])
        assert header['kind'] == 'evtpool.bootstrap'
        assert header['records'] == 4
        back = BootstrapEnsemble.from_jsonl(path, truth)
        assert back.replicates == ens.replicates
        assert back.master_seed == 7

    def test_version_mismatch(self, truth, tmp_path):
        path = tmp_path / 'ensemble.jsonl'
        ensemble_of(truth, [truth.pooled.xi]).to_jsonl(path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header['format_version'] = 2
        path.write_text('\n'.join([json.dumps(header)] + lines[1:]) + '\n')
        with pytest.raises(ArtifactVersionError):
            BootstrapEnsemble.from_jsonl(path, truth)

    def test_missing_file(self, truth, tmp_path):
        with pytest.raises(MissingInputError):
            BootstrapEnsemble.from_jsonl(tmp_path / 'nope.jsonl', truth)

    def test_combine_disjoint(self, truth):
        a = ensemble_of(truth, [truth.pooled.xi] * 2)
        b = ensemble_of(truth, [truth.pooled.xi] * 3, start=2)
        both = a.combine(b)
        assert [r.index for r in both.replicates] == [0, 1, 2, 3, 4]
        assert both.requested_B == 5
        with pytest.raises(DomainError):
            a.combine(a)


@pytest.mark.slow
def test_thread_count_does_not_change_replicates(truth):
    data = simulate_dataset(truth, 4)
    config = replace(truth.config, model_id='M2', phi_r=0.0, compute_ric=False)
    fitted = fit(data, config, truth.suit_epochs)
    one = bootstrap_ensemble(fitted, data, B=4, seed=21, threads=1, min_retained_fraction=0.0, progress=False)
    two = bootstrap_ensemble(fitted, data, B=4, seed=21, threads=2, min_retained_fraction=0.0, progress=False)
    assert [r.theta for r in one.replicates] == [r.theta for r in two.replicates]
    tail = bootstrap_ensemble(fitted, data, B=2, seed=21, start_index=2, min_retained_fraction=0.0, progress=False)
    assert [r.theta for r in tail.replicates] == [r.theta for r in one.replicates[2:]]


@pytest.mark.slow
def test_shape_interval_coverage():
    cfg = load_config()
    truth = synthetic_model(cfg, event_ids=sorted(cfg.event_ids)[:8], model_id='M2')
    e = truth.event_ids[0]
    config = replace(truth.config, compute_ric=False)
    used = covered = 0
    for m in range(100):
        data = simulate_dataset(truth, 1000 + m)
        fitted = fit(data, config, truth.suit_epochs, start=truth)
        ens = bootstrap_ensemble(fitted, data, B=50, seed=m, min_retained_fraction=0.0, progress=False)
        if ens.retained < 20:
            continue
        lo, hi = ci(lambda model: model.per_event[e].xi, ens)
        used += 1
        covered += lo <= truth.per_event[e].xi <= hi
    assert used >= 90
    assert covered >= 0.85 * used
