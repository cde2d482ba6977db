"""Parametric bootstrap: simulation from a fitted model, refits and intervals.

Replicate i draws from ``SeedSequence(master_seed, spawn_key=(i,))`` so any
replicate can be rebuilt on its own and ensembles over disjoint index ranges
can be combined.
"""
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq
from tqdm import tqdm

from ..utils.errors import (
    ArtifactVersionError,
    DomainError,
    EnsembleDegeneracyError,
    EvtPoolError,
    MissingInputError,
    ParseError,
)
from ..utils.evt import GpdParams, cumulative_intensity, gpd_cdf, gpd_quantile
from ..utils.logger import get_logger, log_event
from ..utils.splines import SplineBasis
from ..utils.swim_loader import (
    EventDataset,
    SuitEpochs,
    SwimRecord,
    TimeScaler,
    date_from_decimal_year,
    decimal_year,
)
from .pooled_model import (
    MODEL_STRUCTURE,
    EventArrays,
    FitConfig,
    FittedModel,
    PooledParams,
    cross_validate_phi_r,
    event_params_from_pooled,
    fit,
)
from .ranking_analyzer import r_value

logger = get_logger('bootstrap')

ENSEMBLE_FORMAT_VERSION = 1
MIN_RETAINED_FOR_CI = 20
TIME_KNOTS = 1000


# Synthetic generating model

def synthetic_model(app_cfg, event_ids=None, window=None, truth=None, model_id='M7b'):
    """FittedModel at the configured generating links.

    Thresholds come from each event's reference time; the time scaler is the
    uniform one over ``window`` (ISO date strings, default simulate.window).
    """
    truth = dict(app_cfg.synthetic_truth if truth is None else truth)
    event_ids = sorted(event_ids or app_cfg.event_ids)
    s = float(app_cfg.data['censor_s'])
    start, end = (date.fromisoformat(d) for d in (window or app_cfg.simulate['window']))
    y0, y1 = decimal_year(start), decimal_year(end)
    scaler = TimeScaler(mean=(y0 + y1) / 2, sd=(y1 - y0) / math.sqrt(12.0),
                        year_boundaries=tuple(float(y) for y in range(math.floor(y0), math.ceil(y1) + 1)))
    thresholds = {e: -app_cfg.event(e).reference_threshold_s - s / 2 for e in event_ids}
    u_L = {e: math.log(-u) for e, u in thresholds.items()}

    config = FitConfig.from_app_config(app_cfg, model_id=model_id)
    basis = SplineBasis.uniform(min(u_L.values()), max(u_L.values()), q=config.spline_q,
                                degree=config.spline_degree, margin=config.spline_margin,
                                clamped=config.spline_clamped)
    structure = MODEL_STRUCTURE[model_id]
    spline_a = None
    if structure['sigma_link'] == 'spline':
        spline_a = tuple(truth['alpha2'] + truth['theta2'] * basis.greville())
    pooled = PooledParams(
        xi=truth['xi'], alpha1=truth['alpha1'], theta1=truth['theta1'], alpha2=truth['alpha2'],
        theta2=truth['theta2'], spline_a=spline_a, alpha3=truth['alpha3'], theta3=truth['theta3'],
        alpha4=truth['alpha4'], theta4=truth['theta4'],
        epsilon=truth['epsilon'] if structure['two_suit'] else None,
    )
    # 1. Event parameters from the links
    per_event = {}
    for e in event_ids:
        free = _free_values(pooled, u_L[e], thresholds[e], structure)
        per_event[e] = event_params_from_pooled(pooled, u_L[e], thresholds[e], model_id,
                                                basis=basis if spline_a else None, free=free)
    # 2. Matching internal vector
    model = FittedModel.from_event_params(
        per_event, thresholds, {e: scaler for e in event_ids}, SuitEpochs.from_config(app_cfg),
        censor_s=s, model_id=model_id, config=config, pooled=pooled,
        basis=basis if structure['sigma_link'] == 'spline' else None,
    )
    layout = model.layout()
    source = EventArrays.from_event_params([per_event[e] for e in event_ids], [thresholds[e] for e in event_ids],
                                           np.asarray(spline_a) if spline_a else None)
    theta = layout.pack(source, pooled) if layout.global_names else layout.initial_vector(source)
    return replace(model, theta=theta.tolist())


def _free_values(pooled, u_L, u, structure):
    """Values of unlinked parameters, read off the full link set"""
    g1 = pooled.alpha4 + pooled.theta4 * u_L
    return {
        'xi': pooled.xi,
        'mu0': -math.exp(pooled.alpha1 + pooled.theta1 * u_L),
        'sigma_tilde': math.exp(pooled.alpha2 + pooled.theta2 * u_L),
        'beta': math.exp(pooled.alpha3 + pooled.theta3 * u_L),
        'gamma1': g1 ** 2,
        'gamma2': (g1 + pooled.epsilon) ** 2 if structure['two_suit'] and pooled.epsilon is not None else g1 ** 2,
    }


# Simulation

def _time_grid(scaler, path, knots):
    t_a, t_b = scaler.window_std
    grid = np.linspace(t_a, t_b, knots)
    inner = [b for b in path.breakpoints if t_a < b < t_b]
    return np.unique(np.concatenate([grid, inner]))


def simulate_records(fitted, rng, thresholds=None, time_knots=TIME_KNOTS):
    """One draw of the marked point process above each event's threshold.

    Counts are Poisson, occurrence times follow the integrated rate by inverse
    CDF and marks are GPd draws rounded to the censoring grid.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s = fitted.censor_s
    out = {}
    for event_id in sorted(fitted.per_event):
        u = fitted.thresholds[event_id] if thresholds is None else float(thresholds[event_id])
        scaler, path = fitted.scaler(event_id), fitted.path(event_id)
        grid = _time_grid(scaler, path, time_knots)
        cum = cumulative_intensity(grid, u, path)
        n = int(rng.poisson(cum[-1]))
        t = np.interp(rng.uniform(0.0, cum[-1], n), cum, grid)
        gpd = GpdParams(u=u, sigma_tilde=fitted.per_event[event_id].sigma_tilde(u), xi=fitted.per_event[event_id].xi)
        x = gpd_quantile(rng.uniform(0.0, 1.0, n), gpd) if n else np.empty(0)
        times = np.round(-np.round(np.asarray(x) / s) * s, 2)
        days = [date_from_decimal_year(y) for y in np.atleast_1d(scaler.to_decimal(t))]
        out[event_id] = [SwimRecord(f"{event_id}-{i:05d}", event_id, float(ts), d)
                         for i, (ts, d) in enumerate(zip(times, days))]
    return out


def _dataset_at_threshold(records, event_id, u, s, scaler):
    swims = sorted(records, key=lambda r: (r.time_s, r.date, r.swimmer_id))
    years = np.array([decimal_year(r.date) for r in swims])
    return EventDataset(
        event_id=event_id,
        threshold_u=u,
        raw_threshold_u_prime=u + s / 2,
        u_L=math.log(-u),
        x=np.array([-r.time_s for r in swims], dtype=float),
        decimal_years=years,
        dates=tuple(r.date for r in swims),
        swimmer_ids=tuple(r.swimmer_id for r in swims),
        nations=tuple(None for _ in swims),
        censor_s=s,
        n_exceed=len(swims),
        t_std=scaler.standardize(years),
        window=scaler.window_std,
        scaler=scaler,
    )


def simulate_dataset(fitted, seed, time_knots=TIME_KNOTS):
    """Standardized datasets simulated at the fitted thresholds"""
    records = simulate_records(fitted, seed, time_knots=time_knots)
    return [_dataset_at_threshold(records[e], e, fitted.thresholds[e], fitted.censor_s, fitted.scaler(e))
            for e in sorted(records)]


# Ensemble

@dataclass
class Replicate:
    index: int
    theta: list
    per_event: dict
    feasible: bool
    converged: bool
    reason: str | None = None
    iterations: int = 0

    def to_dict(self):
        return {'seed_index': self.index, 'theta': self.theta, 'per_event': self.per_event,
                'feasible': self.feasible, 'converged': self.converged, 'reason': self.reason,
                'iterations': self.iterations}

    @classmethod
    def from_dict(cls, data):
        return cls(index=int(data['seed_index']), theta=list(data['theta']), per_event=dict(data['per_event']),
                   feasible=bool(data['feasible']), converged=bool(data['converged']),
                   reason=data.get('reason'), iterations=int(data.get('iterations', 0)))


@dataclass
class BootstrapEnsemble:
    base: FittedModel = field(repr=False)
    master_seed: int
    requested_B: int
    replicates: list
    _models: list | None = field(default=None, repr=False)

    @property
    def retained(self):
        return sum(r.feasible for r in self.replicates)

    @property
    def counts(self):
        return {
            'requested': self.requested_B,
            'retained': self.retained,
            'infeasible': sum(r.converged and not r.feasible for r in self.replicates),
            'not_converged': sum(not r.converged for r in self.replicates),
        }

    def models(self):
        """Retained replicates as FittedModels"""
        if self._models is None:
            self._models = [self.base.with_theta(r.theta) for r in self.replicates if r.feasible]
        return self._models

    def require(self, min_fraction):
        if self.retained < min_fraction * self.requested_B:
            raise EnsembleDegeneracyError(
                f"Only {self.retained} of {self.requested_B} replicates are feasible", **self.counts)
        return self

    def combine(self, other):
        """Union of two ensembles built from disjoint seed indices"""
        if other.master_seed != self.master_seed or other.base.model_id != self.base.model_id:
            raise DomainError("Ensembles differ in master seed or model")
        if {r.index for r in self.replicates} & {r.index for r in other.replicates}:
            raise DomainError("Ensembles share seed indices")
        reps = sorted(self.replicates + other.replicates, key=lambda r: r.index)
        return BootstrapEnsemble(self.base, self.master_seed, self.requested_B + other.requested_B, reps)

    def to_jsonl(self, path):
        header = {
            'kind': 'evtpool.bootstrap',
            'format_version': ENSEMBLE_FORMAT_VERSION,
            'master_seed': self.master_seed,
            'model_id': self.base.model_id,
            'requested_B': self.requested_B,
            'counts': self.counts,
            'records': len(self.replicates),
        }
        with open(path, 'w', encoding='utf-8', newline='\n') as fh:
            fh.write(json.dumps(header, sort_keys=True) + '\n')
            for rep in self.replicates:
                fh.write(json.dumps(rep.to_dict(), sort_keys=True) + '\n')

    @classmethod
    def from_jsonl(cls, path, base):
        path = Path(path)
        if not path.exists():
            raise MissingInputError(path)
        with open(path, encoding='utf-8') as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise ParseError(f"{path} is empty", line=1)
        try:
            header = json.loads(lines[0])
            reps = [Replicate.from_dict(json.loads(line)) for line in lines[1:]]
        except (json.JSONDecodeError, KeyError) as e:
            raise ParseError(f"Malformed ensemble file {path}: {str(e)}") from e
        if header.get('kind') != 'evtpool.bootstrap' or header.get('format_version') != ENSEMBLE_FORMAT_VERSION:
            raise ArtifactVersionError(f"Ensemble format {header.get('format_version')!r} is not supported",
                                       expected=ENSEMBLE_FORMAT_VERSION)
        if header.get('model_id') != base.model_id:
            raise ArtifactVersionError(f"Ensemble was built for {header.get('model_id')}, model is {base.model_id}")
        return cls(base, int(header['master_seed']), int(header['requested_B']), reps)


def replicate_feasibility(model, datasets):
    """None if the replicate passes both filters, else the failing reason.

    Times are recorded to the censoring width s, so an expected next record
    less than s/2 beyond the current one rounds back onto it and counts as
    slower.
    """
    for d in datasets:
        gpd = model.gpd(d.event_id)
        if gpd.xi >= 0:
            return 'no_finite_endpoint'
        record = float(np.max(d.x))
        if gpd.u - gpd.sigma_tilde / gpd.xi < record:
            return 'ultimate_slower_than_data'
        sigma_r = gpd.sigma_tilde + gpd.xi * (record - gpd.u)
        if not sigma_r > 0 or sigma_r / (1.0 - gpd.xi) < model.censor_s / 2:
            return 'next_record_slower'
    return None


def _run_replicate(fitted, datasets, index, master_seed, time_knots, iteration_factor, reselect_phi_r):
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))
    sim = simulate_dataset(fitted, rng, time_knots)
    config = replace(fitted.config, maxiter=max(iteration_factor * fitted.iterations, 50), compute_ric=False)
    if reselect_phi_r and fitted.basis is not None:
        cv = cross_validate_phi_r(sim, config, fitted.suit_epochs, seed=index, start=fitted)
        config = replace(config, phi_r=cv.chosen)
    try:
        refit = fit(sim, config, fitted.suit_epochs, start=fitted, basis=fitted.basis, fixed_xi=fitted.fixed_xi)
    except EvtPoolError as e:
        log_event(logger, 'replicate_failed', level=30, index=index, code=e.code)
        return Replicate(index, list(fitted.theta), {}, feasible=False, converged=False, reason=e.code)
    per_event = {e: p.to_dict() for e, p in refit.per_event.items()}
    if not refit.converged:
        return Replicate(index, list(refit.theta), per_event, False, False, 'not_converged', refit.iterations)
    reason = replicate_feasibility(refit, datasets)
    if reason:
        log_event(logger, 'replicate_discarded', index=index, reason=reason)
    return Replicate(index, list(refit.theta), per_event, reason is None, True, reason, refit.iterations)


def bootstrap_ensemble(fitted, datasets, B=250, seed=0, threads=1, start_index=0, time_knots=TIME_KNOTS,
                       iteration_factor=5, min_retained_fraction=0.5, reselect_phi_r=False, progress=True):
    """Simulate, refit and filter B replicates; the worker count never changes results"""
    if B < 1:
        raise DomainError("B must be at least 1")
    datasets = sorted(datasets, key=lambda d: d.event_id)
    indices = range(start_index, start_index + B)
    jobs = Parallel(n_jobs=threads, return_as='generator')(
        delayed(_run_replicate)(fitted, datasets, i, seed, time_knots, iteration_factor, reselect_phi_r)
        for i in indices
    )
    reps = list(tqdm(jobs, total=B, desc='bootstrap', disable=not progress))
    ensemble = BootstrapEnsemble(fitted, int(seed), B, sorted(reps, key=lambda r: r.index))
    log_event(logger, 'bootstrap_done', model=fitted.model_id, **ensemble.counts)
    return ensemble.require(min_retained_fraction)


# Intervals and predictive distributions

def ci(statistic, ensemble, level=0.95):
    """Percentile interval of statistic(model) over retained replicates"""
    if ensemble.retained < MIN_RETAINED_FOR_CI:
        raise EnsembleDegeneracyError(
            f"{ensemble.retained} retained replicates; at least {MIN_RETAINED_FOR_CI} needed for an interval")
    values = np.array([float(statistic(m)) for m in ensemble.models()])
    alpha = 1.0 - level
    return (float(np.quantile(values, alpha / 2, method='lower')),
            float(np.quantile(values, 1 - alpha / 2, method='higher')))


def _record_gpd(model, event_id, record_x):
    gpd = model.gpd(event_id)
    return GpdParams(u=record_x, sigma_tilde=gpd.sigma_tilde + gpd.xi * (record_x - gpd.u), xi=gpd.xi)


def predictive_record_cdf(ensemble, event_id, x, record_x):
    """P(next record <= x) averaged over the replicate GPds above the record"""
    if not x > record_x:
        raise DomainError("Predictive cdf needs x above the current record", x=x, record=record_x)
    models = ensemble.models()
    if not models:
        raise EnsembleDegeneracyError("Ensemble has no retained replicates")
    return float(np.mean([gpd_cdf(x, _record_gpd(m, event_id, record_x)) for m in models]))


def predictive_record_quantile(ensemble, event_id, prob, record_x):
    """Inverse of predictive_record_cdf (negated seconds)"""
    if not 0 < prob < 1:
        raise DomainError("Probability must lie in (0, 1)")
    top = max(m.gpd(event_id).u - m.gpd(event_id).sigma_tilde / m.gpd(event_id).xi for m in ensemble.models())
    lo = record_x + 1e-12 * max(1.0, abs(record_x))
    return brentq(lambda x: predictive_record_cdf(ensemble, event_id, x, record_x) - prob, lo, top, xtol=1e-10)


def rank_comparison_prob(ensemble, swim_a, swim_b):
    """Share of replicates in which swim A has the smaller r-value; ties count 0.5.

    Swims are (event_id, x, date) triples.
    """
    base = ensemble.base
    for event_id, x, day in (swim_a, swim_b):
        r_value(base, event_id, x, day)
    wins = []
    for m in ensemble.models():
        ra, rb = r_value(m, *swim_a), r_value(m, *swim_b)
        wins.append(1.0 if ra < rb else 0.5 if ra == rb else 0.0)
    if not wins:
        raise EnsembleDegeneracyError("Ensemble has no retained replicates")
    return float(np.mean(wins))
