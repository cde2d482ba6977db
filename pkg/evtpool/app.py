"""evtpool command line: fit, bootstrap, rank, predict, adjust, diagnose, simulate.

Each command reads the CSV/JSON inputs, runs one analysis and writes its
reports under ``--out``. A JSON summary goes to stdout; logs and progress go
to stderr.
"""
import argparse
import json
import math
import sys
from dataclasses import replace
from datetime import date
from pathlib import Path

from .analyzers.boxcox_analyzer import LinkAnalyzer
from .analyzers.bootstrap_analyzer import (
    BootstrapEnsemble,
    bootstrap_ensemble,
    simulate_records,
    synthetic_model,
)
from .analyzers.diagnostics_analyzer import DiagnosticsAnalyzer
from .analyzers.pooled_model import (
    LADDER,
    FitConfig,
    FittedModel,
    cross_validate_phi_r,
    fit,
    fit_ladder,
    ladder_row,
)
from .analyzers.ranking_analyzer import RankingAnalyzer
from .analyzers.record_analyzer import RecordAnalyzer
from .analyzers.suit_analyzer import DIRECTIONS, SuitAnalyzer, adjust_suit_time
from .utils.config import load_config
from .utils.errors import EvtPoolError, ValidationError
from .utils.logger import get_logger, log_event, setup_logging
from .utils.report_writer import merge_ladder, read_json, schema_check, write_csv, write_json
from .utils.swim_loader import (
    SuitEpochs,
    build_datasets,
    decimal_year,
    ingest_csv,
    standardize_datasets,
)

logger = get_logger('cli')

THRESHOLD_TOLERANCE = 1e-9


# Shared plumbing

def _load(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.threads is not None:
        overrides['threads'] = args.threads
    for name, value in overrides.items():
        setattr(cfg, name, value)
    return cfg


def _window(cfg):
    window = cfg.data.get('window')
    if not window:
        return None
    start, end = (window['start'], window['end']) if isinstance(window, dict) else window
    return decimal_year(date.fromisoformat(start)), decimal_year(date.fromisoformat(end))


def _datasets(cfg, input_path, event_ids=None, scalers=None):
    records = ingest_csv(input_path, cfg.event_ids)
    datasets = build_datasets(records, event_ids or cfg.event_ids, int(cfg.data['n_exceed']),
                              float(cfg.data['censor_s']))
    if not datasets:
        raise ValidationError(f"{input_path} holds no swims for the configured events")
    return standardize_datasets(datasets, cfg.data['standardization'], _window(cfg), scalers)


def _model(args):
    path = Path(args.model_file or Path(args.out) / 'model.json')
    return FittedModel.from_dict(read_json(path))


def _model_datasets(cfg, args, fitted):
    """Input data prepared exactly as when the model was fitted"""
    datasets, _ = _datasets(cfg, args.input, fitted.event_ids, fitted.scalers)
    for d in datasets:
        if abs(d.threshold_u - fitted.thresholds[d.event_id]) > THRESHOLD_TOLERANCE:
            raise ValidationError(f"{d.event_id}: input threshold differs from the model's",
                                  input=d.threshold_u, model=fitted.thresholds[d.event_id])
    missing = sorted(set(fitted.event_ids) - {d.event_id for d in datasets})
    if missing:
        raise ValidationError("Input lacks events the model was fitted on", events=missing)
    return datasets


def _ensemble(args, fitted):
    return BootstrapEnsemble.from_jsonl(args.ensemble, fitted) if args.ensemble else None


def _emit(command, outputs, result=None):
    result = result or {}
    for issue in result.get('issues', []):
        log_event(logger, 'issue', level=30, command=command, message=issue)
    summary = {'command': command, 'outputs': [str(p) for p in outputs],
               'issues': result.get('issues', []), 'details': result.get('details', {})}
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


def _write_diagnostics(out, result):
    paths = [write_csv(out, 'diagnostics/pp.csv', result['pp'])]
    for event_id, rows in result['rates'].items():
        paths.append(write_csv(out, f'diagnostics/rate_{event_id}.csv', rows))
    return paths


# Commands

def cmd_fit(args):
    cfg = _load(args)
    datasets, _ = _datasets(cfg, args.input)
    epochs = SuitEpochs.from_config(cfg)
    config = FitConfig.from_app_config(cfg, model_id=args.model)
    out = Path(args.out)
    outputs = []

    # 1. Roughness weight
    if args.phi_r == 'cv':
        cv = cross_validate_phi_r(datasets, config, epochs, threads=cfg.threads)
        config = replace(config, phi_r=cv.chosen)
        outputs.append(write_csv(out, 'cv.csv', cv.to_rows()))
    elif args.phi_r is not None:
        config = replace(config, phi_r=float(args.phi_r))

    # 2. Fit (optionally the whole ladder)
    if args.ladder == 'all':
        fits, rows = fit_ladder(datasets, config, epochs, models=LADDER, threads=cfg.threads)
        fitted = fits[config.model_id]
    else:
        fitted = fit(datasets, config, epochs, threads=cfg.threads)
        rows = [ladder_row(fitted)]
    outputs.append(write_json(out / 'model.json', fitted.to_dict()))
    outputs.append(merge_ladder(out, [r.to_dict() for r in rows]))

    # 3. Goodness of fit
    result = DiagnosticsAnalyzer().analyze(fitted, datasets)
    outputs += _write_diagnostics(out, result)
    result['details'].update({'model_id': fitted.model_id, 'loglik': fitted.loglik, 'ric': fitted.ric,
                              'effective_dof': fitted.effective_dof, 'phi_r': fitted.phi_r,
                              'converged': fitted.converged})
    return _emit('fit', outputs, result)


def cmd_bootstrap(args):
    cfg = _load(args)
    fitted = _model(args)
    datasets = _model_datasets(cfg, args, fitted)
    boot = cfg.bootstrap
    ensemble = bootstrap_ensemble(
        fitted, datasets, B=args.B or int(boot['B']), seed=cfg.seed, threads=cfg.threads,
        time_knots=int(boot['time_knots']), iteration_factor=int(boot['iteration_factor']),
        min_retained_fraction=float(boot['min_retained_fraction']),
        reselect_phi_r=bool(boot['reselect_phi_r']), progress=not args.quiet,
    )
    path = Path(args.out) / 'ensemble.jsonl'
    path.parent.mkdir(parents=True, exist_ok=True)
    ensemble.to_jsonl(path)
    return _emit('bootstrap', [path], {'details': ensemble.counts})


def cmd_rank(args):
    cfg = _load(args)
    fitted = _model(args)
    datasets = _model_datasets(cfg, args, fitted)
    result = RankingAnalyzer().analyze(fitted, datasets, top_n=args.top_n, nation=args.nation,
                                       ensemble=_ensemble(args, fitted))
    path = write_csv(args.out, 'ranks.csv', [r.to_dict() for r in result['ranks']])
    return _emit('rank', [path], result)


def cmd_predict(args):
    cfg = _load(args)
    fitted = _model(args)
    datasets = _model_datasets(cfg, args, fitted)
    result = RecordAnalyzer().analyze(fitted, datasets, ensemble=_ensemble(args, fitted),
                                      origin=args.origin, forecast=cfg.forecast)
    outputs = [write_csv(args.out, f'{name}.csv', result[name])
               for name in ('ultimate', 'next_record', 'waiting', 'next_event_prob')]
    return _emit('predict', outputs, result)


def cmd_adjust(args):
    cfg = _load(args)
    if args.event is not None and (args.time is None or args.date is None):
        raise ValidationError("adjust --event needs --time and --date")
    if args.event is None and args.input is None:
        raise ValidationError("adjust needs either --event/--time/--date or --input")
    fitted = _model(args)
    if args.event is not None:
        # 1. One swim
        try:
            swim_date = date.fromisoformat(args.date)
        except ValueError:
            raise ValidationError(f"Bad ISO date {args.date!r}") from None
        adjusted = adjust_suit_time(fitted, args.event, -args.time, swim_date, args.direction)
        row = {'event_id': args.event, 'time_s': args.time, 'date': swim_date.isoformat(),
               'direction': args.direction, 'adjusted_s': round(adjusted, 2), 'adjusted_unrounded_s': adjusted}
        path = write_csv(args.out, 'adjust.csv', [row])
        return _emit('adjust', [path], {'details': row})
    # 2. Suit-era records
    datasets = _model_datasets(cfg, args, fitted)
    result = SuitAnalyzer().analyze(fitted, datasets)
    path = write_csv(args.out, 'adjusted.csv', result['records'])
    return _emit('adjust', [path], result)


def cmd_diagnose(args):
    cfg = _load(args)
    fitted = _model(args)
    datasets = _model_datasets(cfg, args, fitted)
    out = Path(args.out)
    result = DiagnosticsAnalyzer().analyze(fitted, datasets, ensemble=_ensemble(args, fitted))
    outputs = _write_diagnostics(out, result)

    sprint_events = [e for e in fitted.event_ids if cfg.event(e).distance == 50]
    links = LinkAnalyzer().analyze(datasets, fitted.suit_epochs, fitted.config, threads=cfg.threads,
                                   xi_interval_events=sprint_events)
    outputs.append(write_csv(out, 'diagnostics/links.csv', links['links']))
    outputs.append(write_csv(out, 'diagnostics/boxcox.csv', links['boxcox']))
    outputs.append(write_csv(out, 'diagnostics/xi_intervals.csv', links['xi_intervals']))
    result['issues'] += links['issues']
    result['details'].update(links['details'])
    return _emit('diagnose', outputs, result)


def cmd_simulate(args):
    cfg = _load(args)
    if args.model_file:
        fitted = FittedModel.from_dict(read_json(args.model_file))
    else:
        fitted = synthetic_model(cfg, model_id=args.model or 'M7b')
    # lower each threshold so the simulated data carry more than n_exceed swims
    margin = float(cfg.simulate['threshold_margin'])
    thresholds = {e: fitted.thresholds[e] - margin * fitted.sigma_tilde(e) for e in fitted.event_ids}
    records = simulate_records(fitted, cfg.seed, thresholds=thresholds,
                               time_knots=int(cfg.bootstrap['time_knots']))
    rows = [{'swimmer_id': r.swimmer_id, 'event_id': r.event_id, 'time_s': r.time_s, 'date': r.date.isoformat()}
            for e in sorted(records) for r in records[e]]
    path = write_csv(args.out, 'simulated.csv', rows)
    counts = {e: len(v) for e, v in records.items()}
    short = [e for e, n in counts.items() if n < int(cfg.data['n_exceed'])]
    issues = [f"{e} has fewer than {cfg.data['n_exceed']} simulated swims" for e in short]
    return _emit('simulate', [path], {'issues': issues, 'details': {'counts': counts, 'seed': cfg.seed}})


def cmd_schema_check(args):
    checked = schema_check(args.out)
    return _emit('schema-check', [], {'details': {'checked': checked}})


# Argument parsing

def _phi_r(value):
    if value == 'cv':
        return value
    try:
        phi = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--phi-r must be a number or 'cv'") from None
    if not math.isfinite(phi) or phi < 0:
        raise argparse.ArgumentTypeError("--phi-r must be nonnegative")
    return phi


def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config (default: EVTPOOL_CONFIG or the bundled registry)')
    common.add_argument('--seed', type=int, help='master seed (default: EVTPOOL_SEED or 0)')
    common.add_argument('--threads', type=_positive_int, help='worker processes for CV and bootstrap')
    common.add_argument('--out', default='out', help='output directory')
    common.add_argument('--quiet', action='store_true', help='warnings only, no progress bars')

    parser = argparse.ArgumentParser(prog='evtpool', description='Pooled extreme-value models of swim times')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('fit', parents=[common], help='fit a model and write model.json, ladder.csv')
    p.add_argument('--input', required=True)
    p.add_argument('--model', choices=LADDER)
    p.add_argument('--phi-r', type=_phi_r, dest='phi_r')
    p.add_argument('--ladder', choices=('none', 'all'), default='none')
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser('bootstrap', parents=[common], help='parametric bootstrap ensemble')
    p.add_argument('--input', required=True)
    p.add_argument('--model-file', dest='model_file')
    p.add_argument('--B', type=_positive_int, dest='B')
    p.set_defaults(handler=cmd_bootstrap)

    p = sub.add_parser('rank', parents=[common], help='rank swims across events by r-value')
    p.add_argument('--input', required=True)
    p.add_argument('--model-file', dest='model_file')
    p.add_argument('--ensemble')
    p.add_argument('--nation')
    p.add_argument('--top-n', type=_positive_int, dest='top_n')
    p.set_defaults(handler=cmd_rank)

    p = sub.add_parser('predict', parents=[common], help='ultimate times and record forecasts')
    p.add_argument('--input', required=True)
    p.add_argument('--model-file', dest='model_file')
    p.add_argument('--ensemble')
    p.add_argument('--origin', help='forecast origin as an ISO date')
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('adjust', parents=[common], help='suit-adjusted times')
    p.add_argument('--input')
    p.add_argument('--model-file', dest='model_file')
    p.add_argument('--event')
    p.add_argument('--time', type=float)
    p.add_argument('--date')
    p.add_argument('--direction', choices=DIRECTIONS, default='remove')
    p.set_defaults(handler=cmd_adjust)

    p = sub.add_parser('diagnose', parents=[common], help='PP, rate and link diagnostics')
    p.add_argument('--input', required=True)
    p.add_argument('--model-file', dest='model_file')
    p.add_argument('--ensemble')
    p.set_defaults(handler=cmd_diagnose)

    p = sub.add_parser('simulate', parents=[common], help='simulate a results CSV')
    p.add_argument('--model-file', dest='model_file')
    p.add_argument('--model', choices=LADDER)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('schema-check', parents=[common], help='validate report CSV headers under --out')
    p.set_defaults(handler=cmd_schema_check)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg_level = load_config(args.config).log_level
    except EvtPoolError:
        cfg_level = 'INFO'
    setup_logging(cfg_level, quiet=args.quiet)
    try:
        return args.handler(args)
    except EvtPoolError as e:
        sys.stderr.write(json.dumps({'error': e.to_dict()}, sort_keys=True, default=str) + '\n')
        return e.exit_code
    except Exception:
        logger.exception('unhandled_error')
        return 1


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
