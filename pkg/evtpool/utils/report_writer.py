"""CSV / JSON report files with fixed column sets.

Every CSV goes through :func:`write_csv` so floats, column order and line
endings are identical across runs.
"""
import json
import math
import re
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import MissingInputError, ValidationError
from .logger import get_logger, log_event

logger = get_logger('reports')

FLOAT_FORMAT = '%.10g'

SCHEMAS = {
    'ladder.csv': ['model', 'constraints', 'loglik', 'n_params', 'effective_dof', 'ric', 'delta_ric'],
    'cv.csv': ['phi_r', 'mean_score'],
    'ranks.csv': ['rank', 'swimmer_id', 'event_id', 'time_s', 'date', 'r_value', 'ci_lo', 'ci_hi', 'nation'],
    'ultimate.csv': ['event_id', 'u', 'sigma_tilde', 'xi', 'ultimate_s', 'ci_lo', 'ci_hi'],
    'next_record.csv': ['event_id', 'record_s', 'record_date', 'holder', 'expected_next_s', 'improvement_pct',
                        'ci_lo', 'ci_hi', 'pred_lo', 'pred_hi'],
    'waiting.csv': ['event_id', 'expected_wait_years', 'ci_lo', 'ci_hi', 'p_within_1y', 'p_within_5y',
                    'p_within_10y'],
    'next_event_prob.csv': ['event_id', 'probability', 'raw', 'ci_lo', 'ci_hi'],
    'adjusted.csv': ['event_id', 'record_s', 'record_holder', 'record_date', 'adjusted_s', 'adjusted_unrounded_s',
                     'best_non_suit_s', 'best_non_suit_holder', 'best_non_suit_date', 'record_stands', 'holder'],
    'simulated.csv': ['swimmer_id', 'event_id', 'time_s', 'date'],
    'adjust.csv': ['event_id', 'time_s', 'date', 'direction', 'adjusted_s', 'adjusted_unrounded_s'],
    'diagnostics/pp.csv': ['rank', 'event_id', 'expected', 'observed', 'difference', 'band_lo', 'band_hi'],
    'diagnostics/rate_*.csv': ['event_id', 'year', 'expected', 'observed', 'ci_lo', 'ci_hi'],
    'diagnostics/links.csv': ['event_id', 'u_L', 'converged', 'mu_L', 'sigma_L', 'beta_L', 'gamma_L1', 'gamma_L2',
                              'xi'],
    'diagnostics/boxcox.csv': ['parameter', 'n', 'delta', 'ci_lo', 'ci_hi'],
    'diagnostics/xi_intervals.csv': ['event_id', 'xi', 'ci_lo', 'ci_hi'],
}


def schema_for(relative):
    relative = Path(relative).as_posix()
    if relative in SCHEMAS:
        return SCHEMAS[relative]
    if re.fullmatch(r'diagnostics/rate_[^/]+\.csv', relative):
        return SCHEMAS['diagnostics/rate_*.csv']
    return None


def write_csv(out_dir, relative, rows):
    """Write rows (dicts) under out_dir with the registered column order"""
    columns = schema_for(relative)
    if columns is None:
        raise ValidationError(f"No schema registered for {relative}")
    path = Path(out_dir) / relative
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([{c: row.get(c) for c in columns} for row in rows], columns=columns)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    log_event(logger, 'report_written', path=str(path), rows=len(frame))
    return path


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, float) and not math.isfinite(value):
        return 'nan' if math.isnan(value) else ('inf' if value > 0 else '-inf')
    return value


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        json.dump(_plain(payload), fh, sort_keys=True, indent=2)
        fh.write('\n')
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)
    with open(path, encoding='utf-8') as fh:
        return _restore(json.load(fh))


def _restore(value):
    if isinstance(value, dict):
        return {k: _restore(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_restore(v) for v in value]
    if value == 'nan':
        return math.nan
    if value == 'inf':
        return math.inf
    if value == '-inf':
        return -math.inf
    return value


def merge_ladder(out_dir, rows, baseline='M1a'):
    """Combine new ladder rows with an existing ladder.csv, one row per model"""
    from ..analyzers.pooled_model import LADDER

    path = Path(out_dir) / 'ladder.csv'
    merged = {}
    if path.exists():
        for row in pd.read_csv(path).to_dict('records'):
            merged[row['model']] = row
    for row in rows:
        merged[row['model']] = dict(row)
    ordered = [merged[m] for m in LADDER if m in merged]
    base = next((r['ric'] for r in ordered if r['model'] == baseline), math.nan)
    for r in ordered:
        r['delta_ric'] = r['ric'] - base
    return write_csv(out_dir, 'ladder.csv', ordered)


def schema_check(out_dir):
    """Validate the header of every known CSV under out_dir.

    Returns the list of checked files; raises ValidationError naming every
    mismatch.
    """
    out_dir = Path(out_dir)
    if not out_dir.exists():
        raise MissingInputError(out_dir)
    checked, problems = [], []
    for path in sorted(out_dir.rglob('*.csv')):
        relative = path.relative_to(out_dir).as_posix()
        expected = schema_for(relative)
        if expected is None:
            problems.append(f"{relative}: unknown report")
            continue
        with open(path, encoding='utf-8') as fh:
            header = fh.readline().rstrip('\n').split(',')
        if header != expected:
            problems.append(f"{relative}: columns {header} != {expected}")
        checked.append(relative)
    if problems:
        raise ValidationError("Report schema check failed", problems=problems)
    log_event(logger, 'schema_check', files=len(checked))
    return checked
