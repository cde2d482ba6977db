"""Configuration: bundled JSON registry + .env / environment overrides.

Precedence is command-line flag > environment variable > JSON file.
"""
import copy
import json
import os
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from dotenv import load_dotenv

from .errors import ConfigError, MissingInputError

load_dotenv()

CONFIG_FORMAT_VERSION = 1
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / 'config' / 'events.json'

STROKES = ('free', 'back', 'breast', 'fly', 'im')
GENDERS = ('M', 'F')
REQUIRED_SECTIONS = ('events', 'suit_epochs', 'data', 'spline', 'fit', 'cv',
                     'bootstrap', 'forecast', 'simulate', 'synthetic_truth')


@dataclass(frozen=True)
class EventSpec:
    event_id: str
    distance: int
    stroke: str
    gender: str
    reference_threshold_s: float


@dataclass
class AppConfig:
    """Validated configuration document"""
    events: dict
    suit_epochs: dict
    data: dict
    spline: dict
    fit: dict
    cv: dict
    bootstrap: dict
    forecast: dict
    simulate: dict
    synthetic_truth: dict
    seed: int = 0
    threads: int = 1
    log_level: str = 'INFO'
    source: str = ''
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def event_ids(self):
        return list(self.events)

    def event(self, event_id):
        try:
            return self.events[event_id]
        except KeyError:
            raise ConfigError(f"Unknown event_id: {event_id}", key='events') from None

    def epoch_dates(self):
        """Suit epochs as ((start1, end1), (start2, end2)) dates"""
        return tuple(
            tuple(date.fromisoformat(d) for d in self.suit_epochs[name])
            for name in ('epoch1', 'epoch2')
        )

    def with_overrides(self, **sections):
        """Copy with section keys replaced, e.g. with_overrides(fit={'phi_r': 1.0})"""
        cfg = copy.deepcopy(self)
        for name, values in sections.items():
            if values is None:
                continue
            target = getattr(cfg, name)
            if isinstance(target, dict):
                target.update({k: v for k, v in values.items() if v is not None})
            else:
                setattr(cfg, name, values)
        return cfg


def load_config(path=None):
    """Load and validate the JSON config.

    ``path`` falls back to ``EVTPOOL_CONFIG`` and then to the bundled registry.
    """
    path = Path(path or os.getenv('EVTPOOL_CONFIG') or DEFAULT_CONFIG_PATH)
    if not path.exists():
        raise MissingInputError(path)
    try:
        with open(path, encoding='utf-8') as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config is not valid JSON: {str(e)}", key=None) from e
    return parse_config(raw, source=str(path))


def parse_config(raw, source=''):
    if raw.get('format_version') != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"Unsupported config format_version {raw.get('format_version')!r}",
            key='format_version',
        )
    for section in REQUIRED_SECTIONS:
        if section not in raw:
            raise ConfigError(f"Missing config section '{section}'", key=section)

    events = {}
    for entry in raw['events']:
        try:
            spec = EventSpec(
                event_id=entry['event_id'],
                distance=int(entry['distance']),
                stroke=entry['stroke'],
                gender=entry['gender'],
                reference_threshold_s=float(entry['reference_threshold_s']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed event entry {entry!r}", key='events') from e
        if spec.stroke not in STROKES or spec.gender not in GENDERS:
            raise ConfigError(f"Bad stroke/gender in {spec.event_id}", key='events')
        if spec.event_id != f"{spec.distance}_{spec.stroke}_{spec.gender}":
            raise ConfigError(f"event_id {spec.event_id} does not match its fields", key='events')
        if spec.event_id in events:
            raise ConfigError(f"Duplicate event_id {spec.event_id}", key='events')
        events[spec.event_id] = spec

    epochs = raw['suit_epochs']
    try:
        (s1, e1), (s2, e2) = [[date.fromisoformat(d) for d in epochs[k]] for k in ('epoch1', 'epoch2')]
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError("suit_epochs must hold ISO [start, end) pairs", key='suit_epochs') from e
    if not (s1 < e1 <= s2 < e2):
        raise ConfigError("suit epochs must be ordered and disjoint", key='suit_epochs')

    if raw['data'].get('standardization') not in ('global', 'per_event'):
        raise ConfigError("data.standardization must be 'global' or 'per_event'", key='data.standardization')
    if int(raw['data'].get('n_exceed', 0)) < 1:
        raise ConfigError("data.n_exceed must be positive", key='data.n_exceed')
    if not raw['cv'].get('phi_r_grid'):
        raise ConfigError("cv.phi_r_grid must be nonempty", key='cv.phi_r_grid')
    schedule = raw['fit'].get('phi_m_schedule') or []
    if not schedule or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ConfigError("fit.phi_m_schedule must be a nonempty increasing sequence", key='fit.phi_m_schedule')
    for key in ('gtol', 'loglik_tol', 'monotone_tol', 'hessian_rel_step'):
        if float(raw['fit'].get(key, 0)) <= 0:
            raise ConfigError(f"fit.{key} must be positive", key=f'fit.{key}')

    return AppConfig(
        events=events,
        suit_epochs=dict(epochs),
        data=dict(raw['data']),
        spline=dict(raw['spline']),
        fit=dict(raw['fit']),
        cv=dict(raw['cv']),
        bootstrap=dict(raw['bootstrap']),
        forecast=dict(raw['forecast']),
        simulate=dict(raw['simulate']),
        synthetic_truth=dict(raw['synthetic_truth']),
        seed=_env_int('EVTPOOL_SEED', 0),
        threads=_env_int('EVTPOOL_THREADS', 1),
        log_level=os.getenv('EVTPOOL_LOG_LEVEL', 'INFO'),
        source=source,
        raw=raw,
    )


def _env_int(name, default):
    value = os.getenv(name)
    if value in (None, ''):
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}", key=name) from None
