"""JSON structured logging on stderr.

Each record is one JSON object: ``ts``, ``level``, ``logger``, ``event`` and any
structured fields passed through :func:`log_event`.
"""
import json
import logging
import sys
from datetime import datetime, timezone

ROOT_LOGGER = 'evtpool'


class JsonFormatter(logging.Formatter):
    """Render log records as single-line JSON"""

    def format(self, record):
        payload = {
            'ts': datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'event': record.getMessage(),
        }
        fields = getattr(record, 'fields', None)
        if fields:
            for key, value in fields.items():
                payload[key] = value
        if record.exc_info:
            payload['traceback'] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, default=_json_default)


def _json_default(value):
    # numpy scalars and arrays, dates
    if hasattr(value, 'tolist'):
        return value.tolist()
    if hasattr(value, 'isoformat'):
        return value.isoformat()
    return str(value)


def setup_logging(level='INFO', quiet=False, stream=None):
    """Configure the package logger; safe to call more than once"""
    logger = logging.getLogger(ROOT_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonFormatter())
    logger.addHandler(handler)
    logger.setLevel(logging.WARNING if quiet else getattr(logging, str(level).upper(), logging.INFO))
    logger.propagate = False
    return logger


def get_logger(name):
    return logging.getLogger(f'{ROOT_LOGGER}.{name}')


def log_event(logger, event, level=logging.INFO, **fields):
    """Emit one structured event"""
    logger.log(level, event, extra={'fields': fields})
