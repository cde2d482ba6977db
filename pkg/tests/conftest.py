import math
from datetime import date, timedelta

import numpy as np
import pytest

from evtpool.analyzers.pooled_model import EventParams, FittedModel
from evtpool.utils.config import load_config
from evtpool.utils.swim_loader import SuitEpochs, SwimRecord, TimeScaler


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run simulation studies')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def uniform_scaler(y0=2001, y1=2020):
    return TimeScaler(mean=(y0 + y1) / 2, sd=(y1 - y0) / math.sqrt(12.0),
                      year_boundaries=tuple(float(y) for y in range(y0, y1 + 1)))


def event_params(u, sigma_tilde, xi, mu0, beta=0.0, gamma1=0.0, gamma2=None):
    """EventParams from the threshold-scale parametrization"""
    gamma2 = gamma1 if gamma2 is None else gamma2
    return EventParams(mu0=mu0, sigma0=sigma_tilde - xi * (u - mu0), xi=xi, beta=beta,
                       gamma1=gamma1, gamma2=gamma2)


def hand_model(per_event, thresholds, scaler=None, censor_s=0.01):
    scaler = scaler or uniform_scaler()
    return FittedModel.from_event_params(per_event, thresholds, {e: scaler for e in per_event},
                                         SuitEpochs(), censor_s=censor_s)


def swims(event_id, times, start=date(2005, 1, 1), step_days=30, prefix='s'):
    return [SwimRecord(f'{prefix}{i:03d}', event_id, float(t), start + timedelta(days=step_days * i))
            for i, t in enumerate(times)]


@pytest.fixture
def app_cfg():
    return load_config()


@pytest.fixture
def epochs():
    return SuitEpochs()


@pytest.fixture
def rng():
    return np.random.default_rng(20190101)


@pytest.fixture
def flat_model():
    """Two events with constant rates (no trend, no suits)"""
    per_event = {
        '100_free_M': event_params(-48.005, 0.5, -0.147, mu0=-47.3),
        '50_fly_F': event_params(-25.905, 0.3, -0.147, mu0=-25.5),
    }
    return hand_model(per_event, {'100_free_M': -48.005, '50_fly_F': -25.905})


@pytest.fixture
def trend_model():
    """One event with an improving trend and suit effects"""
    u = -48.005
    per_event = {'100_free_M': event_params(u, 0.5, -0.147, mu0=-47.3, beta=0.1, gamma1=0.15, gamma2=0.25)}
    return hand_model(per_event, {'100_free_M': u})
