"""Pooled Poisson-process model of best swim times across events.

Each event e has a GEV-type point process above its threshold u_e with

    mu(t)    = mu0 + beta t + gamma1 S1(t) + gamma2 S2(t)
    sigma(t) = sigma0 + xi (beta t + gamma1 S1(t) + gamma2 S2(t))

so that the excess scale sigma(t) + xi (u_e - mu(t)) = sigma_tilde is free of
time and suit. The model ladder M1a ... M7b ties the per-event parameters to
u_L = log(-u_e) through increasingly strong links.
"""
import math
from dataclasses import asdict, dataclass, field, replace

import numdifftools as nd
import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq, minimize
from scipy.stats import chi2
from sklearn.linear_model import LinearRegression
from sklearn.model_selection import RepeatedStratifiedKFold

from ..utils.errors import (
    ArtifactVersionError,
    ConstraintViolationError,
    ConvergenceError,
    DimensionError,
    InsufficientDataError,
    NumericalError,
    ParameterError,
    RegularizationError,
    ValidationError,
)
from ..utils.evt import GevParams, GpdParams, censored_terms, quadrature_nodes, tail_term
from ..utils.logger import get_logger, log_event
from ..utils.splines import (
    SplineBasis,
    build_penalty_matrix,
    monotonicity_penalty,
    roughness_penalty,
)
from ..utils.swim_loader import SuitEpochs, TimeScaler, suit_flags

logger = get_logger('model')

MODEL_FORMAT_VERSION = 1
BARRIER = 1e10
MIN_SCALE = 0.1

LADDER = ('M1a', 'M1b', 'M2', 'M3', 'M4', 'M5', 'M6', 'M7a', 'M7b')

# shared_xi, mu link, sigma link, beta link, gamma link, two suits
MODEL_STRUCTURE = {
    'M1a': dict(shared_xi=False, mu_link=False, sigma_link=None, beta_link=False, gamma_link=False, two_suit=False),
    'M1b': dict(shared_xi=False, mu_link=False, sigma_link=None, beta_link=False, gamma_link=False, two_suit=True),
    'M2': dict(shared_xi=True, mu_link=False, sigma_link=None, beta_link=False, gamma_link=False, two_suit=False),
    'M3': dict(shared_xi=True, mu_link=True, sigma_link=None, beta_link=False, gamma_link=False, two_suit=False),
    'M4': dict(shared_xi=True, mu_link=True, sigma_link='linear', beta_link=False, gamma_link=False, two_suit=False),
    'M5': dict(shared_xi=True, mu_link=True, sigma_link='spline', beta_link=False, gamma_link=False, two_suit=False),
    'M6': dict(shared_xi=True, mu_link=True, sigma_link='spline', beta_link=True, gamma_link=False, two_suit=False),
    'M7a': dict(shared_xi=True, mu_link=True, sigma_link='spline', beta_link=True, gamma_link=True, two_suit=False),
    'M7b': dict(shared_xi=True, mu_link=True, sigma_link='spline', beta_link=True, gamma_link=True, two_suit=True),
}

LADDER_CONSTRAINTS = {
    'M1a': 'independent fits, single suit',
    'M1b': 'independent fits, two suits',
    'M2': 'common xi',
    'M3': 'M2 + log(-mu0) linear in u_L',
    'M4': 'M3 + log(sigma_tilde) linear in u_L',
    'M5': 'M3 + log(sigma_tilde) monotone spline in u_L',
    'M6': 'M5 + log(beta) linear in u_L',
    'M7a': 'M6 + sqrt(gamma) linear in u_L',
    'M7b': 'M7a with separate 2008 and 2009 suit effects',
}

# the previous rung each model warm-starts from
LADDER_PARENT = {'M2': 'M1a', 'M3': 'M2', 'M4': 'M3', 'M5': 'M4', 'M6': 'M5', 'M7a': 'M6', 'M7b': 'M7a'}


@dataclass(frozen=True)
class EventParams:
    """Per-event point-process parameters at t = 0 outside suit epochs"""
    mu0: float
    sigma0: float
    xi: float
    beta: float
    gamma1: float
    gamma2: float

    def sigma_tilde(self, u):
        return self.sigma0 + self.xi * (u - self.mu0)

    def gpd(self, u):
        return GpdParams(u=u, sigma_tilde=self.sigma_tilde(u), xi=self.xi)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class PooledParams:
    """Link parameters shared across events; unused links stay None"""
    xi: float | None = None
    alpha1: float | None = None
    theta1: float | None = None
    alpha2: float | None = None
    theta2: float | None = None
    spline_a: tuple | None = None
    alpha3: float | None = None
    theta3: float | None = None
    alpha4: float | None = None
    theta4: float | None = None
    epsilon: float | None = None

    def to_dict(self):
        data = asdict(self)
        if self.spline_a is not None:
            data['spline_a'] = list(self.spline_a)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if data.get('spline_a') is not None:
            data['spline_a'] = tuple(data['spline_a'])
        return cls(**data)


@dataclass(frozen=True)
class FitConfig:
    model_id: str = 'M7b'
    phi_r: float = 15.0
    phi_m_schedule: tuple = (0.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8)
    cv_folds: int = 10
    cv_repeats: int = 20
    phi_r_grid: tuple = (0.1, 1.0, 5.0, 15.0, 50.0, 150.0, 500.0)
    gtol: float = 1e-6
    maxiter: int = 5000
    loglik_tol: float = 1e-8  # absolute change in l between phi_m rounds
    monotone_tol: float = 1e-10
    hessian_rel_step: float = 1e-4
    condition_limit: float = 1e12
    compute_ric: bool = True
    spline_q: int = 10
    spline_degree: int = 4
    spline_margin: float = 0.01
    spline_clamped: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.model_id not in MODEL_STRUCTURE:
            raise ValidationError(f"Unknown model_id {self.model_id!r}", allowed=list(LADDER))
        if self.phi_r < 0:
            raise ValidationError("phi_r must be nonnegative")
        if not self.phi_m_schedule or not self.phi_r_grid:
            raise ValidationError("phi_m_schedule and phi_r_grid must be nonempty")
        if min(self.gtol, self.loglik_tol, self.monotone_tol, self.hessian_rel_step) <= 0:
            raise ValidationError("Tolerances must be positive")

    @classmethod
    def from_app_config(cls, cfg, **overrides):
        fit, cv, spline = cfg.fit, cfg.cv, cfg.spline
        values = dict(
            model_id=fit['model_id'],
            phi_r=float(fit['phi_r']),
            phi_m_schedule=tuple(float(v) for v in fit['phi_m_schedule']),
            cv_folds=int(cv['folds']),
            cv_repeats=int(cv['repeats']),
            phi_r_grid=tuple(float(v) for v in cv['phi_r_grid']),
            gtol=float(fit['gtol']),
            maxiter=int(fit['maxiter']),
            loglik_tol=float(fit['loglik_tol']),
            monotone_tol=float(fit['monotone_tol']),
            hessian_rel_step=float(fit['hessian_rel_step']),
            condition_limit=float(fit['condition_limit']),
            compute_ric=bool(fit['compute_ric']),
            spline_q=int(spline['q']),
            spline_degree=int(spline['degree']),
            spline_margin=float(spline['margin']),
            spline_clamped=bool(spline['clamped']),
            seed=cfg.seed,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        data = asdict(self)
        data['phi_m_schedule'] = list(self.phi_m_schedule)
        data['phi_r_grid'] = list(self.phi_r_grid)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['phi_m_schedule'] = tuple(data['phi_m_schedule'])
        data['phi_r_grid'] = tuple(data['phi_r_grid'])
        return cls(**data)


@dataclass(frozen=True)
class EventArrays:
    """Per-event parameters for all events of a layout, as arrays"""
    mu0: np.ndarray
    sigma_tilde: np.ndarray
    xi: np.ndarray
    beta: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    spline_a: np.ndarray | None = None
    feasible: bool = True

    def sigma0(self, u):
        return self.sigma_tilde - self.xi * (u - self.mu0)

    @classmethod
    def from_event_params(cls, params, thresholds, spline_a=None):
        """params, thresholds: sequences aligned by event"""
        u = np.asarray(thresholds, dtype=float)
        get = lambda name: np.array([getattr(p, name) for p in params], dtype=float)
        xi, mu0, sigma0 = get('xi'), get('mu0'), get('sigma0')
        return cls(mu0=mu0, sigma_tilde=sigma0 + xi * (u - mu0), xi=xi, beta=get('beta'),
                   gamma1=get('gamma1'), gamma2=get('gamma2'), spline_a=spline_a)

    def event_params(self, u):
        sigma0 = self.sigma0(np.asarray(u, dtype=float))
        return [EventParams(float(m), float(s), float(x), float(b), float(g1), float(g2))
                for m, s, x, b, g1, g2 in zip(self.mu0, sigma0, self.xi, self.beta, self.gamma1, self.gamma2)]


# Links and per-event parametrization

def transformed_params(ep, u_e):
    """Link-scale view of an event: log(-mu0), log(sigma_tilde), log(beta), sqrt(gamma)"""
    return {
        'mu_L': math.log(-ep.mu0) if ep.mu0 < 0 else math.nan,
        'sigma_L': math.log(ep.sigma_tilde(u_e)),
        'beta_L': math.log(ep.beta) if ep.beta > 0 else math.nan,
        'gamma_L1': math.sqrt(ep.gamma1),
        'gamma_L2': math.sqrt(ep.gamma2),
        'xi': ep.xi,
    }


def event_params_from_transformed(tr, u_e):
    mu0 = -math.exp(tr['mu_L'])
    sigma_tilde = math.exp(tr['sigma_L'])
    xi = tr['xi']
    return EventParams(mu0=mu0, sigma0=sigma_tilde - xi * (u_e - mu0), xi=xi,
                       beta=math.exp(tr['beta_L']), gamma1=tr['gamma_L1'] ** 2, gamma2=tr['gamma_L2'] ** 2)


def event_params_from_pooled(psi, u_L, u_e, model_id, basis=None, free=None):
    """Derive one event's parameters from the pooled links.

    ``free`` supplies the per-event values a model leaves unlinked
    (mu0, sigma_tilde, xi, beta, gamma1, gamma2).
    """
    structure = MODEL_STRUCTURE[model_id]
    free = free or {}
    xi = psi.xi if structure['shared_xi'] else free['xi']
    mu0 = -math.exp(psi.alpha1 + psi.theta1 * u_L) if structure['mu_link'] else free['mu0']
    if structure['sigma_link'] == 'linear':
        sigma_tilde = math.exp(psi.alpha2 + psi.theta2 * u_L)
    elif structure['sigma_link'] == 'spline':
        if basis is None:
            raise ValidationError("Spline-linked models need the spline basis")
        sigma_tilde = math.exp(float(basis.spline(np.asarray(psi.spline_a))(u_L)))
    else:
        sigma_tilde = free['sigma_tilde']
    beta = math.exp(psi.alpha3 + psi.theta3 * u_L) if structure['beta_link'] else free['beta']
    if structure['gamma_link']:
        g1 = psi.alpha4 + psi.theta4 * u_L
        g2 = g1 + psi.epsilon if structure['two_suit'] else g1
        if g1 < 0 or g2 < 0:
            raise ConstraintViolationError("sqrt(gamma) link is negative at this u_L", u_L=u_L)
        gamma1, gamma2 = g1 ** 2, g2 ** 2
    else:
        gamma1 = free['gamma1']
        gamma2 = free['gamma2'] if structure['two_suit'] else gamma1
    return EventParams(mu0=mu0, sigma0=sigma_tilde - xi * (u_e - mu0), xi=xi,
                       beta=beta, gamma1=gamma1, gamma2=gamma2)


def time_varying_params(ep, t_std, flags):
    """GEV parameters at time t; None when sigma(t) <= 0 (infeasible)"""
    f1, f2 = flags
    shift = ep.beta * t_std + ep.gamma1 * float(f1) + ep.gamma2 * float(f2)
    sigma = ep.sigma0 + ep.xi * shift
    if not sigma > 0:
        return None
    return GevParams(mu=ep.mu0 + shift, sigma=sigma, xi=ep.xi)


class SuitTrendPath:
    """Parameter path of one event over standardized time"""

    def __init__(self, ep, edges_std):
        self.ep = ep
        self.edges = np.asarray(edges_std, dtype=float)
        self.breakpoints = tuple(float(b) for b in self.edges.ravel())

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        f1, f2 = suit_flags(t, self.edges)
        shift = self.ep.beta * t + self.ep.gamma1 * f1 + self.ep.gamma2 * f2
        return self.ep.mu0 + shift, self.ep.sigma0 + self.ep.xi * shift, np.full(t.shape, self.ep.xi)

    def instantaneous_rate(self, t, u, flags=None):
        """Exceedance rate of u per standardized time unit; flags override the calendar"""
        if flags is None:
            mu, sigma, xi = self(t)
        else:
            shift = self.ep.beta * np.asarray(t, dtype=float) + self.ep.gamma1 * flags[0] + self.ep.gamma2 * flags[1]
            mu, sigma, xi = self.ep.mu0 + shift, self.ep.sigma0 + self.ep.xi * shift, self.ep.xi
        with np.errstate(divide='ignore', invalid='ignore'):
            rate = np.where(sigma > 0, tail_term((u - mu) / np.where(sigma > 0, sigma, 1.0), xi), np.inf)
        return rate if np.ndim(rate) else float(rate)

    def feasible_horizon(self):
        """First t with sigma(t) = 0 outside suits, or inf"""
        slope = self.ep.xi * self.ep.beta
        if slope >= 0:
            return math.inf
        return -self.ep.sigma0 / slope


# Parameter layout

class ModelLayout:
    """Maps the unconstrained parameter vector of a model to event parameters.

    Intercepts are stored centred at c = mean(u_L); reported intercepts are
    converted back to the uncentred scale.
    """

    def __init__(self, model_id, u_L, thresholds, basis=None, fixed_xi=None, event_ids=None):
        if model_id not in MODEL_STRUCTURE:
            raise ValidationError(f"Unknown model_id {model_id!r}")
        self.model_id = model_id
        self.structure = MODEL_STRUCTURE[model_id]
        self.u_L = np.asarray(u_L, dtype=float)
        self.u = np.asarray(thresholds, dtype=float)
        self.event_ids = list(event_ids) if event_ids is not None else [str(i) for i in range(len(self.u))]
        self.center = float(np.mean(self.u_L))
        self.fixed_xi = fixed_xi
        self.basis = basis
        s = self.structure
        if s['sigma_link'] == 'spline':
            if basis is None:
                raise ValidationError(f"{model_id} needs a spline basis")
            self.design = basis.design_matrix(self.u_L)
        else:
            self.design = None

        per = []
        if not s['mu_link']:
            per.append('mu0')
        if s['sigma_link'] is None:
            per.append('log_sigma_tilde')
        if not s['shared_xi'] and fixed_xi is None:
            per.append('xi')
        if not s['beta_link']:
            per.append('beta')
        if not s['gamma_link']:
            per.append('g1')
            if s['two_suit']:
                per.append('g2')
        glob = []
        if s['shared_xi'] and fixed_xi is None:
            glob.append('xi')
        if s['mu_link']:
            glob += ['alpha1c', 'theta1']
        if s['sigma_link'] == 'linear':
            glob += ['alpha2c', 'theta2']
        if s['beta_link']:
            glob += ['alpha3c', 'theta3']
        if s['gamma_link']:
            glob += ['alpha4c', 'theta4']
            if s['two_suit']:
                glob.append('epsilon')
        self.per_event_names = per
        self.global_names = glob
        self.n_events = len(self.u)
        self.q = basis.q if self.design is not None else 0
        self._col = {name: i for i, name in enumerate(per)}
        base = self.n_events * len(per)
        self._glob = {name: base + i for i, name in enumerate(glob)}
        self._spline_start = base + len(glob)
        self.size = self._spline_start + self.q

    @property
    def spline_slice(self):
        return slice(self._spline_start, self._spline_start + self.q) if self.q else None

    def names(self):
        labels = [f"{name}[{e}]" for e in self.event_ids for name in self.per_event_names]
        labels += list(self.global_names)
        labels += [f"a{k}" for k in range(self.q)]
        return labels

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise DimensionError(f"{self.model_id} expects {self.size} parameters, got {theta.shape}")
        s = self.structure
        block = theta[:self.n_events * len(self.per_event_names)].reshape(self.n_events, len(self.per_event_names))
        col = lambda name: block[:, self._col[name]]
        glob = lambda name: theta[self._glob[name]]
        x = self.u_L - self.center

        if self.fixed_xi is not None:
            xi = np.full(self.n_events, float(self.fixed_xi))
        elif s['shared_xi']:
            xi = np.full(self.n_events, glob('xi'))
        else:
            xi = col('xi').copy()
        with np.errstate(over='ignore'):
            mu0 = -np.exp(glob('alpha1c') + glob('theta1') * x) if s['mu_link'] else col('mu0').copy()
            a = None
            if s['sigma_link'] == 'linear':
                sigma_L = glob('alpha2c') + glob('theta2') * x
            elif s['sigma_link'] == 'spline':
                a = theta[self.spline_slice].copy()
                sigma_L = self.design @ a
            else:
                sigma_L = col('log_sigma_tilde')
            sigma_tilde = np.exp(sigma_L)
            beta = np.exp(glob('alpha3c') + glob('theta3') * x) if s['beta_link'] else col('beta').copy()
        feasible = True
        if s['gamma_link']:
            g1 = glob('alpha4c') + glob('theta4') * x
            g2 = g1 + glob('epsilon') if s['two_suit'] else g1
            feasible = bool(np.all(g1 >= 0) and np.all(g2 >= 0))
        else:
            g1 = col('g1')
            g2 = col('g2') if s['two_suit'] else g1
        return EventArrays(mu0=mu0, sigma_tilde=sigma_tilde, xi=xi, beta=beta,
                           gamma1=g1 ** 2, gamma2=g2 ** 2, spline_a=a, feasible=feasible)

    def pooled_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self.structure
        if not (s['shared_xi'] or s['mu_link']):
            return None
        c = self.center
        get = lambda name: float(theta[self._glob[name]]) if name in self._glob else None

        def uncentre(alpha, slope):
            a, t = get(alpha), get(slope)
            return (None, None) if a is None else (a - t * c, t)

        alpha1, theta1 = uncentre('alpha1c', 'theta1')
        alpha2, theta2 = uncentre('alpha2c', 'theta2')
        alpha3, theta3 = uncentre('alpha3c', 'theta3')
        alpha4, theta4 = uncentre('alpha4c', 'theta4')
        xi = get('xi') if 'xi' in self._glob else self.fixed_xi
        spline_a = tuple(theta[self.spline_slice].tolist()) if self.q else None
        return PooledParams(xi=xi, alpha1=alpha1, theta1=theta1, alpha2=alpha2, theta2=theta2,
                            spline_a=spline_a, alpha3=alpha3, theta3=theta3, alpha4=alpha4,
                            theta4=theta4, epsilon=get('epsilon'))

    def initial_vector(self, source, spline_a=None, ridge=1.0):
        """Starting vector from per-event arrays of any model.

        Linked quantities are initialised by regressing their link-scale values
        on u_L; the spline by penalised least squares of log(sigma_tilde).
        """
        s = self.structure
        x = (self.u_L - self.center).reshape(-1, 1)
        theta = np.zeros(self.size)
        block = np.zeros((self.n_events, len(self.per_event_names)))

        xi_src = np.asarray(source.xi, dtype=float)
        if self.fixed_xi is not None:
            xi_new = np.full(self.n_events, float(self.fixed_xi))
        elif s['shared_xi']:
            xi_new = np.full(self.n_events, float(np.median(xi_src)))
        else:
            xi_new = xi_src.copy()
        mu0 = _rate_preserving_mu0(source, self.u, xi_new)
        sigma_tilde = np.asarray(source.sigma_tilde, dtype=float)
        beta = np.asarray(source.beta, dtype=float)
        g1 = np.sqrt(np.maximum(np.asarray(source.gamma1, dtype=float), 0.0))
        g2 = np.sqrt(np.maximum(np.asarray(source.gamma2, dtype=float), 0.0))
        g_floor = 1e-2 * np.sqrt(sigma_tilde)

        def regress(y):
            reg = LinearRegression().fit(x, y)
            return float(reg.intercept_), float(reg.coef_[0])

        per = {'mu0': mu0, 'log_sigma_tilde': np.log(sigma_tilde), 'xi': xi_new, 'beta': beta,
               'g1': np.maximum(g1, g_floor), 'g2': np.maximum(g2, g_floor)}
        for name, i in self._col.items():
            block[:, i] = per[name]
        theta[:block.size] = block.ravel()

        if 'xi' in self._glob:
            theta[self._glob['xi']] = xi_new[0]
        if s['mu_link']:
            theta[self._glob['alpha1c']], theta[self._glob['theta1']] = regress(np.log(-mu0))
        if s['sigma_link'] == 'linear':
            theta[self._glob['alpha2c']], theta[self._glob['theta2']] = regress(np.log(sigma_tilde))
        elif s['sigma_link'] == 'spline':
            if spline_a is not None and len(spline_a) == self.q:
                theta[self.spline_slice] = np.asarray(spline_a, dtype=float)
            else:
                P = build_penalty_matrix(self.q)
                lhs = self.design.T @ self.design + ridge * P + 1e-8 * np.eye(self.q)
                theta[self.spline_slice] = np.linalg.solve(lhs, self.design.T @ np.log(sigma_tilde))
        if s['beta_link']:
            positive = beta[beta > 0]
            floor = 1e-3 * float(np.max(positive)) if positive.size else 1e-3
            theta[self._glob['alpha3c']], theta[self._glob['theta3']] = regress(np.log(np.maximum(beta, floor)))
        if s['gamma_link']:
            alpha4c, theta4 = regress(g1)
            line = alpha4c + theta4 * x.ravel()
            if line.min() < 0:
                alpha4c += -line.min() + 1e-3
                line = alpha4c + theta4 * x.ravel()
            theta[self._glob['alpha4c']], theta[self._glob['theta4']] = alpha4c, theta4
            if s['two_suit']:
                eps = float(np.mean(g2 - g1))
                if (line + eps).min() < 0:
                    eps = -float(line.min()) + 1e-3
                theta[self._glob['epsilon']] = eps
        return theta

    def pack(self, source, pooled):
        """Internal vector holding exactly the given pooled links"""
        theta = self.initial_vector(source, spline_a=pooled.spline_a)
        c = self.center
        for name in self.global_names:
            if name.endswith('c'):
                stem = name[:-1]
                slope = getattr(pooled, 'theta' + stem[-1])
                theta[self._glob[name]] = getattr(pooled, stem) + slope * c
            else:
                theta[self._glob[name]] = getattr(pooled, name)
        return theta

    def relax(self, theta):
        """Move a starting vector toward feasibility: weaker trends, xi nearer 0"""
        theta = np.array(theta, dtype=float)
        block = theta[:self.n_events * len(self.per_event_names)].reshape(self.n_events, len(self.per_event_names))
        for name in ('beta', 'g1', 'g2'):
            if name in self._col:
                block[:, self._col[name]] *= 0.5
        if 'xi' in self._col:
            block[:, self._col['xi']] *= 0.8
        theta[:block.size] = block.ravel()
        if 'xi' in self._glob:
            theta[self._glob['xi']] *= 0.8
        if 'alpha3c' in self._glob:
            theta[self._glob['alpha3c']] -= math.log(2.0)
        for name in ('alpha4c', 'theta4', 'epsilon'):
            if name in self._glob:
                theta[self._glob[name]] *= 0.5
        return theta


def _rate_preserving_mu0(source, u, xi_new):
    """mu0 under a new xi that keeps each event's exceedance rate at t = 0"""
    mu0 = np.asarray(source.mu0, dtype=float).copy()
    xi_src = np.asarray(source.xi, dtype=float)
    changed = np.abs(xi_new - xi_src) > 1e-12
    if not np.any(changed):
        return mu0
    st = np.asarray(source.sigma_tilde, dtype=float)
    sigma0_src = st - xi_src * (u - mu0)
    rate = tail_term((u - mu0) / sigma0_src, xi_src)
    for i in np.flatnonzero(changed):
        x = xi_new[i]
        if abs(x) < 1e-9:
            mu0[i] = u[i] + st[i] * math.log(rate[i])
        else:
            sigma0 = st[i] * rate[i] ** x
            mu0[i] = u[i] - (st[i] - sigma0) / x
    return mu0


# Likelihood

class PooledLikelihood:
    """Interval-censored Poisson-process likelihood summed over events.

    Events are processed in event_id order so the reduction is reproducible.
    ``lambda_weights`` scale each event's integrated intensity (used when only a
    fraction of an event's points is present).
    """

    def __init__(self, datasets, layout, epochs, lambda_weights=None):
        if any(d.t_std is None for d in datasets):
            raise ValidationError("Datasets must be standardized before fitting")
        self.datasets = list(datasets)
        self.layout = layout
        E = len(self.datasets)
        self.u = np.array([d.threshold_u for d in self.datasets])
        self.lambda_weights = np.ones(E) if lambda_weights is None else np.asarray(lambda_weights, dtype=float)
        self.n_points = int(sum(len(d) for d in self.datasets))

        idx, xs, ts, f1s, f2s, ss = [], [], [], [], [], []
        node_rows, weight_rows = [], []
        self.edges = []
        for e, d in enumerate(self.datasets):
            edges = d.scaler.epochs_std(epochs)
            self.edges.append(edges)
            f1, f2 = suit_flags(d.t_std, edges)
            idx.append(np.full(len(d), e))
            xs.append(d.x)
            ts.append(d.t_std)
            f1s.append(f1)
            f2s.append(f2)
            ss.append(np.full(len(d), d.censor_s))
            bps = tuple(edges.ravel()) + tuple(d.scaler.boundaries_std)
            nodes, weights = quadrature_nodes(d.window[0], d.window[1], bps)
            node_rows.append(nodes)
            weight_rows.append(weights)
        self.idx = np.concatenate(idx) if idx else np.array([], dtype=int)
        self.x = np.concatenate(xs) if xs else np.array([])
        self.t = np.concatenate(ts) if ts else np.array([])
        self.f1 = np.concatenate(f1s) if f1s else np.array([])
        self.f2 = np.concatenate(f2s) if f2s else np.array([])
        self.s = np.concatenate(ss) if ss else np.array([])

        width = max(len(n) for n in node_rows)
        self.nodes = np.zeros((E, width))
        self.weights = np.zeros((E, width))
        for e, (n, w) in enumerate(zip(node_rows, weight_rows)):
            self.nodes[e, :len(n)] = n
            self.nodes[e, len(n):] = n[0]
            self.weights[e, :len(w)] = w
        self.node_f1 = np.zeros_like(self.nodes)
        self.node_f2 = np.zeros_like(self.nodes)
        for e, edges in enumerate(self.edges):
            self.node_f1[e], self.node_f2[e] = suit_flags(self.nodes[e], edges)

        if layout.design is not None:
            self.P = build_penalty_matrix(layout.q)
            self.mono_range = (float(np.min(layout.u_L)), float(np.max(layout.u_L)))
        else:
            self.P = None

    def event_terms(self, theta):
        """(sum of log censored terms, Lambda) per event; None if infeasible"""
        ea = self.layout.unpack(theta)
        if not ea.feasible:
            return None
        arrays = (ea.mu0, ea.sigma_tilde, ea.xi, ea.beta, ea.gamma1, ea.gamma2)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            return None
        i = self.idx
        mu = ea.mu0[i] + ea.beta[i] * self.t + ea.gamma1[i] * self.f1 + ea.gamma2[i] * self.f2
        sigma = ea.sigma_tilde[i] - ea.xi[i] * (self.u[i] - mu)
        if np.any(sigma <= 0):
            return None
        try:
            terms = censored_terms(self.x, self.s, mu, sigma, ea.xi[i])
        except (ParameterError, NumericalError):
            return None
        if np.any(terms <= 0) or not np.all(np.isfinite(terms)):
            return None

        u = self.u[:, None]
        mu_n = (ea.mu0[:, None] + ea.beta[:, None] * self.nodes
                + ea.gamma1[:, None] * self.node_f1 + ea.gamma2[:, None] * self.node_f2)
        sigma_n = ea.sigma_tilde[:, None] - ea.xi[:, None] * (u - mu_n)
        if np.any(sigma_n <= 0):
            return None
        rate = tail_term((u - mu_n) / sigma_n, ea.xi[:, None])
        lam = np.sum(self.weights * rate, axis=1)
        if not np.all(np.isfinite(lam)):
            return None
        log_terms = np.bincount(i, weights=np.log(terms), minlength=len(self.datasets))
        return log_terms, lam

    def loglik(self, theta):
        parts = self.event_terms(theta)
        if parts is None:
            return -np.inf
        log_terms, lam = parts
        return float(np.sum(log_terms - self.lambda_weights * lam))

    def event_logliks(self, theta):
        parts = self.event_terms(theta)
        if parts is None:
            return np.full(len(self.datasets), -np.inf)
        log_terms, lam = parts
        return log_terms - self.lambda_weights * lam

    def penalties(self, theta, monotone=True):
        """(p_r, p_m) of the log-scale spline; zeros for spline-free models"""
        if self.P is None:
            return 0.0, 0.0
        a = np.asarray(theta, dtype=float)[self.layout.spline_slice]
        p_r = roughness_penalty(a, self.P)
        p_m = monotonicity_penalty(a, self.layout.basis, *self.mono_range) if monotone else 0.0
        return p_r, p_m

    def penalized(self, theta, phi_r, phi_m):
        ll = self.loglik(theta)
        if not np.isfinite(ll) or self.P is None:
            return ll
        p_r, p_m = self.penalties(theta, monotone=phi_m > 0)
        return ll - phi_r * p_r - phi_m * p_m


def pooled_penalized_loglik(theta, datasets, phi_r, phi_m, layout, epochs):
    """l_p = sum_e l_e - phi_r a'Pa - phi_m p_m; -inf when infeasible"""
    return PooledLikelihood(datasets, layout, epochs).penalized(theta, phi_r, phi_m)


# Optimisation

@dataclass
class _Optimum:
    theta: np.ndarray
    value: float
    nit: int
    success: bool
    message: str
    grad_norm: float


def _maximize(objective, theta0, gtol, maxiter, n_obs):
    """BFGS on theta / scale with central-difference gradients; one restart"""
    scale = np.maximum(np.abs(theta0), MIN_SCALE)
    n_obs = max(n_obs, 1)

    def f(z):
        value = objective(z * scale)
        return -value / n_obs if np.isfinite(value) else BARRIER

    options = {'gtol': gtol, 'maxiter': maxiter}
    res = minimize(f, theta0 / scale, method='BFGS', jac='3-point', options=options)
    nit = int(res.nit)
    if not res.success:
        retry = minimize(f, res.x, method='BFGS', jac='3-point', options=options)
        nit += int(retry.nit)
        if retry.fun <= res.fun:
            res = retry
    grad = np.asarray(getattr(res, 'jac', np.zeros_like(res.x)), dtype=float)
    grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
    success = bool(res.success) or grad_norm < 100 * gtol
    return _Optimum(theta=res.x * scale, value=-res.fun * n_obs, nit=nit,
                    success=success, message=str(res.message), grad_norm=grad_norm)


def _feasible_start(lik, theta, phi_r=0.0):
    for _ in range(40):
        if np.isfinite(lik.penalized(theta, phi_r, 0.0)):
            return theta
        theta = lik.layout.relax(theta)
    raise ConvergenceError("Could not find a feasible starting point", last_iterate=theta.tolist())


# Fitted model

@dataclass
class FittedModel:
    model_id: str
    config: FitConfig
    event_ids: list
    thresholds: dict
    raw_thresholds: dict
    u_L: dict
    censor_s: float
    scalers: dict
    suit_epochs: SuitEpochs
    per_event: dict
    theta: list = field(default_factory=list)
    basis: SplineBasis | None = None
    pooled: PooledParams | None = None
    loglik: float = math.nan
    penalized_loglik: float = math.nan
    roughness: float = 0.0
    monotonicity: float = 0.0
    phi_r: float = 0.0
    phi_m: float = 0.0
    ric: float = math.nan
    effective_dof: float = math.nan
    n_params: int = 0
    iterations: int = 0
    converged: bool = True
    fixed_xi: float | None = None

    def gpd(self, event_id):
        return self.per_event[event_id].gpd(self.thresholds[event_id])

    def sigma_tilde(self, event_id):
        return self.per_event[event_id].sigma_tilde(self.thresholds[event_id])

    def scaler(self, event_id):
        return self.scalers[event_id]

    def epochs_std(self, event_id):
        return self.scalers[event_id].epochs_std(self.suit_epochs)

    def path(self, event_id):
        return SuitTrendPath(self.per_event[event_id], self.epochs_std(event_id))

    def layout(self):
        ids = sorted(self.event_ids)
        return ModelLayout(self.model_id, [self.u_L[e] for e in ids], [self.thresholds[e] for e in ids],
                           basis=self.basis, fixed_xi=self.fixed_xi, event_ids=ids)

    def event_arrays(self):
        ids = sorted(self.event_ids)
        spline_a = np.asarray(self.pooled.spline_a) if self.pooled and self.pooled.spline_a else None
        return EventArrays.from_event_params([self.per_event[e] for e in ids],
                                             [self.thresholds[e] for e in ids], spline_a)

    def with_theta(self, theta):
        """Same model at another parameter vector"""
        layout = self.layout()
        ea = layout.unpack(theta)
        ids = sorted(self.event_ids)
        per_event = dict(zip(ids, ea.event_params([self.thresholds[e] for e in ids])))
        return replace(self, theta=list(map(float, theta)), per_event=per_event,
                       pooled=layout.pooled_params(theta))

    @classmethod
    def from_event_params(cls, per_event, thresholds, scalers, suit_epochs, censor_s=0.01,
                          model_id='M1b', config=None, pooled=None, basis=None):
        """Model fixed at given parameters (simulation truths, hand-built tests)"""
        ids = sorted(per_event)
        return cls(
            model_id=model_id,
            config=config or FitConfig(model_id=model_id),
            event_ids=ids,
            thresholds={e: float(thresholds[e]) for e in ids},
            raw_thresholds={e: float(thresholds[e]) + censor_s / 2 for e in ids},
            u_L={e: math.log(-thresholds[e]) for e in ids},
            censor_s=censor_s,
            scalers=dict(scalers),
            suit_epochs=suit_epochs,
            per_event=dict(per_event),
            basis=basis,
            pooled=pooled,
        )

    def to_dict(self):
        return {
            'kind': 'evtpool.model',
            'format_version': MODEL_FORMAT_VERSION,
            'model_id': self.model_id,
            'config': self.config.to_dict(),
            'event_ids': list(self.event_ids),
            'thresholds': self.thresholds,
            'raw_thresholds': self.raw_thresholds,
            'u_L': self.u_L,
            'censor_s': self.censor_s,
            'scalers': {e: s.to_dict() for e, s in self.scalers.items()},
            'suit_epochs': self.suit_epochs.to_dict(),
            'per_event': {e: p.to_dict() for e, p in self.per_event.items()},
            'theta': list(self.theta),
            'basis': self.basis.to_dict() if self.basis else None,
            'pooled': self.pooled.to_dict() if self.pooled else None,
            'loglik': self.loglik,
            'penalized_loglik': self.penalized_loglik,
            'roughness': self.roughness,
            'monotonicity': self.monotonicity,
            'phi_r': self.phi_r,
            'phi_m': self.phi_m,
            'ric': self.ric,
            'effective_dof': self.effective_dof,
            'n_params': self.n_params,
            'iterations': self.iterations,
            'converged': self.converged,
            'fixed_xi': self.fixed_xi,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get('kind') != 'evtpool.model' or data.get('format_version') != MODEL_FORMAT_VERSION:
            raise ArtifactVersionError(
                f"Model artifact version {data.get('format_version')!r} is not supported",
                expected=MODEL_FORMAT_VERSION,
            )
        return cls(
            model_id=data['model_id'],
            config=FitConfig.from_dict(data['config']),
            event_ids=list(data['event_ids']),
            thresholds={e: float(v) for e, v in data['thresholds'].items()},
            raw_thresholds={e: float(v) for e, v in data['raw_thresholds'].items()},
            u_L={e: float(v) for e, v in data['u_L'].items()},
            censor_s=float(data['censor_s']),
            scalers={e: TimeScaler.from_dict(s) for e, s in data['scalers'].items()},
            suit_epochs=SuitEpochs.from_dict(data['suit_epochs']),
            per_event={e: EventParams.from_dict(p) for e, p in data['per_event'].items()},
            theta=[float(v) for v in data['theta']],
            basis=SplineBasis.from_dict(data['basis']) if data.get('basis') else None,
            pooled=PooledParams.from_dict(data['pooled']) if data.get('pooled') else None,
            loglik=data['loglik'],
            penalized_loglik=data['penalized_loglik'],
            roughness=data['roughness'],
            monotonicity=data['monotonicity'],
            phi_r=data['phi_r'],
            phi_m=data['phi_m'],
            ric=data['ric'],
            effective_dof=data['effective_dof'],
            n_params=int(data['n_params']),
            iterations=int(data['iterations']),
            converged=bool(data['converged']),
            fixed_xi=data.get('fixed_xi'),
        )


def default_basis(datasets, config):
    u_L = [d.u_L for d in datasets]
    return SplineBasis.uniform(min(u_L), max(u_L), q=config.spline_q, degree=config.spline_degree,
                               margin=config.spline_margin, clamped=config.spline_clamped)


def _start_arrays(datasets, epochs, config, two_suit, threads=1):
    """Per-event starting arrays from independent fits"""
    fits = Parallel(n_jobs=threads)(
        delayed(fit_event)(d, epochs, config, two_suit=two_suit) for d in datasets
    )
    return EventArrays.from_event_params([f.params for f in fits], [d.threshold_u for d in datasets])


def _schedule_settled(prev_ll, ll, p_m, config):
    """Monotone and the unpenalized log-likelihood moved less than loglik_tol (absolute)"""
    return p_m < config.monotone_tol and prev_ll is not None and abs(ll - prev_ll) < config.loglik_tol


def fit(datasets, config, epochs, start=None, basis=None, lambda_weights=None, threads=1, fixed_xi=None):
    """Penalised maximum likelihood with an escalating monotonicity weight.

    ``start`` may be a parameter vector of this model, a FittedModel of any
    model (warm start through the links) or None (independent fits first).
    """
    datasets = sorted(datasets, key=lambda d: d.event_id)
    if not datasets:
        raise InsufficientDataError("No event datasets to fit")
    structure = MODEL_STRUCTURE[config.model_id]
    if structure['sigma_link'] == 'spline':
        basis = basis or (start.basis if isinstance(start, FittedModel) and start.basis else None) \
            or default_basis(datasets, config)
    else:
        basis = None
    event_ids = [d.event_id for d in datasets]
    layout = ModelLayout(config.model_id, [d.u_L for d in datasets], [d.threshold_u for d in datasets],
                         basis=basis, fixed_xi=fixed_xi, event_ids=event_ids)
    lik = PooledLikelihood(datasets, layout, epochs, lambda_weights)

    if isinstance(start, FittedModel):
        if start.model_id == config.model_id and len(start.theta) == layout.size:
            theta = np.asarray(start.theta, dtype=float)
        else:
            src = start.event_arrays()
            theta = layout.initial_vector(src, spline_a=src.spline_a, ridge=max(config.phi_r, 1e-2))
    elif start is not None:
        theta = np.asarray(start, dtype=float)
    else:
        src = _start_arrays(datasets, epochs, config, structure['two_suit'], threads)
        theta = layout.initial_vector(src, ridge=max(config.phi_r, 1e-2))
    theta = _feasible_start(lik, theta, config.phi_r)

    schedule = config.phi_m_schedule if layout.q else (0.0,)
    phi_r = config.phi_r if layout.q else 0.0
    prev_ll, total_nit, converged = None, 0, True
    done = False
    for phi_m in schedule:
        opt = _maximize(lambda th: lik.penalized(th, phi_r, phi_m), theta, config.gtol, config.maxiter, lik.n_points)
        theta = opt.theta
        total_nit += opt.nit
        converged = converged and opt.success
        ll = lik.loglik(theta)
        p_r, p_m = lik.penalties(theta)
        log_event(logger, 'fit_round', model=config.model_id, phi_m=phi_m, loglik=ll, p_r=p_r, p_m=p_m,
                  iterations=opt.nit, success=opt.success)
        if not layout.q:
            done = True
            break
        if _schedule_settled(prev_ll, ll, p_m, config):
            done = True
            break
        prev_ll = ll
    if not done:
        raise ConvergenceError(
            f"{config.model_id}: monotonicity schedule ended without a fixed point",
            last_iterate=theta.tolist(), p_m=p_m,
        )

    fitted = _assemble(datasets, config, epochs, layout, theta, lik, phi_r, phi_m, total_nit, converged)
    if config.compute_ric:
        try:
            fitted.ric, fitted.effective_dof = ric(fitted, datasets, lik=lik)
        except RegularizationError as e:
            log_event(logger, 'ric_failed', level=30, model=config.model_id,
                      condition_number=e.condition_number)
    return fitted


def _assemble(datasets, config, epochs, layout, theta, lik, phi_r, phi_m, nit, converged):
    ll = lik.loglik(theta)
    p_r, p_m = lik.penalties(theta)
    ea = layout.unpack(theta)
    u = [d.threshold_u for d in datasets]
    return FittedModel(
        model_id=config.model_id,
        config=config,
        event_ids=[d.event_id for d in datasets],
        thresholds={d.event_id: d.threshold_u for d in datasets},
        raw_thresholds={d.event_id: d.raw_threshold_u_prime for d in datasets},
        u_L={d.event_id: d.u_L for d in datasets},
        censor_s=datasets[0].censor_s,
        scalers={d.event_id: d.scaler for d in datasets},
        suit_epochs=epochs,
        per_event=dict(zip([d.event_id for d in datasets], ea.event_params(u))),
        theta=[float(v) for v in theta],
        basis=layout.basis,
        pooled=layout.pooled_params(theta),
        loglik=ll,
        penalized_loglik=ll - phi_r * p_r - phi_m * p_m,
        roughness=p_r,
        monotonicity=p_m,
        phi_r=phi_r,
        phi_m=phi_m,
        n_params=layout.size,
        iterations=nit,
        converged=converged,
        fixed_xi=layout.fixed_xi,
    )


@dataclass
class IndependentFit:
    params: EventParams
    loglik: float
    theta: np.ndarray
    converged: bool


def _closed_form_start(dataset, xi0=-0.1):
    """Constant-rate starting values that reproduce the observed count"""
    u = dataset.threshold_u
    n = max(len(dataset), 1)
    length = dataset.window[1] - dataset.window[0]
    sigma_tilde = max(float(np.mean(dataset.x - u)), dataset.censor_s) * (1.0 - xi0)
    if abs(xi0) < 1e-9:
        mu0, sigma0 = u + sigma_tilde * math.log(n / length), sigma_tilde
    else:
        sigma0 = sigma_tilde * (n / length) ** xi0
        mu0 = u - (sigma_tilde - sigma0) / xi0
    g = 0.1 * math.sqrt(sigma_tilde)
    return EventParams(mu0=mu0, sigma0=sigma0, xi=xi0, beta=0.0, gamma1=g * g, gamma2=g * g)


def fit_event(dataset, epochs, config, two_suit=False, xi_fixed=None, start=None):
    """Independent fit of one event (models M1a / M1b)"""
    model_id = 'M1b' if two_suit else 'M1a'
    layout = ModelLayout(model_id, [dataset.u_L], [dataset.threshold_u], fixed_xi=xi_fixed,
                         event_ids=[dataset.event_id])
    lik = PooledLikelihood([dataset], layout, epochs)
    candidates = []
    if start is not None:
        candidates.append(start)
    candidates.append(_closed_form_start(dataset, -0.1 if xi_fixed is None else xi_fixed))
    theta = None
    for ep in candidates:
        src = EventArrays.from_event_params([ep], [dataset.threshold_u])
        trial = layout.initial_vector(src)
        if np.isfinite(lik.loglik(trial)):
            theta = trial
            break
    if theta is None:
        theta = _feasible_start(lik, trial)
    opt = _maximize(lik.loglik, theta, config.gtol, config.maxiter, lik.n_points)
    params = layout.unpack(opt.theta).event_params([dataset.threshold_u])[0]
    return IndependentFit(params=params, loglik=lik.loglik(opt.theta), theta=opt.theta, converged=opt.success)


def fit_independent(dataset, single_or_two_suit, epochs, config):
    """M1a ('single') or M1b ('two') parameters of one event"""
    if single_or_two_suit not in ('single', 'two'):
        raise ValidationError("single_or_two_suit must be 'single' or 'two'")
    return fit_event(dataset, epochs, config, two_suit=single_or_two_suit == 'two').params


def profile_xi_ci(dataset, epochs, config, two_suit=False, level=0.95, step=0.02, max_steps=50):
    """Profile-likelihood interval for one event's shape parameter.

    Returns (xi_hat, lo, hi); a side that cannot be bracketed is nan.
    """
    full = fit_event(dataset, epochs, config, two_suit=two_suit)
    xi_hat, ll_hat = full.params.xi, full.loglik
    target = ll_hat - chi2.ppf(level, 1) / 2

    def profile(xi):
        return fit_event(dataset, epochs, config, two_suit=two_suit, xi_fixed=xi, start=full.params).loglik - target

    def bound(direction):
        inner = xi_hat
        for _ in range(max_steps):
            outer = inner + direction * step
            if profile(outer) < 0:
                a, b = sorted((inner, outer))
                return brentq(profile, a, b, xtol=1e-6)
            inner = outer
        log_event(logger, 'profile_unbracketed', level=30, event_id=dataset.event_id, direction=direction)
        return math.nan

    return xi_hat, bound(-1), bound(+1)


# Information criterion

def ric(fitted, datasets, lik=None):
    """-2 l + 2 tr(I J^-1) with finite-difference Hessians.

    I is the observed information of the unpenalised likelihood, J that of the
    penalised one. Steps are hessian_rel_step * max(|theta_i|, 1).
    """
    config = fitted.config
    theta = np.asarray(fitted.theta, dtype=float)
    if lik is None:
        datasets = sorted(datasets, key=lambda d: d.event_id)
        lik = PooledLikelihood(datasets, fitted.layout(), fitted.suit_epochs)
    D = np.maximum(np.abs(theta), 1.0)

    def neg_ll(v):
        return -lik.loglik(theta + D * v)

    H = nd.Hessian(neg_ll, step=config.hessian_rel_step, method='central')(np.zeros_like(theta))
    info = H / np.outer(D, D)
    info = (info + info.T) / 2
    J = info.copy()
    sl = lik.layout.spline_slice
    if sl is not None and (fitted.phi_r > 0 or fitted.phi_m > 0):
        J[sl, sl] += 2.0 * fitted.phi_r * lik.P
        if fitted.phi_m > 0:
            a0 = theta[sl]
            Da = D[sl]
            lo, hi = lik.mono_range

            def pm(v):
                return fitted.phi_m * monotonicity_penalty(a0 + Da * v, lik.layout.basis, lo, hi)

            Hm = nd.Hessian(pm, step=config.hessian_rel_step, method='central')(np.zeros_like(a0))
            J[sl, sl] += (Hm + Hm.T) / 2 / np.outer(Da, Da)
    if not np.all(np.isfinite(J)):
        raise RegularizationError("Penalised Hessian is not finite", condition_number=math.inf)
    cond = float(np.linalg.cond(J))
    if not np.isfinite(cond) or cond > config.condition_limit:
        raise RegularizationError(f"Penalised information is ill-conditioned ({cond:.3g})", condition_number=cond)
    g = float(np.trace(np.linalg.solve(J, info)))
    return -2.0 * fitted.loglik + 2.0 * g, g


# Model ladder

@dataclass
class LadderRow:
    model: str
    constraints: str
    loglik: float
    n_params: int
    effective_dof: float
    ric: float
    delta_ric: float = math.nan

    def to_dict(self):
        return asdict(self)


def ladder_row(fitted):
    return LadderRow(model=fitted.model_id, constraints=LADDER_CONSTRAINTS[fitted.model_id],
                     loglik=fitted.loglik, n_params=fitted.n_params,
                     effective_dof=fitted.effective_dof, ric=fitted.ric)


def relative_to_baseline(rows, baseline='M1a'):
    """Fill delta_ric relative to the baseline row, ordered along the ladder"""
    rows = sorted(rows, key=lambda r: LADDER.index(r.model))
    base = next((r.ric for r in rows if r.model == baseline), math.nan)
    for r in rows:
        r.delta_ric = r.ric - base
    return rows


def fit_ladder(datasets, config, epochs, models=LADDER, threads=1):
    """Fit the requested rungs along the warm-start path of the ladder"""
    fitted = {}
    wanted = set(models)
    needed = set()
    for m in wanted:
        while m is not None:
            needed.add(m)
            m = LADDER_PARENT.get(m)
    for model_id in LADDER:
        if model_id not in needed:
            continue
        cfg = replace(config, model_id=model_id)
        parent = fitted.get(LADDER_PARENT.get(model_id))
        log_event(logger, 'ladder_fit', model=model_id, parent=parent.model_id if parent else None)
        fitted[model_id] = fit(datasets, cfg, epochs, start=parent, threads=threads)
    rows = relative_to_baseline([ladder_row(fitted[m]) for m in LADDER if m in wanted])
    return {m: fitted[m] for m in LADDER if m in wanted}, rows


# Cross-validation of phi_r

@dataclass
class CrossValidation:
    chosen: float
    grid: tuple
    mean_scores: dict
    scores: np.ndarray

    def to_rows(self):
        return [{'phi_r': phi, 'mean_score': self.mean_scores[phi]} for phi in self.grid]


def _stratified_splits(labels, n_events, folds, repeats, seed, max_attempts=20):
    for attempt in range(max_attempts):
        rskf = RepeatedStratifiedKFold(n_splits=folds, n_repeats=repeats, random_state=seed + attempt)
        splits = list(rskf.split(np.zeros(len(labels)), labels))
        if all(len(np.unique(labels[tr])) == n_events and len(np.unique(labels[te])) == n_events
               for tr, te in splits):
            return splits
        log_event(logger, 'cv_resample', level=30, attempt=attempt)
    raise InsufficientDataError("Could not build folds that contain every event")


def _cv_split(datasets, epochs, config, grid, labels, train_idx, test_idx, start, basis):
    offsets = np.cumsum([0] + [len(d) for d in datasets])
    train_mask = np.zeros(offsets[-1], dtype=bool)
    train_mask[train_idx] = True
    train, test, w_train, w_test = [], [], [], []
    for e, d in enumerate(datasets):
        mask = train_mask[offsets[e]:offsets[e + 1]]
        train.append(d.subset(mask))
        test.append(d.subset(~mask))
        w_train.append(mask.mean())
        w_test.append(1.0 - mask.mean())
    scores = []
    theta = np.asarray(start.theta, dtype=float)
    for phi_r in grid:
        cfg = replace(config, phi_r=phi_r, compute_ric=False)
        try:
            fold_fit = fit(train, cfg, epochs, start=theta, basis=basis, lambda_weights=w_train)
            theta_hat = fold_fit.theta
        except ConvergenceError as e:
            log_event(logger, 'cv_fold_unconverged', level=30, phi_r=phi_r)
            theta_hat = e.last_iterate
        held_out = PooledLikelihood(test, _held_out_layout(start, basis, datasets), epochs, w_test)
        scores.append(held_out.loglik(theta_hat))
    return scores


def _held_out_layout(start, basis, datasets):
    return ModelLayout(start.model_id, [d.u_L for d in datasets], [d.threshold_u for d in datasets],
                       basis=basis, fixed_xi=start.fixed_xi, event_ids=[d.event_id for d in datasets])


def cross_validate_phi_r(datasets, config, epochs, grid=None, folds=None, repeats=None, seed=None,
                         start=None, threads=1):
    """Choose phi_r by repeated stratified K-fold predictive log-likelihood.

    Folds are stratified by event and shared by every grid value. The held-out
    score is sum(log censored terms) - (held-out fraction) * Lambda. Ties go
    to the smallest phi_r.
    """
    datasets = sorted(datasets, key=lambda d: d.event_id)
    grid = tuple(sorted(grid or config.phi_r_grid))
    if not grid:
        raise ValidationError("phi_r grid is empty")
    if len(grid) == 1:
        return CrossValidation(chosen=grid[0], grid=grid, mean_scores={grid[0]: math.nan}, scores=np.empty((0, 1)))
    folds = folds or config.cv_folds
    repeats = repeats or config.cv_repeats
    seed = config.seed if seed is None else seed
    labels = np.concatenate([np.full(len(d), e) for e, d in enumerate(datasets)])
    splits = _stratified_splits(labels, len(datasets), folds, repeats, seed)
    if start is None:
        start = fit(datasets, replace(config, compute_ric=False), epochs, threads=threads)
    basis = start.basis

    results = Parallel(n_jobs=threads)(
        delayed(_cv_split)(datasets, epochs, config, grid, labels, tr, te, start, basis)
        for tr, te in splits
    )
    scores = np.asarray(results, dtype=float)
    means = scores.mean(axis=0)
    best = 0
    for k in range(1, len(grid)):
        if means[k] > means[best]:
            best = k
    log_event(logger, 'cv_done', grid=list(grid), mean_scores=means.tolist(), chosen=grid[best])
    return CrossValidation(chosen=grid[best], grid=grid,
                           mean_scores={phi: float(m) for phi, m in zip(grid, means)}, scores=scores)
