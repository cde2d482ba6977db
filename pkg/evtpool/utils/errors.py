"""Exception hierarchy shared by the library and the command line.

Every error carries a short machine ``code`` and the process ``exit_code`` the
CLI uses when it reaches the top level: 2 for bad input, 3 for an artifact
written by an incompatible version, 1 for everything else.
"""


class EvtPoolError(Exception):
    """Base class for all evtpool errors"""

    code = 'internal_error'
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        payload = {'code': self.code, 'message': self.message}
        for key, value in self.details.items():
            payload[key] = value
        return payload


# Input errors (exit 2)

class InputError(EvtPoolError):
    code = 'input_error'
    exit_code = 2


class ParseError(InputError):
    code = 'parse_error'

    def __init__(self, message, line=None, **details):
        super().__init__(message, line=line, **details)
        self.line = line


class ValidationError(InputError):
    code = 'validation_error'


class InsufficientDataError(InputError):
    code = 'insufficient_data'


class DegenerateCovariateError(InputError):
    code = 'degenerate_covariate'


class ConfigError(InputError):
    code = 'config_error'


class MissingInputError(InputError):
    code = 'missing_input'

    def __init__(self, path):
        super().__init__(f"Input file not found: {path}", path=str(path))
        self.path = str(path)


# Artifact errors (exit 3)

class ArtifactVersionError(EvtPoolError):
    code = 'artifact_version'
    exit_code = 3


# Numerical and model errors (exit 1)

class DomainError(EvtPoolError, ValueError):
    code = 'domain_error'


class NoFiniteEndpointError(EvtPoolError):
    code = 'no_finite_endpoint'


class NotRankableError(EvtPoolError):
    code = 'not_rankable'


class DimensionError(EvtPoolError):
    code = 'dimension_error'


class ParameterError(EvtPoolError):
    code = 'parameter_error'


class ConstraintViolationError(EvtPoolError):
    code = 'constraint_violation'


class NumericalError(EvtPoolError):
    code = 'numerical_error'


class QuadratureAccuracyError(NumericalError):
    code = 'quadrature_accuracy'


class RegularizationError(NumericalError):
    code = 'regularization_error'

    def __init__(self, message, condition_number=None, **details):
        super().__init__(message, condition_number=condition_number, **details)
        self.condition_number = condition_number


class ConvergenceError(EvtPoolError):
    code = 'convergence_error'

    def __init__(self, message, last_iterate=None, **details):
        super().__init__(message, **details)
        self.last_iterate = last_iterate


class EnsembleDegeneracyError(EvtPoolError):
    code = 'ensemble_degeneracy'


class RecordBeyondModelError(EvtPoolError):
    code = 'record_beyond_model'


class ConsistencyError(EvtPoolError):
    code = 'consistency_error'
