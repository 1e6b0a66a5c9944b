"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
its documented status codes without a lookup table.
"""


class ManifoldControlError(Exception):
    exit_code = 4


class ConfigError(ManifoldControlError):
    exit_code = 2


class ExpressionError(ConfigError):
    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (column {position + 1})")
        self.position = position


class ValidationFailure(ManifoldControlError):
    exit_code = 3


class DomainError(ManifoldControlError, ValueError):
    pass


class NoSaddleError(ValidationFailure):
    pass


class NotASaddleError(ValidationFailure):
    pass


class CoverageError(ValidationFailure):
    pass


class MappabilityError(ValidationFailure):
    pass


class WindowError(ManifoldControlError, ValueError):
    pass


class EscapeError(ManifoldControlError):
    def __init__(self, message, exit_time, exit_point=None):
        super().__init__(message)
        self.exit_time = exit_time
        self.exit_point = exit_point


class BudgetError(ManifoldControlError):
    pass


class StencilError(ManifoldControlError, ValueError):
    pass


class NearSaddleError(ManifoldControlError, ValueError):
    pass


class TruncationError(ManifoldControlError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FieldError(ManifoldControlError):
    pass
