"""
Policy Lab Errors
Every failure the library raises derives from PolicyLabError so commands can
map them onto exit codes in one place.
"""


class PolicyLabError(Exception):
    """Base class for lab errors."""


class InvalidRangeError(PolicyLabError, ValueError):
    """A numeric argument is outside its documented range."""


class ShapeError(PolicyLabError, ValueError):
    """Tensor widths or lengths do not agree."""


class SamplerMismatchError(PolicyLabError):
    """A diffusion sampler was requested for a head that does not denoise."""


class UnknownTaskError(PolicyLabError, ValueError):
    """Task kind not known to the simulator."""


class UnreachableTaskError(PolicyLabError):
    """The scripted expert cannot satisfy the task's success predicate."""


class DatasetIOError(PolicyLabError, OSError):
    """Reading or writing episode files failed."""


class CheckpointError(PolicyLabError):
    """Checkpoint missing, truncated or corrupt."""

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class ConfigValidationError(PolicyLabError):
    """Run config failed serializer validation."""

    def __init__(self, errors):
        self.errors = errors
        super().__init__(format_errors(errors))


def format_errors(errors):
    """Format serializer errors into a single message."""
    messages = []
    for field, error_list in errors.items():
        if isinstance(error_list, dict):
            error_list = [format_errors(error_list)]
        elif not isinstance(error_list, (list, tuple)):
            error_list = [error_list]
        for error in error_list:
            if field == 'non_field_errors':
                messages.append(str(error))
            else:
                messages.append(f"{field}: {error}")
    return " | ".join(messages) if messages else "Validation failed."
