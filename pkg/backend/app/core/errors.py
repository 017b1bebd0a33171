"""Exception hierarchy shared by services and commands.

Every error carries the process exit code the CLI reports for it:
0 ok, 1 usage, 2 IO, 3 numerical / degenerate input.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class LabError(Exception):
    exit_code: int = EXIT_NUMERICAL

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def __str__(self) -> str:
        return self.detail


# Usage class (bad arguments, bad configuration)
class UsageError(LabError):
    exit_code = EXIT_USAGE


class InvalidParameterError(UsageError):
    pass


class ShapeMismatchError(UsageError):
    pass


class InvalidDisparityError(UsageError):
    pass


# IO class
class StorageError(LabError):
    exit_code = EXIT_IO


class MalformedFileError(StorageError):
    pass


# Numerical class
class NumericalError(LabError):
    exit_code = EXIT_NUMERICAL


class RenderError(NumericalError):
    pass


class DegenerateInputError(NumericalError):
    pass


class UndefinedMetricError(NumericalError):
    pass


def check_same_shape(*arrays, names=None) -> None:
    """Raise ShapeMismatchError unless every array has the same 2D shape"""
    shapes = [tuple(a.shape) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ShapeMismatchError(f"Size mismatch between {label}: {shapes}")
