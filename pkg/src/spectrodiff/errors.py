"""Exception types. Each carries the CLI exit code it maps to."""


class SpectrodiffError(Exception):
    exit_code = 1


class ValidationError(SpectrodiffError, ValueError):
    exit_code = 2


class ArtifactIOError(SpectrodiffError, OSError):
    exit_code = 3


class NumericError(SpectrodiffError, ArithmeticError):
    exit_code = 4


class ArtifactMismatchError(SpectrodiffError):
    exit_code = 5
