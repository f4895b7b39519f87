"""Failure kinds raised across the lab; the CLI maps them to exit codes."""


class LabError(Exception):
    """Base class for every failure the lab reports on purpose."""

    exit_code = 1


class InvalidArgumentError(LabError, ValueError):
    exit_code = 2


class UnsupportedRegimeError(LabError):
    """A closed form was asked for outside the range it was derived on."""

    exit_code = 3


class ResourceLimitError(LabError):
    exit_code = 3


class InvariantViolation(LabError, AssertionError):
    """A structural identity of the coalescent failed on a concrete sample."""

    exit_code = 1


def require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidArgumentError(message)
