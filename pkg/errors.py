"""
Error hierarchy shared by every module, and the CLI exit code of each category.
"""


class DavocError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigError(DavocError):
    exit_code = 2


class DataError(DavocError):
    exit_code = 3


class NumericError(DavocError):
    exit_code = 4


class ThresholdBreach(DavocError):
    exit_code = 5


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the process exit code (0 is never returned)."""
    if isinstance(exc, DavocError):
        return exc.exit_code
    return 1
