"""Exception hierarchy shared by the library and the command line."""


class EchoactError(Exception):
    """Base class for every error raised deliberately by echoact."""


class UsageError(EchoactError):
    """Bad command-line usage or unknown configuration keys."""


class ConfigError(EchoactError, ValueError):
    """A parameter set violates its invariants (bands, tap counts, shapes)."""


class DataError(EchoactError, ValueError):
    """Input data is malformed, too short, or inconsistent."""


class NumericalError(EchoactError, ArithmeticError):
    """Training or inference produced non-finite values."""
