"""Exception hierarchy. The CLI maps each family to an exit code."""


class AudioRetError(Exception):
    exit_code = 1


class ConfigError(AudioRetError, ValueError):
    """Invalid configuration, shapes or hyperparameters (exit 1)."""


class UsageError(AudioRetError):
    """API used outside its contract (exit 1)."""


class DataError(AudioRetError):
    """Bad or unresolvable input data (exit 2)."""

    exit_code = 2


class EmptyAudio(DataError):
    pass


class DegenerateAudio(DataError):
    pass


class InsufficientData(DataError):
    pass


class EmptyQuery(DataError):
    pass


class EmptyCaptionSet(DataError):
    pass


class ParseError(DataError):
    pass


class BadMagic(ParseError):
    pass


class BadVersion(ParseError):
    pass


class TruncatedFile(ParseError):
    pass


class NumericError(AudioRetError):
    """Non-finite values during training (exit 3)."""

    exit_code = 3
