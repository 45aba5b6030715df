"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to tag its one-line
failure message.
"""


class AlnBeamError(Exception):
    category = "data"


class ConfigError(AlnBeamError):
    category = "config"


class FormatError(AlnBeamError):
    category = "format"


class DataError(AlnBeamError):
    category = "data"


class StateError(AlnBeamError):
    category = "state"


class ShapeError(AlnBeamError, ValueError):
    category = "data"


class VocabularyError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SupervisionError(DataError):
    pass


class TrainingError(AlnBeamError):
    category = "state"


class UnsupportedVersionError(FormatError):
    pass
