"""Exception hierarchy shared across the package."""


class TabMetaError(Exception):
    """Base class for all errors raised by tabmeta."""


class ConfigError(TabMetaError):
    pass


class DataError(TabMetaError):
    """Raised for malformed or unusable input data."""


class MissingColumn(DataError):
    def __init__(self, column, where=""):
        self.column = column
        msg = f"missing column {column!r}"
        if where:
            msg += f" in {where}"
        super().__init__(msg)


class TypeMismatch(DataError):
    pass


class EmptyTable(DataError):
    pass


class TooFewInstances(DataError):
    pass


class DegenerateDataset(UserWarning):
    """Warning: every training row is identical."""


class DimensionMismatch(ValueError, TabMetaError):
    pass


class ShapeMismatch(ValueError, TabMetaError):
    pass


class LengthMismatch(ValueError, TabMetaError):
    pass


class EmptyContext(TabMetaError):
    """A neighbor context is empty after exclusion."""


class ContextTooSmall(DataError):
    pass


class EmptyCorpus(TabMetaError):
    pass


class CorruptCheckpoint(TabMetaError):
    pass
