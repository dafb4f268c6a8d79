"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument value is outside its documented range."""


class ShapeError(ValueError):
    """Array/tensor shapes are inconsistent with the operation's contract."""


class NumericError(ArithmeticError):
    """A loss or score became NaN/Inf."""


class DatasetError(RuntimeError):
    """Dataset root is empty or unusable."""


class MissingHintError(KeyError):
    """A hint was requested for a sample id the provider does not know."""


class HintConsistencyError(RuntimeError):
    """Hint feature shapes drift across the dataset."""


class ChecksumError(RuntimeError):
    """A serialized container failed its integrity check."""


class VersionError(RuntimeError):
    """A serialized container carries an unsupported version tag."""
