"""Exception types shared across file formats and configuration loading."""


class MilattnError(Exception):
    """Base class for errors raised by this package."""


class FormatError(MilattnError, ValueError):
    """A binary or text artifact does not conform to its declared layout."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File declares a format version this build cannot read."""


class CorruptPayloadError(FormatError):
    """File header and payload disagree, or the payload holds invalid values."""


class DuplicateCoordinateError(FormatError):
    """Two entries claim the same patch coordinate within one store."""


class DimensionMismatchError(MilattnError, ValueError):
    """Two artifacts that must share a dimension do not."""


class ConfigError(MilattnError, ValueError):
    """A config file or override is malformed or names an unknown field."""
