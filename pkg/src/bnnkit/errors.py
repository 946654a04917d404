"""Shared exception and warning types."""


class BnnkitError(Exception):
    """Base class for package-specific errors."""


class ModelFormatError(BnnkitError):
    """A model or checkpoint file is malformed."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class HeaderBoundsError(ModelFormatError):
    """A header field claims an implausible size; refused before allocating."""


class CompileWarning(UserWarning):
    """Non-fatal oddity found while compiling (e.g. a dead batch-norm channel)."""
