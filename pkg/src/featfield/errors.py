"""Exception types shared across the package.

The CLI maps these onto exit codes, so every module raises from this set
instead of defining its own ad-hoc classes.
"""


class FeatFieldError(Exception):
    """Base class for all package errors."""


class ConfigError(FeatFieldError, ValueError):
    pass


class NonPositiveDepth(FeatFieldError, ValueError):
    pass


class ShapeMismatch(FeatFieldError, ValueError):
    pass


class NonScalarLoss(FeatFieldError, ValueError):
    pass


class EmptyViewList(FeatFieldError, ValueError):
    pass


class EmptySamples(FeatFieldError, ValueError):
    pass


class LengthMismatch(FeatFieldError, ValueError):
    pass


class ChannelMismatch(FeatFieldError, ValueError):
    pass


class FormatError(FeatFieldError, IOError):
    """Base for on-disk format problems."""


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class TruncatedFile(FormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: truncated file, expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class TensorShapeMismatch(FormatError):
    pass


class InsufficientViews(FeatFieldError, ValueError):
    pass


class NonFiniteLoss(FeatFieldError, ArithmeticError):
    def __init__(self, step: int, last_checkpoint=None):
        msg = f"non-finite loss at step {step}"
        if last_checkpoint is not None:
            msg += f"; last good checkpoint: {last_checkpoint}"
        super().__init__(msg)
        self.step = step
        self.last_checkpoint = last_checkpoint


class ZeroVector(FeatFieldError, ValueError):
    pass


class NoValidTargetPixels(FeatFieldError, ValueError):
    pass


class NoValidSourcePixels(FeatFieldError, ValueError):
    pass


class EmptyCandidates(FeatFieldError, ValueError):
    pass


class PartAbsent(FeatFieldError, ValueError):
    pass
