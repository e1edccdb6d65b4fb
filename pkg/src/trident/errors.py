"""Exception types shared across the engine."""


class TridentError(Exception):
    """Base class for all engine errors."""


class ValidationError(TridentError, ValueError):
    """Input data violates a documented invariant (non-finite values, bad ranges)."""


class ShapeError(ValidationError):
    """Array dimensions do not agree with the operation's contract."""


class ConfigError(TridentError, ValueError):
    """Run configuration is inconsistent or names unknown options."""


class BundleError(TridentError):
    """An on-disk bundle is missing pieces or fails cross-validation."""


class DecoderError(TridentError):
    """The promptable-decoder backend failed or returned an invalid response."""
