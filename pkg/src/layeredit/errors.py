"""Exception types shared across the package."""


class LayerEditError(Exception):
    """Base class for all errors raised by layeredit."""


class DimensionMismatchError(LayerEditError, ValueError):
    def __init__(self, message, *, index=None, expected=None, got=None):
        super().__init__(message)
        self.index = index
        self.expected = expected
        self.got = got


class LayerIndexError(LayerEditError, IndexError):
    pass


class CodecShapeError(LayerEditError, ValueError):
    """Raised when an image or latent does not fit the codec's patch grid."""

    def __init__(self, message, *, pad_h=0, pad_w=0):
        super().__init__(message)
        self.pad_h = pad_h
        self.pad_w = pad_w


class TokenShapeError(LayerEditError, ValueError):
    pass


class VelocityRequestError(LayerEditError, ValueError):
    pass


class EditStepError(LayerEditError, RuntimeError):
    """Wraps a model failure with the step index where it happened."""

    def __init__(self, step, cause):
        super().__init__(f"velocity evaluation failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


class ConfigError(LayerEditError, ValueError):
    pass


class EmptyRegionError(LayerEditError, ValueError):
    pass


class FeatureSetTooSmallError(LayerEditError, ValueError):
    pass


class ManifestParseError(LayerEditError, ValueError):
    def __init__(self, message, *, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.line = line
        self.field = field


class MissingLayerFileError(LayerEditError, FileNotFoundError):
    pass


class ManifestDimensionError(LayerEditError, ValueError):
    pass
