"""Exception hierarchy shared across the toolkit."""


class ScdError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ScdError, ValueError):
    """Grid/tensor dimensions do not match what the operation requires."""


class DegenerateMaskError(ScdError, ValueError):
    """An operation received an empty mask where a nonempty one is required."""


class LabelError(ScdError, ValueError):
    """A label value lies outside the configured class range."""


class NumericalError(ScdError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(ScdError, ValueError):
    """Invalid configuration value."""


class AdapterError(ScdError, RuntimeError):
    """Base class for failures of external model adapters."""


class CaptionerUnavailable(AdapterError):
    """The captioner adapter failed after all retries."""


class SegmenterUnavailable(AdapterError):
    """The open-vocabulary segmenter adapter failed."""


class TrackerUnavailable(AdapterError):
    """The mask-propagation tracker adapter failed."""


class MatcherUnavailable(AdapterError):
    """The dense-correspondence matcher adapter failed."""


class EncoderUnavailable(AdapterError):
    """The image encoder adapter failed."""


class RetrieverUnavailable(AdapterError):
    """The place-recognition retriever adapter failed."""


class NotFoundError(ScdError, KeyError):
    """Unknown pair or instance id."""


class ConflictError(ScdError, RuntimeError):
    """A state transition was attempted on an already finalized record."""


class CaptionParseWarning(UserWarning):
    """A captioner response could not be parsed into any list items."""
