"""Exception and warning types shared by every stage of the pipeline.

The CLI maps these onto exit codes: configuration problems exit with 2,
``OSError`` with 3 and data-contract violations with 4.
"""


class VolsegError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(VolsegError, ValueError):
    """A parameter or input violates an operation's precondition."""


class RangeError(InvalidArgumentError):
    """A coordinate or box falls outside the volume it refers to."""


class FormatError(VolsegError):
    """An on-disk volume, tile or header is malformed."""


class ConfigError(VolsegError):
    """Configuration file or override could not be resolved."""


class ProtocolError(VolsegError):
    """The external predictor broke the framing protocol."""


class PredictorTimeout(ProtocolError):
    """The external predictor did not answer within the deadline."""


class PredictorError(VolsegError):
    """A predictor raised while processing a window."""

    def __init__(self, message, origin=None):
        super().__init__(message)
        self.origin = origin


class MissingChunksError(VolsegError):
    def __init__(self, chunk_ids):
        self.chunk_ids = list(chunk_ids)
        super().__init__("missing prediction chunks: " + ", ".join(self.chunk_ids))


class VolsegWarning(UserWarning):
    """Non-fatal condition worth surfacing in reports."""


class DegenerateInputWarning(VolsegWarning):
    pass


class NoSeedsWarning(VolsegWarning):
    pass


class CoverageWarning(VolsegWarning):
    pass


class PredictionClampedWarning(VolsegWarning):
    pass


class ReducedVariantsWarning(VolsegWarning):
    pass
