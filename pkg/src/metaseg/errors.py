"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigError -> 2, data ingestion errors -> 3,
every other MetasegError -> 4.
"""


class MetasegError(Exception):
    """Base class for all package errors."""


class ParameterError(MetasegError, ValueError):
    """A scalar parameter is out of its documented range."""


class ShapeError(MetasegError, ValueError):
    """Array dimensions are missing, mismatched, or too small."""


class InfeasibleSparsityError(MetasegError):
    """The requested sparsity cannot be produced from this mask; resample."""


class NoLabelsError(MetasegError):
    """A loss was asked to average over zero labeled pixels."""


class MissingClassError(MetasegError):
    """An operation needs at least one labeled pixel of each class."""


class EpisodeSamplingError(MetasegError):
    """Episode sampling exhausted its retry budget."""


class MetaStepError(MetasegError):
    """Every episode of a meta-batch failed; no update possible."""


class ConfigError(MetasegError):
    """Invalid or inconsistent experiment configuration."""


class IngestionError(MetasegError):
    """Dataset directory is malformed (missing files, broken pairing)."""


class FormatError(MetasegError):
    """A file's pixel values violate the documented encoding."""


class EvalError(MetasegError):
    """Evaluation preconditions not met (e.g. too few target samples)."""


class ReportError(MetasegError):
    """Report emission failed (e.g. no records)."""
