"""Exception hierarchy shared across the package.

Every failure a caller may want to branch on gets its own class; the CLI
maps them onto distinct exit codes.
"""


class AsdError(Exception):
    """Base class for all package errors."""


class AudioFormatError(AsdError):
    """WAV file is not 16-bit PCM mono at the expected sample rate."""


class ClipTooShortError(AsdError):
    """Input audio shorter than one analysis window (or stacking context)."""


class ParameterError(AsdError):
    """Invalid DSP or filterbank parameter (e.g. f_max above Nyquist)."""


class FitError(AsdError):
    """Normalization statistics cannot be fitted (empty or degenerate corpus)."""


class ShapeError(AsdError):
    """Tensor shapes inconsistent with the declared layer geometry."""


class ConfigError(AsdError):
    """Model or training configuration violates an invariant."""


class TrainingError(AsdError):
    """Training aborted (non-finite loss/gradient, empty dataset, ...)."""


class IngestError(AsdError):
    """Manifest rejected; message itemizes offending lines."""


class CacheError(AsdError):
    """Feature cache or norm-stats prerequisite missing or unusable."""


class IntegrityError(AsdError):
    """Checkpoint or artifact failed its checksum / lineage check."""


class EvaluationError(AsdError):
    """Metric computation impossible (empty class, floor(p*N-) == 0, ...)."""
