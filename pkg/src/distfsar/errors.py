"""Exception types shared across the package."""


class DistFsarError(Exception):
    """Base class for all package errors."""


class ConfigError(DistFsarError):
    """Invalid or inconsistent configuration."""


class ZeroVectorError(DistFsarError):
    """Cosine distance requested for a zero-norm vector."""


class CountMismatchError(DistFsarError):
    """LLM response did not parse into the requested number of items."""

    def __init__(self, message, raw_response=None):
        super().__init__(message)
        self.raw_response = raw_response


class TransportError(DistFsarError):
    """LLM endpoint unreachable or returned a malformed payload."""


class FingerprintMismatchError(DistFsarError):
    """Stored artifact was produced under an incompatible configuration."""


class KnowledgeMissError(DistFsarError):
    """A class label required by an episode has no knowledge entry."""


class InsufficientDataError(DistFsarError):
    """Dataset cannot supply the requested episode layout."""


class SplitOverlapError(DistFsarError):
    """Class lists of two dataset splits intersect."""


class DegenerateSpecError(DistFsarError):
    """Synthetic dataset spec contains visually identical classes."""


class DivergenceError(DistFsarError):
    """Training loss became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
