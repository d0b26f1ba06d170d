"""Exception types shared across the package."""


class HsfmError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(HsfmError):
    """A point sits on or behind the image plane."""


class DegenerateConfiguration(HsfmError):
    """Point sets too degenerate for a unique alignment."""


class ParseError(HsfmError):
    """A scene file could not be decoded."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class SchemaMismatch(HsfmError):
    """File contents disagree with the scene manifest or template."""


class MissingCamera(HsfmError):
    """The manifest references a per-camera file that does not exist."""


class UnknownCamera(HsfmError):
    """Camera id not present in the world state."""


class NoMultiViewHuman(HsfmError):
    """No human is observed by at least two cameras."""


class MissingAnchorView(HsfmError):
    """The anchor person has no estimate in a required camera."""


class InsufficientKeypoints(HsfmError):
    """No bone passes the confidence/length gates for placement."""


class DegenerateScale(HsfmError):
    """All data-driven camera positions coincide; scale is unobservable."""


class NonFiniteGradient(HsfmError):
    """Gradient became non-finite even after the retry policy."""


class Diverged(HsfmError):
    """Total loss became non-finite even after the retry policy."""


class ConfigError(HsfmError):
    """Inconsistent synthetic-scene or optimizer configuration."""


class UndefinedMetric(HsfmError):
    """Metric is undefined for this scene (e.g. group alignment with one human)."""
