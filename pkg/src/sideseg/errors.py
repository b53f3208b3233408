"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array arrived with dimensions that violate a module contract."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(RuntimeError):
    """Dataset files are missing, unreadable, or mutually inconsistent."""


class NumericError(RuntimeError):
    """A non-finite value surfaced where the math guarantees finiteness."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for this input (e.g. empty ground truth)."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint IO failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not a checkpoint of ours."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint version is unsupported."""


class CheckpointIntegrityError(CheckpointError):
    """The payload is truncated or longer than the manifest declares."""


class CheckpointManifestError(CheckpointError):
    """A manifest entry disagrees with the payload layout."""
