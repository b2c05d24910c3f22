"""Exception types shared across the package."""


class DiffspotError(Exception):
    """Base class for all package-specific errors."""


class ManifestError(DiffspotError):
    """Malformed or invalid dataset manifest (parse errors carry a line number)."""


class ValidationError(DiffspotError):
    """A domain invariant was violated (mask/label mismatch, bad shapes, ...)."""


class CheckpointError(DiffspotError):
    """Corrupt, truncated, or incompatible checkpoint archive."""


class NumericError(DiffspotError):
    """Non-finite value encountered where finite numbers are required."""


class ConfigError(DiffspotError):
    """Invalid run configuration (unknown key, bad value, unparsable file)."""


class ConflictingOverrideError(ConfigError):
    """The same config key was assigned two different values on the command line."""
