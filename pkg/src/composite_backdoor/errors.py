"""Exception types shared across the toolkit."""


class InvalidSpecError(ValueError):
    """A trigger specification is malformed (bad kind, shape, or magnitude)."""


class ConfigError(ValueError):
    """Experiment configuration failed validation.

    ``field`` carries the dotted path of the offending entry when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class ManifestError(ValueError):
    """A poison manifest is internally inconsistent (corrupted records)."""


class ProvenanceError(RuntimeError):
    """Content hashes of linked artifacts do not match."""


class TrainingFailureError(RuntimeError):
    """Training diverged. ``last_checkpoint`` holds the last finite state."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class ProbeFailureError(RuntimeError):
    """A defense probe failed mid-run. ``partial_report`` holds what completed."""

    def __init__(self, message, partial_report=None):
        super().__init__(message)
        self.partial_report = partial_report


class StoreLockError(RuntimeError):
    """Another process holds the run directory's lock."""
