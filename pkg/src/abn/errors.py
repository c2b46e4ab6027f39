"""Exception hierarchy shared across the package."""


class AbnError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(AbnError):
    """Invalid or unknown configuration key/value."""


class DataError(AbnError):
    """Domain object violates an invariant (bad interval, shape, ...)."""


class AnnotationError(DataError):
    """Annotation file is malformed or holds out-of-range segments."""


class BundleError(AbnError):
    """Feature-bundle file cannot be read or written."""


class BundleVersionError(BundleError):
    """Bundle file carries an unsupported format version."""


class BundleTruncatedError(BundleError):
    """Bundle payload is shorter than the manifest declares."""


class BundleInconsistentError(BundleError):
    """Bundle manifest and payload disagree (offsets, counts, sizes)."""


class CheckpointError(AbnError):
    """Checkpoint file is malformed or carries an unsupported version."""


class PackingError(AbnError):
    """Requested synthetic actions cannot be packed into the video."""


class DivergenceError(AbnError):
    """Training produced a non-finite loss."""
