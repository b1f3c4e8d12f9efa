"""Exception types shared across the package."""


class PartLearnError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PartLearnError, ValueError):
    pass


class InvalidStateError(PartLearnError, RuntimeError):
    pass


class ImageError(PartLearnError):
    """Base class for PPM/PGM decoding failures."""


class MissingImageError(ImageError, FileNotFoundError):
    pass


class MalformedHeaderError(ImageError):
    pass


class TruncatedPayloadError(ImageError):
    pass


class BundleError(PartLearnError):
    pass


class BundleVersionError(BundleError):
    pass


class CorruptBundleError(BundleError):
    pass


class ManifestError(PartLearnError):
    """Raised for manifests that fail schema validation or reference missing files."""
