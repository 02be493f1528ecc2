"""Exception types shared across the package."""


class UnipertError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(UnipertError):
    """Operands have incompatible shapes."""


class ZeroVectorError(UnipertError):
    """Both vectors of a cosine are numerically zero."""


class NonFiniteError(UnipertError):
    """A value that must be finite is NaN or infinite."""


class NonFiniteGradientError(NonFiniteError):
    """A gradient evaluation produced NaN/Inf; the run must abort."""


class BadMagicError(UnipertError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(UnipertError):
    """File is shorter (or longer) than its header declares."""


class RankOutOfRangeError(UnipertError):
    """Tensor rank outside the supported 1..4 range."""


class DuplicateSeedError(UnipertError):
    """Encoder ensemble seeds must be pairwise distinct."""


class PoolTooSmallError(UnipertError):
    """Requested more samples than the pool holds."""


class ImageTooSmallError(UnipertError):
    """Image smaller than one patch in some dimension."""


class KTooLargeError(UnipertError):
    """Requested more clusters than points."""


class VersionMismatchError(UnipertError):
    """On-disk artifact was built under a different configuration."""


class ConfigError(UnipertError):
    """Run configuration failed validation."""


class MissingPoolError(UnipertError):
    """An image pool directory is absent or empty."""
