"""Exception taxonomy shared across the engine."""


class KdfsError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(KdfsError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(KdfsError):
    """A non-shape precondition was violated (bad scalar, wrong mode, ...)."""


class NumericError(KdfsError):
    """A computed quantity is non-finite; the message names the term."""


class DataError(KdfsError):
    """Dataset contents violate their invariants (label range, counts)."""


class FormatError(KdfsError):
    """A binary file does not look like the format it claims to be."""


class CorruptionError(FormatError):
    """Checksum mismatch: the file is the right format but damaged."""


class VersionError(FormatError):
    """The file's format version is not supported by this build."""


class ConfigError(KdfsError):
    """Run configuration is malformed or contains unknown keys."""


class DependencyError(KdfsError):
    """A pipeline phase is missing an artifact produced by an earlier one."""


class LockError(KdfsError):
    """The output directory is already owned by another run."""
