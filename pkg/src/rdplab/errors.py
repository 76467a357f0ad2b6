"""Exception types shared across the package."""


class RdpLabError(Exception):
    """Base class for all rdplab errors."""


class ConfigError(RdpLabError):
    """Invalid or unparseable configuration. Exit code 1 at the CLI."""


class DimensionMismatchError(RdpLabError):
    """Tensor shape violates an operation's contract."""


class BitstreamError(RdpLabError):
    """Corrupted, truncated, or mismatched bitstream."""


class RateDriftError(RdpLabError):
    """Bitstreams are no longer byte-identical across a fixed-rate sweep."""


class TrainingDivergedError(RdpLabError):
    """Non-finite loss encountered during optimization."""


class FrozenParameterError(RdpLabError):
    """A parameter that was frozen for rate fixing has changed."""
