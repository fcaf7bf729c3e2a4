"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ArgumentError(ValueError):
    """A value is outside an operation's documented domain."""


class ContractError(RuntimeError):
    """An internal precondition or invariant was violated."""


class EmptyRegionError(RuntimeError):
    """A spherical query matched no points; the caller decides the fallback."""


class ParseError(ValueError):
    """A data or grid file is malformed; message carries line/offset."""


class ConfigError(ValueError):
    """A run configuration is malformed or carries unknown keys."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or mismatches the model layout."""


class NonFiniteError(RuntimeError):
    """A forward pass produced NaN or Inf; message names the first bad tensor."""
