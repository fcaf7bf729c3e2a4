"""Learnable local-region formation for hierarchical point-cloud classification.

The package trains center-shift and radius-update modules end to end inside
a small set-abstraction classifier.  Everything runs on float64 numpy with a
tape-based reverse-mode differentiator, single-threaded and fully seeded so
runs are reproducible byte for byte.
"""

import os as _os

# Pin BLAS to one thread before numpy spins up its pools: reductions must be
# bitwise reproducible regardless of the host's core count.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from . import abstraction, csm, geometry, harness, loss, rum, tensor  # noqa: E402
from .errors import (  # noqa: E402
    ArgumentError,
    CheckpointError,
    ConfigError,
    ContractError,
    EmptyRegionError,
    NonFiniteError,
    ParseError,
    ShapeError,
)

__all__ = [
    "tensor",
    "geometry",
    "csm",
    "rum",
    "loss",
    "abstraction",
    "harness",
    "ArgumentError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "EmptyRegionError",
    "NonFiniteError",
    "ParseError",
    "ShapeError",
]

__version__ = "0.1.0"
