"""Volumetric classification with global attention and built-in localization."""

import os as _os

# Cap BLAS/OpenMP threads before numpy is first imported so the setting takes
# effect. Best effort: if numpy was already imported by the host process the
# environment variables are left alone and the cap is a no-op.
_threads = _os.environ.get("VOLFORMER_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    DataError,
    ParseError,
    PlanError,
    ShapeError,
    StateError,
)
from .tensor import Tensor, backward, count_ops, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "count_ops",
    "no_grad",
    "ShapeError",
    "StateError",
    "ConfigError",
    "DataError",
    "PlanError",
    "ParseError",
    "CheckpointError",
    "__version__",
]
