"""Hybrid CNN / windowed-attention segmentation network on a numpy
autodiff core, with a training harness, metrics, and checkpoint I/O."""

import os as _os

# Thread cap must land in the environment before numpy loads its BLAS.
# No effect if numpy was already imported by the embedding process.
_threads = _os.environ.get("HIFORMER_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .config import DlfConfig, ModelConfig, build_config, validate_config
from .model import HiFormer, build_model
from .nn import SGD, init_parameters
from .params import audit, count_parameters
from .tensor import Parameter, Tensor, debug_checks, no_grad

__version__ = "0.1.0"

__all__ = [
    "DlfConfig",
    "HiFormer",
    "ModelConfig",
    "Parameter",
    "SGD",
    "Tensor",
    "audit",
    "build_config",
    "build_model",
    "count_parameters",
    "debug_checks",
    "init_parameters",
    "no_grad",
    "validate_config",
    "__version__",
]
