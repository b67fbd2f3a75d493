"""Multi-modal semantic segmentation on a small autograd engine.

Importing the package pins the BLAS thread pools to ``MULTIMOD_THREADS``
(default 1) *before* numpy loads them: threaded GEMM reductions do not
promise a fixed summation order, and the training loop guarantees bitwise
reproducibility. Set ``MULTIMOD_THREADS`` (or the usual ``*_NUM_THREADS``
variables) beforehand to trade that guarantee for speed.
"""

import os as _os

_threads = _os.environ.get("MULTIMOD_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .tensor import (  # noqa: E402
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
    set_debug_checks,
)
from .gradcheck import grad_check, run_battery  # noqa: E402
from .kernels import BACKEND as KERNEL_BACKEND  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "default_dtype",
    "no_grad",
    "precision",
    "set_debug_checks",
    "grad_check",
    "run_battery",
    "KERNEL_BACKEND",
    "__version__",
]
