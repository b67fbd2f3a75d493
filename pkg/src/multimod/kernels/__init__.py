"""Backend selection for the convolution hot loops.

The environment variable ``MULTIMOD_KERNELS`` picks the implementation:

* ``numba`` -- require the jitted backend, fail loudly if numba is absent.
* ``numpy`` -- force the pure-numpy fallback.
* unset    -- prefer numba, silently fall back to numpy.

The choice is made once at import time and exposed as ``BACKEND`` so logs
and run manifests can record which code path produced a result. Both
backends implement the identical contract and agree to float tolerance;
``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

_requested = os.environ.get("MULTIMOD_KERNELS", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ValueError(
        f"MULTIMOD_KERNELS={_requested!r}: expected 'numba', 'numpy' or unset"
    )

if _requested == "numpy":
    from . import numpy_backend as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_backend as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import numpy_backend as _impl

        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_kernel = _impl.conv2d_grad_kernel

__all__ = ["BACKEND", "conv2d_forward", "conv2d_grad_input", "conv2d_grad_kernel"]
