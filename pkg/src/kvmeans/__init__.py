"""Block sliding-window attention with a compressive, growable KV state."""

import os as _os

# Honor the thread cap before numpy loads its BLAS backend.
_threads = _os.environ.get("KVMEANS_NUM_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
