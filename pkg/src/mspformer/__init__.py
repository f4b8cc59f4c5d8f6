# __init__.py

import os

# BLAS thread pools are sized when numpy is first imported, so this runs before any submodule.
_threads = os.environ.get("MSPF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
