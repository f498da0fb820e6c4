"""Backend selection for the per-pixel stain kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``MITOSHIFT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
nnls2 = _kernels_py.nnls2
lasso_cd = _kernels_py.lasso_cd

if os.environ.get("MITOSHIFT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        nnls2 = _ckernels.nnls2
        lasso_cd = _ckernels.lasso_cd

__all__ = ["BACKEND", "nnls2", "lasso_cd"]
