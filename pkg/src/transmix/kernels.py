"""Backend selection for the likelihood kernels.

The compiled extension is used when it imports; setting the environment
variable ``TRANSMIX_PURE_PYTHON=1`` forces the NumPy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("TRANSMIX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _kernels_py

loglik_matrix = _impl.loglik_matrix
cluster_objective = _impl.cluster_objective
maximize_cluster = _impl.maximize_cluster


def backends():
    """Return ``{name: module}`` for every importable kernel backend."""
    found = {"python": _kernels_py}
    try:
        from ._ext import _kernels
        found["cython"] = _kernels
    except ImportError:  # pragma: no cover
        pass
    return found
