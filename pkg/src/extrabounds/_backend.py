"""Select the kernel backend at import time.

The compiled extension is preferred. Setting ``EXTRABOUNDS_BACKEND=python``
forces the numpy fallback, which grows bitwise-identical trees.
"""

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if os.environ.get("EXTRABOUNDS_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as kernels  # noqa: F811
        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        kernels = _pykernels


def get_kernels(name=None):
    """Return a kernel module by name (``"compiled"`` or ``"python"``)."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "compiled":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
