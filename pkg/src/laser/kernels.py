"""Kernel backend selection.

The compiled extension is used when it imports; ``LASER_KERNELS=python``
forces the numpy fallback.  Both backends expose ``forward``, ``backward``
and ``sample_tokens`` with identical signatures.
"""

from __future__ import annotations

import os

from laser import _pykernels

python = _pykernels
compiled = None
try:
    from laser import _ckernels as compiled  # type: ignore[no-redef]
except ImportError:  # extension not built
    compiled = None

if os.environ.get("LASER_KERNELS", "").lower() == "python" or compiled is None:
    impl = _pykernels
    BACKEND = "python"
else:
    impl = compiled
    BACKEND = "cython"


def get(name: str | None = None):
    """Return a backend module by name (``"python"``/``"cython"``) or the active one."""
    if name is None:
        return impl
    if name == "python":
        return _pykernels
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
