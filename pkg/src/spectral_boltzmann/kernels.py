"""Backend selection for the collision loops.

The compiled module is used when it imports; setting
SPECTRAL_BOLTZMANN_BACKEND=python forces the NumPy fallback.
"""

import os

from . import _pykernels

BACKEND_ENV = "SPECTRAL_BOLTZMANN_BACKEND"


def _load():
    if os.environ.get(BACKEND_ENV, "").lower() == "python":
        return _pykernels, "python"
    try:
        from . import _ckernels
    except ImportError:
        return _pykernels, "python"
    return _ckernels, "compiled"


backend, BACKEND = _load()


def get(name: str | None = None):
    """Kernel module by name ('compiled' or 'python'); default is the active one."""
    if name is None:
        return backend
    if name == "python":
        return _pykernels
    if name == "compiled":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
