"""Hot-kernel backend selection.

Prefers the compiled Cython module; falls back to the pure-numpy twin when
the extension was not built. ``ADVTEX_BACKEND=python|cython`` forces a
backend (forcing ``cython`` raises if the extension is missing).
"""

import os

_forced = os.environ.get("ADVTEX_BACKEND", "").strip().lower()

if _forced == "python":
    from . import _impl_py as _impl

    BACKEND = "python"
elif _forced == "cython":
    from . import _impl_cy as _impl  # noqa: F401  (ImportError is the contract)

    BACKEND = "cython"
else:
    try:
        from . import _impl_cy as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _impl_py as _impl

        BACKEND = "python"

raster_triangles = _impl.raster_triangles
conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter


def available_backends():
    """Names of importable backends, compiled one first."""
    names = []
    try:
        from . import _impl_cy  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    names.append("python")
    return names


def get_backend(name):
    """Return the implementation module for ``name`` ('cython' or 'python')."""
    if name == "cython":
        from . import _impl_cy

        return _impl_cy
    if name == "python":
        from . import _impl_py

        return _impl_py
    raise ValueError(f"unknown kernel backend: {name!r}")
