"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback takes over. Set ``DOFIELD_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("DOFIELD_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
sample_pdf = _impl.sample_pdf
segment_hits = _impl.segment_hits
capsule_sdf = _impl.capsule_sdf
marching_cubes = _impl.marching_cubes


def backends():
    """Return the importable backends as ``{name: module}``."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels  # type: ignore[attr-defined]

        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
