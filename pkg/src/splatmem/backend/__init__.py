"""Kernel backend selection.

Two interchangeable implementations of the hot inner loops exist:

* ``jitted``    -- numba ``@njit`` kernels (default when numba imports),
* ``reference`` -- vectorized pure-numpy fallback.

``M3_BACKEND=numpy`` or ``M3_BACKEND=numba`` forces a choice. ``M3_THREADS``
caps the numba worker count; results are identical for any thread count
because every reduction runs in a fixed order.
"""

import os

from splatmem.backend import reference

TILE = 16
NEAR_PLANE = 0.01
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_EPS = 1e-4
LOWPASS = 0.3
# Cutoff radius in standard deviations: beyond it alpha < ALPHA_MIN for any
# opacity <= ALPHA_MAX, so binning by this radius never drops a fragment
# that the per-pixel cutoff would have kept.
R_CUT = 3.34


def _select() -> str:
    choice = os.environ.get("M3_BACKEND", "").strip().lower()
    if choice and choice not in ("numba", "numpy"):
        raise RuntimeError(f"M3_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise RuntimeError("M3_BACKEND=numba but numba is not importable")
        return "numpy"
    return "numba"


BACKEND = _select()

if BACKEND == "numba":
    import numba

    from splatmem.backend import jitted as _impl

    _req = os.environ.get("M3_THREADS", "").strip()
    if _req:
        numba.set_num_threads(max(1, min(int(_req), numba.config.NUMBA_NUM_THREADS)))
else:
    _impl = reference

composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
reduce_decide = _impl.reduce_decide
