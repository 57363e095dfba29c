"""Kernel backend selection.

The compiled extension ``_ckernels`` is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is used.  Setting the environment
variable ``FBSDE_SMP_KERNELS=python`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("FBSDE_SMP_KERNELS", "").lower() == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels
        BACKEND = "python"

cubic_stencil = _impl.cubic_stencil
gather = _impl.gather
interp_many = _impl.interp_many
poly_backward = _impl.poly_backward
