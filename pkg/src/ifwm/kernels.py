"""Kernel backend selection.

The compiled extension (ifwm._kernels, Cython) is used when importable; the
pure-numpy module is the fallback.  IFWM_KERNELS=python|compiled|auto forces
the choice; "compiled" raises if the extension is missing.  All callers go
through this module's attributes so tests can monkeypatch single kernels.
"""

from __future__ import annotations

import os

from ifwm.errors import ConfigError
from ifwm import _kernels_np

_choice = os.environ.get("IFWM_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise ConfigError(f"IFWM_KERNELS must be auto, compiled or python, got {_choice!r}")

_impl = None
if _choice != "python":
    try:
        from ifwm import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = None

if _impl is None:
    _impl = _kernels_np
    BACKEND = "python"
else:
    BACKEND = "compiled"

conv_out_len = _impl.conv_out_len
im2col = _impl.im2col
col2im = _impl.col2im
upsample_fwd = _impl.upsample_fwd
upsample_bwd = _impl.upsample_bwd
grid_sample_fwd = _impl.grid_sample_fwd
grid_sample_bwd = _impl.grid_sample_bwd
