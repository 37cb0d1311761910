"""Pick the compiled kernel module if it was built, else the numpy fallback.

Set ``S2FP8_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

kernels = _pykernels
if os.environ.get("S2FP8_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = _pykernels

BACKEND = kernels.NAME


def available() -> dict:
    """All importable kernel modules keyed by name (used by tests and benchmarks)."""
    mods = {_pykernels.NAME: _pykernels}
    try:
        from . import _ckernels

        mods[_ckernels.NAME] = _ckernels
    except ImportError:
        pass
    return mods
