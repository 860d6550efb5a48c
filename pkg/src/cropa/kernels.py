"""Backend selection for the fused vision-encoder kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``CROPA_KERNELS=python`` to force the fallback.
"""

import os

from . import _encoder_py

_forced = os.environ.get("CROPA_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = _encoder_py
    BACKEND = "python"
else:
    try:
        from . import _encoder as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise
        _impl = _encoder_py
        BACKEND = "python"

encoder_forward = _impl.encoder_forward
encoder_backward = _impl.encoder_backward


def backends() -> dict:
    """Every importable backend by name."""
    found = {"python": _encoder_py}
    try:
        from . import _encoder

        found["compiled"] = _encoder
    except ImportError:
        pass
    return found
