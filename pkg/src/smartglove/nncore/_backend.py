"""Selects the LSTM recurrence kernel at import time.

The compiled extension is used when it is importable; set
``SMARTGLOVE_PURE_PYTHON=1`` to force the numpy fallback.
"""
import logging
import os

from . import _lstm_py

log = logging.getLogger(__name__)

_ext = None
if os.environ.get("SMARTGLOVE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _lstm_ext as _ext
    except ImportError:  # not built; fallback below
        log.debug("compiled LSTM kernel unavailable, using numpy fallback")
        _ext = None

BACKENDS = {"python": _lstm_py}
if _ext is not None:
    BACKENDS["compiled"] = _ext

ACTIVE = "compiled" if _ext is not None else "python"


def get(name=None):
    """Return the kernel module ``name`` (default: the active one)."""
    return BACKENDS[name or ACTIVE]
