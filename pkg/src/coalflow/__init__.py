"""Simulation laboratory for coalescing Brownian flows with drift."""

from __future__ import annotations

import os as _os

__version__ = "0.1.0"

# The worker count must reach numba before it is first imported.
if "COALFLOW_THREADS" in _os.environ and "NUMBA_NUM_THREADS" not in _os.environ:
    _os.environ["NUMBA_NUM_THREADS"] = _os.environ["COALFLOW_THREADS"]
# Skip the TBB probe; results never depend on the threading layer.
_os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
