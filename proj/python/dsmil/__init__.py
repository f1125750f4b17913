"""Dual-stream multiple-instance learning toolkit (C++ core)."""

from ._dsmil import *  # noqa: F401,F403
from ._dsmil import __version__  # noqa: F401
