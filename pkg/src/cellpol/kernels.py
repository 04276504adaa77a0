"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``CELLPOL_PURE_PYTHON=1`` to force the numpy implementations.
``BACKEND`` names the implementation in use.
"""

import os

from . import _pykernels

if os.environ.get("CELLPOL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels
        BACKEND = "python"

tridiag_solve = _impl.tridiag_solve
mm_reaction = _impl.mm_reaction
mm_reaction_partials = _impl.mm_reaction_partials

__all__ = ["BACKEND", "tridiag_solve", "mm_reaction", "mm_reaction_partials"]
