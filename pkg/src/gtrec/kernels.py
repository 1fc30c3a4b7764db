"""Backend selection for the hot ranking/sampling kernels.

The compiled extension is used when it imports; setting ``GTREC_PURE_PYTHON=1``
forces the numpy fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("GTREC_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def backends() -> dict:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _impl(backend):
    if backend is None:
        return _compiled or _kernels_py
    return backends()[backend]


def _prep(scores, exclude):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if exclude is not None:
        exclude = np.ascontiguousarray(exclude, dtype=np.uint8)
    return scores, exclude


def target_ranks(scores, targets, key_rank, exclude=None, backend=None):
    scores, exclude = _prep(scores, exclude)
    return _impl(backend).target_ranks(
        scores,
        np.ascontiguousarray(targets, dtype=np.int64),
        np.ascontiguousarray(key_rank, dtype=np.int64),
        exclude,
    )


def topk(scores, k, key_rank, exclude=None, backend=None):
    scores, exclude = _prep(scores, exclude)
    k = min(int(k), scores.shape[1])
    return _impl(backend).topk(scores, k, np.ascontiguousarray(key_rank, dtype=np.int64), exclude)


def window_pool(event_items, event_users, lo, hi, user, exclude, backend=None):
    return _impl(backend).window_pool(
        np.ascontiguousarray(event_items, dtype=np.int64),
        np.ascontiguousarray(event_users, dtype=np.int64),
        int(lo), int(hi), int(user),
        np.ascontiguousarray(exclude, dtype=np.uint8),
    )
