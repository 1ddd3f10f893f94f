"""Coordinate index backend selection and coordinate-row packing.

Coordinate rows (batch, axes...) are packed into int64 keys so membership
queries run through one flat hash/search structure. The compiled extension is
preferred when importable; a numpy fallback gives identical results. Set
VOXPIPE_BACKEND=python (or =compiled) to force a backend.
"""

from __future__ import annotations

import logging
import os

import numpy as np

from . import _kernels_py
from .errors import ConfigError, ValidationError

logger = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

_FORCED = os.environ.get("VOXPIPE_BACKEND", "auto").lower()
if _FORCED not in ("auto", "python", "compiled"):
    raise ConfigError(f"unknown VOXPIPE_BACKEND value: {_FORCED!r}")
if _FORCED == "compiled" and _compiled is None:
    raise ConfigError("VOXPIPE_BACKEND=compiled but the extension is not built")

_ACTIVE = _kernels_py if _FORCED == "python" or _compiled is None else _compiled


def backend_name() -> str:
    """Name of the active coordinate-index backend."""
    return "compiled" if _ACTIVE is not None and _ACTIVE is _compiled else "python"


# 16 bits per packed field: batch plus up to three axes
_FIELD_BITS = 16
_AXIS_BIAS = 1 << (_FIELD_BITS - 1)
_AXIS_MIN = -_AXIS_BIAS
_AXIS_MAX = _AXIS_BIAS - 1
_BATCH_MAX = (1 << _FIELD_BITS) - 1
MAX_PACKED_DIM = 3


def packable_dim(dim: int) -> bool:
    return 1 <= dim <= MAX_PACKED_DIM


def pack_rows(rows: np.ndarray) -> np.ndarray:
    """Pack (N, 1+D) coordinate rows into int64 keys, D <= 3.

    Field 0 is the batch index (unsigned 16 bit), each axis gets a biased
    16-bit field. Raises ValidationError when values do not fit.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 2:
        raise ValidationError("coordinate rows must be a 2-D array")
    dim = rows.shape[1] - 1
    if not packable_dim(dim):
        raise ValidationError(f"packing supports 1..{MAX_PACKED_DIM} axes, got {dim}")
    if rows.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    batch = rows[:, 0]
    axes = rows[:, 1:]
    if batch.min() < 0 or batch.max() > _BATCH_MAX:
        raise ValidationError(f"batch index out of packable range [0, {_BATCH_MAX}]")
    if axes.min() < _AXIS_MIN or axes.max() > _AXIS_MAX:
        raise ValidationError(
            f"coordinate axis out of packable range [{_AXIS_MIN}, {_AXIS_MAX}]"
        )
    keys = batch.astype(np.uint64)
    for d in range(dim):
        field = (axes[:, d] + _AXIS_BIAS).astype(np.uint64)
        keys = (keys << np.uint64(_FIELD_BITS)) | field
    return keys.view(np.int64).copy()


class CoordIndex:
    """Row lookup over packed int64 coordinate keys."""

    def __init__(self, keys: np.ndarray):
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        self._a, self._b = _ACTIVE.build_table(keys)

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Row index per query key; -1 where the key is absent."""
        queries = np.ascontiguousarray(queries, dtype=np.int64)
        return _ACTIVE.lookup(self._a, self._b, queries)


class TupleCoordIndex:
    """Dict-based index over raw coordinate rows, for dimensions beyond
    the packable range. Same lookup contract as CoordIndex."""

    def __init__(self, rows: np.ndarray):
        self._map: dict[tuple[int, ...], int] = {}
        for i, row in enumerate(np.asarray(rows, dtype=np.int64)):
            self._map.setdefault(tuple(int(v) for v in row), i)

    def lookup(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty(len(rows), dtype=np.int64)
        get = self._map.get
        for i, row in enumerate(rows):
            out[i] = get(tuple(int(v) for v in row), -1)
        return out


def coord_index(rows: np.ndarray):
    """Build the best available index over (N, 1+D) coordinate rows."""
    rows = np.asarray(rows, dtype=np.int64)
    dim = rows.shape[1] - 1
    if packable_dim(dim):
        try:
            return _PackedRowIndex(rows)
        except ValidationError:
            logger.debug("coordinate range exceeds packing; using tuple index")
    return TupleCoordIndex(rows)


class _PackedRowIndex:
    """CoordIndex wrapper that packs row queries itself."""

    def __init__(self, rows: np.ndarray):
        self._index = CoordIndex(pack_rows(rows))

    def lookup(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        # queries shifted by kernel offsets may leave the packable range;
        # such rows cannot be in the table, so they are plain misses
        ok = (
            (rows[:, 0] >= 0)
            & (rows[:, 0] <= _BATCH_MAX)
            & (rows[:, 1:] >= _AXIS_MIN).all(axis=1)
            & (rows[:, 1:] <= _AXIS_MAX).all(axis=1)
        )
        if ok.all():
            return self._index.lookup(pack_rows(rows))
        out = np.full(len(rows), -1, dtype=np.int64)
        if ok.any():
            out[ok] = self._index.lookup(pack_rows(rows[ok]))
        return out
