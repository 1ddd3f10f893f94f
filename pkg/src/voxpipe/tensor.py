"""Sparse tensors as coordinate/feature matrix pairs.

A sparse tensor stores N coordinate rows (batch index plus D voxel axes) next
to N feature vectors of width D_f, plus a per-axis tensor stride giving the
voxel-unit spacing of its lattice. Values are immutable after construction and
all operations here are pure functions, so instances are safe to share across
threads.

Also provides voxelization of point clouds, deterministic point dropout,
batching, and lossless JSON/binary serialization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import StructuralError, ValidationError

_BINARY_MAGIC = b"VXSP"
_BINARY_VERSION = 1


def _dedupe_check(coords: np.ndarray) -> None:
    if len(coords) == 0:
        return
    unique = np.unique(coords, axis=0)
    if len(unique) != len(coords):
        raise StructuralError("duplicate (batch, coords) rows")


@dataclass(frozen=True)
class SparseTensor:
    """Immutable (coords, features) pair with tensor-stride bookkeeping.

    coords: int64 array of shape (N, 1+D), column 0 the batch index.
    features: float64 array of shape (N, D_f).
    tensor_stride: D positive ints, voxel units per lattice step.
    """

    coords: np.ndarray
    features: np.ndarray
    tensor_stride: tuple[int, ...]

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] < 2:
            raise StructuralError("coords must have shape (N, 1+D) with D >= 1")
        if features.ndim != 2:
            raise StructuralError("features must have shape (N, D_f)")
        if len(coords) != len(features):
            raise StructuralError("coords and features row counts differ")
        stride = tuple(int(s) for s in self.tensor_stride)
        if len(stride) != coords.shape[1] - 1:
            raise StructuralError("tensor_stride length must equal D")
        if any(s < 1 for s in stride):
            raise ValidationError("tensor_stride entries must be positive")
        if len(coords) and coords[:, 0].min() < 0:
            raise ValidationError("batch indices must be non-negative")
        if len(coords):
            axes = coords[:, 1:]
            if (axes % np.asarray(stride, dtype=np.int64)).any():
                raise ValidationError(
                    "coordinate axes must be multiples of the tensor stride"
                )
        if not np.isfinite(features).all():
            raise ValidationError("features must be finite")
        _dedupe_check(coords)
        coords.setflags(write=False)
        features.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "tensor_stride", stride)

    @property
    def dim(self) -> int:
        return self.coords.shape[1] - 1

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensor):
            return NotImplemented
        return (
            self.tensor_stride == other.tensor_stride
            and self.coords.shape == other.coords.shape
            and self.features.shape == other.features.shape
            and bool(np.array_equal(self.coords, other.coords))
            and bool(np.array_equal(self.features, other.features))
        )


@dataclass(frozen=True)
class PointCloud:
    """Raw points in world units with optional per-point features."""

    points: np.ndarray
    features: Optional[np.ndarray] = None
    batch_index: int = 0

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] < 1:
            raise StructuralError("points must have shape (N, D) with D >= 1")
        if not np.isfinite(points).all():
            raise ValidationError("point components must be finite")
        feats = self.features
        if feats is not None:
            feats = np.ascontiguousarray(feats, dtype=np.float64)
            if feats.ndim != 2 or len(feats) != len(points):
                raise StructuralError("features must be (N, D_f) matching points")
            if not np.isfinite(feats).all():
                raise ValidationError("point features must be finite")
            feats.setflags(write=False)
        if self.batch_index < 0:
            raise ValidationError("batch_index must be non-negative")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "features", feats)


def _first_seen_groups(coords: np.ndarray):
    """Group identical rows preserving first-seen order.

    Returns (unique_rows, inverse) where inverse maps each input row to its
    group id and groups are numbered by first appearance.
    """
    uniq, first_idx, inverse = np.unique(
        coords, axis=0, return_index=True, return_inverse=True
    )
    order = np.argsort(first_idx, kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order), dtype=np.int64)
    return uniq[order], rank[np.asarray(inverse, dtype=np.int64).ravel()]


def voxelize(
    cloud: PointCloud, voxel_size: float, resolution: Sequence[int]
) -> SparseTensor:
    """Quantize a point cloud onto a voxel grid.

    Each point maps to floor(p / voxel_size) clamped to [0, resolution-1].
    Points landing in the same voxel are merged: features are averaged, or a
    single occupancy feature 1.0 is emitted when the cloud has no features.
    Output rows appear in first-seen order and carry tensor_stride 1.
    """
    if voxel_size <= 0:
        raise ValidationError("voxel_size must be positive")
    res = np.asarray([int(r) for r in resolution], dtype=np.int64)
    dim = cloud.points.shape[1]
    if len(res) != dim or (res < 1).any():
        raise ValidationError("resolution must list D positive integers")
    n = len(cloud.points)
    feat_width = 1 if cloud.features is None else cloud.features.shape[1]
    if n == 0:
        return SparseTensor(
            np.empty((0, 1 + dim), dtype=np.int64),
            np.empty((0, feat_width), dtype=np.float64),
            (1,) * dim,
        )
    voxels = np.floor(cloud.points / voxel_size).astype(np.int64)
    np.clip(voxels, 0, res - 1, out=voxels)
    rows = np.concatenate(
        [np.full((n, 1), cloud.batch_index, dtype=np.int64), voxels], axis=1
    )
    uniq, group = _first_seen_groups(rows)
    counts = np.bincount(group, minlength=len(uniq)).astype(np.float64)
    if cloud.features is None:
        feats = np.ones((len(uniq), 1), dtype=np.float64)
    else:
        feats = np.zeros((len(uniq), feat_width), dtype=np.float64)
        np.add.at(feats, group, cloud.features)
        feats /= counts[:, None]
    return SparseTensor(uniq, feats, (1,) * dim)


def dropout(t: SparseTensor, keep_ratio: float, seed: int) -> SparseTensor:
    """Keep exactly ceil(keep_ratio * N) rows, chosen by a seeded PRNG.

    Kept rows preserve their relative order; keep_ratio 1 returns an equal
    tensor. Callers wanting the uniformly jittered ratio of randomized
    sparsity schedules should sample their own ratio and pass it in.
    """
    if not 0 < keep_ratio <= 1:
        raise ValidationError("keep_ratio must be in (0, 1]")
    n = len(t)
    if n == 0 or keep_ratio == 1:
        return t
    keep = int(np.ceil(keep_ratio * n))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=keep, replace=False))
    return SparseTensor(t.coords[chosen], t.features[chosen], t.tensor_stride)


def batch(tensors: Sequence[SparseTensor]) -> SparseTensor:
    """Concatenate tensors, reassigning batch_index = input position."""
    if not tensors:
        raise StructuralError("batch() needs at least one tensor")
    dim = tensors[0].dim
    width = tensors[0].feature_width
    stride = tensors[0].tensor_stride
    for t in tensors[1:]:
        if t.dim != dim or t.feature_width != width or t.tensor_stride != stride:
            raise StructuralError("batched tensors must share D, D_f and stride")
    coords = []
    feats = []
    for i, t in enumerate(tensors):
        c = t.coords.copy()
        c[:, 0] = i
        coords.append(c)
        feats.append(t.features)
    out_coords = np.concatenate(coords, axis=0)
    out_feats = np.concatenate(feats, axis=0)
    # flattening a multi-batch input onto one index can collide; surface it
    # as a structural error rather than silently merging rows
    try:
        return SparseTensor(out_coords, out_feats, stride)
    except StructuralError as exc:
        raise StructuralError(f"batching produced duplicate rows: {exc}") from exc


def split_batches(t: SparseTensor) -> list[SparseTensor]:
    """Inverse of batch(): one tensor per batch index, rows in stored order."""
    out = []
    if len(t) == 0:
        return out
    for b in range(int(t.coords[:, 0].max()) + 1):
        mask = t.coords[:, 0] == b
        coords = t.coords[mask].copy()
        coords[:, 0] = 0
        out.append(SparseTensor(coords, t.features[mask], t.tensor_stride))
    return out


def to_json(t: SparseTensor) -> str:
    """Serialize to the interchange JSON object (lossless)."""
    obj = {
        "dim": t.dim,
        "feature_width": t.feature_width,
        "tensor_stride": list(t.tensor_stride),
        "coords": t.coords.tolist(),
        "features": t.features.tolist(),
    }
    return json.dumps(obj)


def from_json(text: str) -> SparseTensor:
    obj = json.loads(text)
    try:
        dim = int(obj["dim"])
        width = int(obj["feature_width"])
        stride = tuple(int(s) for s in obj["tensor_stride"])
        coords = np.asarray(obj["coords"], dtype=np.int64).reshape(-1, 1 + dim)
        feats = np.asarray(obj["features"], dtype=np.float64).reshape(-1, width)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed sparse tensor JSON: {exc}") from exc
    return SparseTensor(coords, feats, stride)


def to_binary(t: SparseTensor) -> bytes:
    """Little-endian row-major binary form; round-trips losslessly."""
    header = struct.pack(
        "<4sIIIQ", _BINARY_MAGIC, _BINARY_VERSION, t.dim, t.feature_width, len(t)
    )
    stride = np.asarray(t.tensor_stride, dtype="<i8").tobytes()
    coords = np.ascontiguousarray(t.coords, dtype="<i8").tobytes()
    feats = np.ascontiguousarray(t.features, dtype="<f8").tobytes()
    return header + stride + coords + feats


def from_binary(blob: bytes) -> SparseTensor:
    head_size = struct.calcsize("<4sIIIQ")
    if len(blob) < head_size:
        raise ValidationError("binary sparse tensor truncated")
    magic, version, dim, width, n = struct.unpack("<4sIIIQ", blob[:head_size])
    if magic != _BINARY_MAGIC or version != _BINARY_VERSION:
        raise ValidationError("unrecognized binary sparse tensor header")
    off = head_size
    stride = np.frombuffer(blob, dtype="<i8", count=dim, offset=off)
    off += 8 * dim
    coords = np.frombuffer(blob, dtype="<i8", count=n * (1 + dim), offset=off)
    off += 8 * n * (1 + dim)
    feats = np.frombuffer(blob, dtype="<f8", count=n * width, offset=off)
    off += 8 * n * width
    if off != len(blob):
        raise ValidationError("binary sparse tensor has trailing bytes")
    return SparseTensor(
        coords.reshape(n, 1 + dim).copy(),
        feats.reshape(n, width).copy(),
        tuple(int(s) for s in stride),
    )
