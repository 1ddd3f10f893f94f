"""Reference CPU implementation of generalized sparse convolution.

The convolution runs in three steps: generate output coordinates from the
input coordinates and the layer stride, build a kernel map linking input rows
to output rows per kernel offset through a hash index over the input
coordinates, then accumulate weighted features along those links
(gather-matmul-scatter). Outputs exist only at generated output coordinates
and missing neighbors contribute nothing; there is no implicit padding.

A dense cross-correlation with zero padding is included as the oracle for
fully occupied inputs, plus analytic backward passes for gradient checking
and profiling.
"""

from __future__ import annotations

import itertools
import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import StructuralError, ValidationError
from .kernels import coord_index
from .tensor import SparseTensor

_WEIGHTS_MAGIC = b"VXCW"
_WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class KernelShape:
    """Set of integer offsets swept by the kernel, centered at the origin."""

    dim: int
    extents: tuple[int, ...]
    offsets: np.ndarray  # (K, dim) int64

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        if offsets.ndim != 2 or offsets.shape[1] != self.dim:
            raise StructuralError("offsets must have shape (K, dim)")
        if len(np.unique(offsets, axis=0)) != len(offsets):
            raise StructuralError("kernel offsets must be distinct")
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))

    @classmethod
    def hypercubic(cls, dim: int, size: int | tuple[int, ...]) -> "KernelShape":
        """Full cross-product of centered per-axis offsets, odd extents."""
        extents = (size,) * dim if isinstance(size, int) else tuple(size)
        if len(extents) != dim:
            raise StructuralError("need one extent per axis")
        if any(e < 1 or e % 2 == 0 for e in extents):
            raise ValidationError("hypercubic extents must be odd and positive")
        ranges = [range(-(e // 2), e // 2 + 1) for e in extents]
        offsets = np.array(list(itertools.product(*ranges)), dtype=np.int64)
        return cls(dim, extents, offsets)

    @classmethod
    def custom(cls, dim: int, offsets) -> "KernelShape":
        offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, dim)
        extent = tuple(
            int(2 * np.abs(offsets[:, d]).max() + 1) if len(offsets) else 1
            for d in range(dim)
        )
        return cls(dim, extent, offsets)

    @property
    def num_offsets(self) -> int:
        return len(self.offsets)


@dataclass(frozen=True)
class ConvWeights:
    """One (n_out, n_in) matrix per kernel offset, in offset order."""

    matrices: np.ndarray  # (K, n_out, n_in) float64

    def __post_init__(self):
        mats = np.ascontiguousarray(self.matrices, dtype=np.float64)
        if mats.ndim != 3:
            raise StructuralError("weights must have shape (K, n_out, n_in)")
        if not np.isfinite(mats).all():
            raise ValidationError("weight entries must be finite")
        mats.setflags(write=False)
        object.__setattr__(self, "matrices", mats)

    @property
    def num_offsets(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_out(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_in(self) -> int:
        return self.matrices.shape[2]

    def nbytes(self) -> int:
        return int(self.matrices.nbytes)


@dataclass(frozen=True)
class KernelMap:
    """Per-offset (input_row, output_row) links.

    For offset i the linked rows satisfy
    coords_in[input_row] == coords_out[output_row] + i * tensor_stride_in,
    i.e. output u gathers the input at u + i (scaled to voxel units).
    """

    offsets: np.ndarray  # (K, dim)
    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]  # per offset (in, out)

    def total_pairs(self) -> int:
        return int(sum(len(p[0]) for p in self.pairs))


def generate_output_coords(
    t: SparseTensor, stride: int | tuple[int, ...]
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Output coordinate rows and the new tensor stride for a given layer
    stride.

    Stride 1 keeps the input coordinates. Stride s > 1 downsamples: distinct
    values of floor(coord / (tensor_stride * s)) scaled back to voxel units,
    new stride = old * s. First-seen row order is preserved.
    """
    stride_t = (stride,) * t.dim if isinstance(stride, int) else tuple(stride)
    if len(stride_t) != t.dim or any(s < 1 for s in stride_t):
        raise ValidationError("stride must list D positive integers")
    new_stride = tuple(o * s for o, s in zip(t.tensor_stride, stride_t))
    if all(s == 1 for s in stride_t):
        return t.coords.copy(), new_stride
    if len(t) == 0:
        return np.empty((0, 1 + t.dim), dtype=np.int64), new_stride
    step = np.asarray(new_stride, dtype=np.int64)
    rows = t.coords.copy()
    rows[:, 1:] = (rows[:, 1:] // step) * step
    uniq, first_idx = np.unique(rows, axis=0, return_index=True)
    return uniq[np.argsort(first_idx, kind="stable")], new_stride


def build_kernel_map(
    in_coords: np.ndarray,
    out_coords: np.ndarray,
    shape: KernelShape,
    in_stride: tuple[int, ...],
) -> KernelMap:
    """Link input rows to output rows per kernel offset.

    A pair (v, u) exists at offset i iff out_coords[u] + i * in_stride equals
    in_coords[v] (batch indices equal). Implemented with one hash index over
    the input coordinates, rebuilt per call.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64)
    out_coords = np.asarray(out_coords, dtype=np.int64)
    index = coord_index(in_coords)
    stride = np.asarray(in_stride, dtype=np.int64)
    pairs = []
    n_out = len(out_coords)
    for off in shape.offsets:
        if n_out == 0:
            pairs.append(
                (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
            )
            continue
        queries = out_coords.copy()
        queries[:, 1:] += off * stride
        rows = index.lookup(queries)
        hit = rows >= 0
        pairs.append(
            (
                rows[hit].astype(np.int64),
                np.flatnonzero(hit).astype(np.int64),
            )
        )
    return KernelMap(shape.offsets, tuple(pairs))


def sparse_conv_forward(
    t: SparseTensor,
    w: ConvWeights,
    shape: KernelShape,
    stride: int | tuple[int, ...] = 1,
) -> SparseTensor:
    """x_out[u] = sum over offsets i with u+i occupied of W_i @ x_in[u+i]."""
    if w.num_offsets != shape.num_offsets:
        raise StructuralError("weights must supply one matrix per offset")
    if w.n_in != t.feature_width:
        raise StructuralError(
            f"weight n_in {w.n_in} != input feature width {t.feature_width}"
        )
    out_coords, out_stride = generate_output_coords(t, stride)
    kmap = build_kernel_map(t.coords, out_coords, shape, t.tensor_stride)
    out = np.zeros((len(out_coords), w.n_out), dtype=np.float64)
    feats = t.features
    # offsets iterate in shape order; within one offset each output row
    # appears at most once, so fancy-index accumulation is exact
    for k, (vi, ui) in enumerate(kmap.pairs):
        if len(vi):
            out[ui] += feats[vi] @ w.matrices[k].T
    return SparseTensor(out_coords, out, out_stride)


def sparse_conv_backward(
    t: SparseTensor,
    w: ConvWeights,
    shape: KernelShape,
    stride: int | tuple[int, ...],
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. input features and weights.

    grad_out must align row-for-row with the forward output. Returns
    (grad_in of shape (N_in, n_in), grad_w of shape (K, n_out, n_in)).
    """
    if w.num_offsets != shape.num_offsets:
        raise StructuralError("weights must supply one matrix per offset")
    if w.n_in != t.feature_width:
        raise StructuralError("weight n_in does not match input features")
    out_coords, _ = generate_output_coords(t, stride)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (len(out_coords), w.n_out):
        raise StructuralError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"({len(out_coords)}, {w.n_out})"
        )
    kmap = build_kernel_map(t.coords, out_coords, shape, t.tensor_stride)
    grad_in = np.zeros_like(t.features)
    grad_w = np.zeros_like(w.matrices)
    feats = t.features
    for k, (vi, ui) in enumerate(kmap.pairs):
        if len(vi):
            grad_in[vi] += grad_out[ui] @ w.matrices[k]
            grad_w[k] = grad_out[ui].T @ feats[vi]
    return grad_in, grad_w


def dense_conv_forward(
    grid: np.ndarray, w: ConvWeights, shape: KernelShape
) -> np.ndarray:
    """Textbook cross-correlation over a dense grid with zero padding.

    grid has shape (*spatial, n_in); the output keeps the spatial shape with
    n_out channels: out[u] = sum_i W_i @ grid[u + i], out-of-range reads are
    zero. Serves as the oracle for sparse_conv_forward on occupied inputs.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != shape.dim + 1:
        raise StructuralError("grid must have shape (*spatial, n_in)")
    if grid.shape[-1] != w.n_in:
        raise StructuralError("grid channel width does not match weights")
    spatial = grid.shape[:-1]
    out = np.zeros(spatial + (w.n_out,), dtype=np.float64)
    for k, off in enumerate(shape.offsets):
        dst = []
        src = []
        empty = False
        for d, o in enumerate(off):
            o = int(o)
            lo = max(0, -o)
            hi = min(spatial[d], spatial[d] - o)
            if lo >= hi:
                empty = True
                break
            dst.append(slice(lo, hi))
            src.append(slice(lo + o, hi + o))
        if empty:
            continue
        out[tuple(dst)] += grid[tuple(src)] @ w.matrices[k].T
    return out


def benchmark_forward_backward(
    t: SparseTensor,
    w: ConvWeights,
    shape: KernelShape,
    stride: int | tuple[int, ...] = 1,
    warmup_iters: int = 2,
    profile_iters: int = 5,
) -> dict:
    """Wall-time micro-benchmark of one convolution layer.

    Returns a record in the layer-profile shape (times in microseconds,
    activation bytes from the serialized output) plus the kernel-map pair
    count. Times are means over profile_iters after warmup_iters discarded.
    """
    from .tensor import to_binary

    out = sparse_conv_forward(t, w, shape, stride)
    grad_out = np.ones((len(out), w.n_out), dtype=np.float64)
    for _ in range(warmup_iters):
        sparse_conv_forward(t, w, shape, stride)
        sparse_conv_backward(t, w, shape, stride, grad_out)
    fwd = 0.0
    bwd = 0.0
    for _ in range(profile_iters):
        t0 = time.perf_counter()
        sparse_conv_forward(t, w, shape, stride)
        t1 = time.perf_counter()
        sparse_conv_backward(t, w, shape, stride, grad_out)
        t2 = time.perf_counter()
        fwd += t1 - t0
        bwd += t2 - t1
    kmap = build_kernel_map(
        t.coords, generate_output_coords(t, stride)[0], shape, t.tensor_stride
    )
    return {
        "fwd_time_us": fwd / profile_iters * 1e6,
        "bwd_time_us": bwd / profile_iters * 1e6,
        "activation_bytes": len(to_binary(out)),
        "param_bytes": w.nbytes(),
        "kernel_map_pairs": kmap.total_pairs(),
    }


def weights_to_json(w: ConvWeights, shape: KernelShape) -> str:
    """Serialize weights keyed by offset string ("dx,dy,dz")."""
    obj = {
        "format_version": _WEIGHTS_VERSION,
        "dim": shape.dim,
        "n_out": w.n_out,
        "n_in": w.n_in,
        "weights": {
            ",".join(str(int(v)) for v in off): w.matrices[k].tolist()
            for k, off in enumerate(shape.offsets)
        },
    }
    return json.dumps(obj)


def weights_from_json(text: str) -> tuple[ConvWeights, KernelShape]:
    obj = json.loads(text)
    try:
        dim = int(obj["dim"])
        items = [
            (tuple(int(v) for v in key.split(",")), np.asarray(mat, dtype=np.float64))
            for key, mat in obj["weights"].items()
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed weights JSON: {exc}") from exc
    if not items:
        raise ValidationError("weights JSON lists no offsets")
    offsets = np.asarray([o for o, _ in items], dtype=np.int64)
    mats = np.stack([m for _, m in items])
    shape = KernelShape.custom(dim, offsets)
    return ConvWeights(mats), shape


def weights_to_binary(w: ConvWeights, shape: KernelShape) -> bytes:
    header = struct.pack(
        "<4sIIIII",
        _WEIGHTS_MAGIC,
        _WEIGHTS_VERSION,
        shape.dim,
        w.num_offsets,
        w.n_out,
        w.n_in,
    )
    offs = np.ascontiguousarray(shape.offsets, dtype="<i8").tobytes()
    mats = np.ascontiguousarray(w.matrices, dtype="<f8").tobytes()
    return header + offs + mats


def weights_from_binary(blob: bytes) -> tuple[ConvWeights, KernelShape]:
    head = struct.calcsize("<4sIIIII")
    if len(blob) < head:
        raise ValidationError("binary weights truncated")
    magic, version, dim, k, n_out, n_in = struct.unpack("<4sIIIII", blob[:head])
    if magic != _WEIGHTS_MAGIC or version != _WEIGHTS_VERSION:
        raise ValidationError("unrecognized binary weights header")
    off = head
    offsets = np.frombuffer(blob, dtype="<i8", count=k * dim, offset=off)
    off += 8 * k * dim
    mats = np.frombuffer(blob, dtype="<f8", count=k * n_out * n_in, offset=off)
    off += 8 * k * n_out * n_in
    if off != len(blob):
        raise ValidationError("binary weights have trailing bytes")
    shape = KernelShape.custom(dim, offsets.reshape(k, dim))
    return ConvWeights(mats.reshape(k, n_out, n_in).copy()), shape
