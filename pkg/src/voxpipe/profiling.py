"""Per-layer cost profiles: measurement, ingestion, aggregation.

A profile records, for one processor type, every layer's forward/backward
wall time (microseconds) plus its activation and parameter sizes (bytes).
Sizes are model properties and must agree across processor types; only times
vary. Profiles feed the partitioner and the pipeline simulator.

Also provides cumulative layer cost ratio (ALCR) curves, synthetic profile
generation (including a VGG16-BN-shaped template), and the cluster
description format. Measured profiling is compute-only: data loading is not
included in layer times.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, StructuralError, ValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ProcessorType:
    """Processor model metadata; only the name is semantically load-bearing."""

    name: str
    cuda_cores: Optional[float] = None
    boost_clock_mhz: Optional[float] = None
    tflops_sp: Optional[float] = None
    memory_gb: Optional[float] = None
    memory_bw_gbs: Optional[float] = None


@dataclass(frozen=True)
class LayerProfile:
    """One layer's costs: times in microseconds, sizes in bytes."""

    layer_id: int
    fwd_time_us: float
    bwd_time_us: float
    activation_bytes: float
    param_bytes: float

    def __post_init__(self):
        vals = (
            self.fwd_time_us,
            self.bwd_time_us,
            self.activation_bytes,
            self.param_bytes,
        )
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValidationError("layer profile fields must be finite and >= 0")
        if self.layer_id < 0:
            raise ValidationError("layer_id must be >= 0")

    def total_time_us(self) -> float:
        return self.fwd_time_us + self.bwd_time_us


@dataclass
class ProfileSet:
    """Per-processor-type layer profiles for one model."""

    model_name: str
    batch_size: int
    profiles: dict[str, list[LayerProfile]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.profiles:
            raise StructuralError("profile set lists no processor types")
        ref_type = next(iter(self.profiles))
        ref = self.profiles[ref_type]
        if not ref:
            raise StructuralError("profile set lists no layers")
        for tname, layers in self.profiles.items():
            if len(layers) != len(ref):
                raise StructuralError(
                    f"processor type {tname!r} lists {len(layers)} layers, "
                    f"{ref_type!r} lists {len(ref)}"
                )
            for l, rec in enumerate(layers):
                if rec.layer_id != l:
                    raise StructuralError(
                        f"layer ids must be 0..L-1 in order; got {rec.layer_id} at {l}"
                    )
                if (
                    rec.activation_bytes != ref[l].activation_bytes
                    or rec.param_bytes != ref[l].param_bytes
                ):
                    raise StructuralError(
                        f"layer {l}: activation/param bytes differ between "
                        f"{tname!r} and {ref_type!r}; sizes are model properties"
                    )

    @property
    def num_layers(self) -> int:
        return len(next(iter(self.profiles.values())))

    @property
    def type_names(self) -> list[str]:
        return list(self.profiles)

    def has_type(self, name: str) -> bool:
        return name in self.profiles

    def layer_times_s(self, type_name: str) -> np.ndarray:
        """Per-layer fwd+bwd seconds for one processor type."""
        try:
            layers = self.profiles[type_name]
        except KeyError:
            raise ConfigError(f"processor type {type_name!r} not profiled") from None
        return np.array([r.total_time_us() * 1e-6 for r in layers])

    def fwd_times_s(self, type_name: str) -> np.ndarray:
        return np.array([r.fwd_time_us * 1e-6 for r in self.profiles[type_name]])

    def bwd_times_s(self, type_name: str) -> np.ndarray:
        return np.array([r.bwd_time_us * 1e-6 for r in self.profiles[type_name]])

    def total_time_s(self, type_name: str) -> float:
        return float(self.layer_times_s(type_name).sum())

    def activation_bytes(self) -> np.ndarray:
        ref = next(iter(self.profiles.values()))
        return np.array([r.activation_bytes for r in ref])

    def param_bytes(self) -> np.ndarray:
        ref = next(iter(self.profiles.values()))
        return np.array([r.param_bytes for r in ref])

    def merged_with(self, other: "ProfileSet") -> "ProfileSet":
        """Combine fragments profiled per processor type for one model."""
        if (
            other.model_name != self.model_name
            or other.batch_size != self.batch_size
        ):
            raise StructuralError(
                "cannot merge profiles of different models or batch sizes"
            )
        overlap = set(self.profiles) & set(other.profiles)
        if overlap:
            raise StructuralError(f"duplicate processor types: {sorted(overlap)}")
        merged = dict(self.profiles)
        merged.update(other.profiles)
        return ProfileSet(self.model_name, self.batch_size, merged)


def profile_to_json(pset: ProfileSet, type_name: str) -> str:
    """One processor type's profile in the interchange format."""
    layers = pset.profiles[type_name]
    obj = {
        "format_version": FORMAT_VERSION,
        "model_name": pset.model_name,
        "batch_size": pset.batch_size,
        "processor_type": type_name,
        "layers": [
            {
                "layer_id": r.layer_id,
                "fwd_time_us": r.fwd_time_us,
                "bwd_time_us": r.bwd_time_us,
                "activation_bytes": r.activation_bytes,
                "param_bytes": r.param_bytes,
            }
            for r in layers
        ],
    }
    return json.dumps(obj, indent=2, sort_keys=True)


def profile_from_json(text: str, bwd_fwd_ratio: float = 2.0) -> ProfileSet:
    """Parse one profile file into a single-type ProfileSet.

    A record may carry total_time_us instead of split times; it is divided
    using the backward:forward ratio (default 2:1).
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"profile file is not valid JSON: {exc}") from exc
    try:
        if int(obj.get("format_version", -1)) != FORMAT_VERSION:
            raise ValidationError("unsupported or missing profile format_version")
        records = []
        for rec in obj["layers"]:
            if "total_time_us" in rec and "fwd_time_us" not in rec:
                total = float(rec["total_time_us"])
                fwd = total / (1.0 + bwd_fwd_ratio)
                bwd = total - fwd
            else:
                fwd = float(rec["fwd_time_us"])
                bwd = float(rec["bwd_time_us"])
            records.append(
                LayerProfile(
                    layer_id=int(rec["layer_id"]),
                    fwd_time_us=fwd,
                    bwd_time_us=bwd,
                    activation_bytes=float(rec["activation_bytes"]),
                    param_bytes=float(rec["param_bytes"]),
                )
            )
        return ProfileSet(
            model_name=str(obj["model_name"]),
            batch_size=int(obj["batch_size"]),
            profiles={str(obj["processor_type"]): records},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed profile file: {exc}") from exc


def load_profile_files(paths: Sequence[str]) -> ProfileSet:
    """Read and merge one profile file per processor type."""
    pset: Optional[ProfileSet] = None
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            fragment = profile_from_json(fh.read())
        pset = fragment if pset is None else pset.merged_with(fragment)
    if pset is None:
        raise ValidationError("no profile files given")
    return pset


@dataclass(frozen=True)
class Processor:
    """One concrete processor instance in a cluster."""

    instance_id: str
    type_name: str


@dataclass
class ClusterSpec:
    """Processor inventory plus inter-processor bandwidth (bytes/sec)."""

    processors: list[Processor]
    bandwidth_bytes_per_sec: float
    pair_bandwidth: dict[tuple[str, str], float] = field(default_factory=dict)
    processor_types: dict[str, ProcessorType] = field(default_factory=dict)

    def __post_init__(self):
        if not self.processors:
            raise ValidationError("cluster lists no processors")
        if not (self.bandwidth_bytes_per_sec > 0):
            raise ValidationError("bandwidth must be positive")
        ids = [p.instance_id for p in self.processors]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate processor instance ids")

    def type_of(self, instance_id: str) -> str:
        for p in self.processors:
            if p.instance_id == instance_id:
                return p.type_name
        raise ConfigError(f"unknown processor instance {instance_id!r}")

    def bandwidth_between(self, a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        return self.pair_bandwidth.get(key, self.bandwidth_bytes_per_sec)


def cluster_to_json(cluster: ClusterSpec) -> str:
    obj = {
        "format_version": FORMAT_VERSION,
        "processors": [
            {"id": p.instance_id, "type": p.type_name} for p in cluster.processors
        ],
        "bandwidth_bytes_per_sec": cluster.bandwidth_bytes_per_sec,
    }
    if cluster.pair_bandwidth:
        obj["pair_bandwidth"] = [
            {"a": a, "b": b, "bandwidth_bytes_per_sec": v}
            for (a, b), v in sorted(cluster.pair_bandwidth.items())
        ]
    if cluster.processor_types:
        obj["processor_types"] = {
            name: {
                k: v
                for k, v in vars(t).items()
                if k != "name" and v is not None
            }
            for name, t in sorted(cluster.processor_types.items())
        }
    return json.dumps(obj, indent=2, sort_keys=True)


def cluster_from_json(text: str) -> ClusterSpec:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cluster file is not valid JSON: {exc}") from exc
    try:
        if int(obj.get("format_version", -1)) != FORMAT_VERSION:
            raise ValidationError("unsupported or missing cluster format_version")
        procs = [
            Processor(str(rec["id"]), str(rec["type"])) for rec in obj["processors"]
        ]
        pair = {}
        for rec in obj.get("pair_bandwidth", []):
            a, b = str(rec["a"]), str(rec["b"])
            key = (a, b) if a <= b else (b, a)
            pair[key] = float(rec["bandwidth_bytes_per_sec"])
        types = {
            str(name): ProcessorType(name=str(name), **meta)
            for name, meta in obj.get("processor_types", {}).items()
        }
        return ClusterSpec(
            processors=procs,
            bandwidth_bytes_per_sec=float(obj["bandwidth_bytes_per_sec"]),
            pair_bandwidth=pair,
            processor_types=types,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed cluster file: {exc}") from exc


def _busy_wait(seconds: float) -> None:
    """Spin on the monotonic clock; tighter than sleep for stub layers."""
    deadline = time.perf_counter() + seconds
    while time.perf_counter() < deadline:
        pass


def run_benchmark_profile(
    model_desc: dict,
    processor_label: str,
    warmup_iters: int = 50,
    profile_iters: int = 100,
) -> list[LayerProfile]:
    """Measure per-layer costs of a model description.

    Layers of type "sparse_conv" are executed with the reference convolution
    on a synthetic voxelized input; "stub" layers busy-wait their declared
    duration; "synthetic" layers contribute their declared costs without
    execution. Times are means over profile_iters after warmup_iters
    discarded. The processor label is bookkeeping for the output header.
    """
    if warmup_iters < 0 or profile_iters < 1:
        raise ConfigError("warmup_iters must be >= 0 and profile_iters >= 1")
    layers = model_desc.get("layers")
    if not layers:
        raise ConfigError("model description lists no layers")

    # lazy import: conv depends on this module for the record format
    from . import conv as _conv
    from .tensor import PointCloud, to_binary, voxelize

    current = None
    needs_input = any(l.get("type") == "sparse_conv" for l in layers)
    if needs_input:
        spec = model_desc.get("input")
        if not spec:
            raise ConfigError("sparse_conv layers need an 'input' description")
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        dim = int(spec.get("dim", 3))
        res = int(spec.get("resolution", 16))
        n = int(spec.get("num_points", 512))
        width = int(spec.get("feature_width", 1))
        points = rng.random((n, dim)) * res
        feats = rng.standard_normal((n, width)) if width > 1 else None
        current = voxelize(PointCloud(points, feats), 1.0, (res,) * dim)

    records: list[LayerProfile] = []
    for layer_id, layer in enumerate(layers):
        kind = layer.get("type")
        if kind == "synthetic":
            try:
                records.append(
                    LayerProfile(
                        layer_id=layer_id,
                        fwd_time_us=float(layer["fwd_time_us"]),
                        bwd_time_us=float(layer["bwd_time_us"]),
                        activation_bytes=float(layer.get("activation_bytes", 0)),
                        param_bytes=float(layer.get("param_bytes", 0)),
                    )
                )
            except KeyError as exc:
                raise ConfigError(f"synthetic layer {layer_id} misses {exc}") from exc
            continue

        if kind == "stub":
            fwd_s = float(layer.get("fwd_ms", 1.0)) * 1e-3
            bwd_s = float(layer.get("bwd_ms", 2 * fwd_s * 1e3)) * 1e-3
            for _ in range(warmup_iters):
                _busy_wait(fwd_s)
                _busy_wait(bwd_s)
            fwd_acc = bwd_acc = 0.0
            for _ in range(profile_iters):
                t0 = time.perf_counter()
                _busy_wait(fwd_s)
                t1 = time.perf_counter()
                _busy_wait(bwd_s)
                t2 = time.perf_counter()
                fwd_acc += t1 - t0
                bwd_acc += t2 - t1
            records.append(
                LayerProfile(
                    layer_id=layer_id,
                    fwd_time_us=fwd_acc / profile_iters * 1e6,
                    bwd_time_us=bwd_acc / profile_iters * 1e6,
                    activation_bytes=float(layer.get("activation_bytes", 0)),
                    param_bytes=float(layer.get("param_bytes", 0)),
                )
            )
            continue

        if kind == "sparse_conv":
            if current is None:
                raise ConfigError("sparse_conv layer without model input")
            out_channels = int(layer.get("out_channels", current.feature_width))
            ksize = int(layer.get("kernel_size", 3))
            stride = int(layer.get("stride", 1))
            shape = _conv.KernelShape.hypercubic(current.dim, ksize)
            wrng = np.random.default_rng(hash(("w", layer_id)) & 0x7FFFFFFF)
            fan_in = shape.num_offsets * current.feature_width
            w = _conv.ConvWeights(
                wrng.standard_normal(
                    (shape.num_offsets, out_channels, current.feature_width)
                )
                / np.sqrt(fan_in)
            )
            out = _conv.sparse_conv_forward(current, w, shape, stride)
            grad = np.ones((len(out), out_channels), dtype=np.float64)
            for _ in range(warmup_iters):
                _conv.sparse_conv_forward(current, w, shape, stride)
                _conv.sparse_conv_backward(current, w, shape, stride, grad)
            fwd_acc = bwd_acc = 0.0
            for _ in range(profile_iters):
                t0 = time.perf_counter()
                _conv.sparse_conv_forward(current, w, shape, stride)
                t1 = time.perf_counter()
                _conv.sparse_conv_backward(current, w, shape, stride, grad)
                t2 = time.perf_counter()
                fwd_acc += t1 - t0
                bwd_acc += t2 - t1
            records.append(
                LayerProfile(
                    layer_id=layer_id,
                    fwd_time_us=fwd_acc / profile_iters * 1e6,
                    bwd_time_us=bwd_acc / profile_iters * 1e6,
                    activation_bytes=float(len(to_binary(out))),
                    param_bytes=float(w.nbytes()),
                )
            )
            current = out
            continue

        raise ConfigError(
            f"layer {layer_id}: unexecutable type {kind!r} with no synthetic cost"
        )
    logger.info(
        "profiled %d layers as %r (%d warmup, %d measured iterations)",
        len(records),
        processor_label,
        warmup_iters,
        profile_iters,
    )
    return records


@dataclass(frozen=True)
class ALCRCurves:
    """Cumulative layer cost ratio curves; None where the total is zero."""

    compute: Optional[list[float]]
    activation: Optional[list[float]]
    param: Optional[list[float]]


def _cumulative_ratio(values: np.ndarray) -> Optional[list[float]]:
    total = values.sum()
    if total <= 0:
        return None
    curve = np.cumsum(values)
    # dividing the running sums by the final running sum makes the last
    # entry exactly 1.0 in floating point
    curve = curve / curve[-1]
    return [float(v) for v in curve]


def compute_alcr(profiles: Sequence[LayerProfile]) -> ALCRCurves:
    """Cumulative cost-ratio curves over layer id.

    Each curve is nondecreasing, starts >= 0 and ends at exactly 1.0. A
    quantity whose total is zero yields None (flagged by the caller).
    """
    if not profiles:
        raise ValidationError("need at least one layer")
    compute = np.array([r.total_time_us() for r in profiles], dtype=np.float64)
    act = np.array([r.activation_bytes for r in profiles], dtype=np.float64)
    par = np.array([r.param_bytes for r in profiles], dtype=np.float64)
    curves = ALCRCurves(
        compute=_cumulative_ratio(compute),
        activation=_cumulative_ratio(act),
        param=_cumulative_ratio(par),
    )
    for name in ("compute", "activation", "param"):
        if getattr(curves, name) is None:
            logger.warning("all-zero %s column; curve undefined", name)
    return curves


# VGG16-BN block structure: channel widths with 'M' marking 2x2 max pools
_VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M"]
_VGG_CLASSES = 40
_VGG_EFF_FLOPS = 4.0e12  # assumed effective arithmetic throughput


def _vgg16bn_base(batch_size: int) -> list[dict]:
    """53 per-layer records shaped like VGG16-BN at 224x224 input.

    Feature extractor: 13 conv/bn/relu triples and 5 pools (44 records),
    then average pool, flatten, and a linear-relu-dropout x2 + linear
    classifier (9 records). Forward times are FLOPs at an assumed effective
    throughput; backward = 2x forward; sizes are float32 bytes.
    """
    recs = []

    def add(flops: float, act_elems: float, params: float) -> None:
        fwd_us = batch_size * flops / _VGG_EFF_FLOPS * 1e6
        recs.append(
            {
                "fwd_time_us": fwd_us,
                "bwd_time_us": 2.0 * fwd_us,
                "activation_bytes": float(batch_size * act_elems * 4),
                "param_bytes": float(params * 4),
            }
        )

    hw = 224
    cin = 3
    for entry in _VGG16_CFG:
        if entry == "M":
            add(cin * hw * hw, cin * (hw // 2) ** 2, 0)
            hw //= 2
            continue
        cout = int(entry)
        elems = cout * hw * hw
        add(9 * cin * cout * hw * hw, elems, 9 * cin * cout + cout)  # conv
        add(4 * elems, elems, 2 * cout)  # batch norm
        add(elems, elems, 0)  # relu
        cin = cout
    feat_elems = cin * hw * hw  # 512 x 7 x 7
    add(feat_elems, feat_elems, 0)  # average pool
    add(0, feat_elems, 0)  # flatten
    dims = [feat_elems, 4096, 4096, _VGG_CLASSES]
    for i in range(3):
        add(dims[i] * dims[i + 1], dims[i + 1], dims[i] * dims[i + 1] + dims[i + 1])
        if i < 2:
            add(dims[i + 1], dims[i + 1], 0)  # relu
            add(dims[i + 1], dims[i + 1], 0)  # dropout
    if len(recs) != 53:
        raise AssertionError(f"template produced {len(recs)} records")
    return recs


def synth_profile(
    template: str,
    L: Optional[int] = None,
    scale: Optional[dict] = None,
    speed_factors: Optional[dict[str, float]] = None,
    batch_size: int = 64,
) -> ProfileSet:
    """Generate a synthetic ProfileSet without hardware.

    Templates: "uniform" (identical layers, count L), "vgg16bn_like"
    (53 layers, front-loaded compute / back-loaded parameters), "custom"
    (scale supplies per-layer value lists). Per-processor times are the base
    times multiplied by that type's speed factor; sizes are shared.
    """
    factors = dict(speed_factors or {"default": 1.0})
    if not factors or any(f <= 0 for f in factors.values()):
        raise ValidationError("speed factors must be positive")
    scale = dict(scale or {})

    if template == "uniform":
        count = 4 if L is None else int(L)
        if count < 1:
            raise ValidationError("L must be >= 1")
        base = [
            {
                "fwd_time_us": float(scale.get("fwd_time_us", 1000.0)),
                "bwd_time_us": float(
                    scale.get("bwd_time_us", 2.0 * scale.get("fwd_time_us", 1000.0))
                ),
                "activation_bytes": float(scale.get("activation_bytes", 1e6)),
                "param_bytes": float(scale.get("param_bytes", 4e6)),
            }
            for _ in range(count)
        ]
    elif template == "vgg16bn_like":
        if L is not None and int(L) != 53:
            raise ConfigError("the vgg16bn_like template is defined for 53 layers")
        base = _vgg16bn_base(batch_size)
    elif template == "custom":
        try:
            fwd = [float(v) for v in scale["fwd_time_us"]]
            bwd = [float(v) for v in scale.get("bwd_time_us", [2 * v for v in fwd])]
            act = [float(v) for v in scale["activation_bytes"]]
            par = [float(v) for v in scale["param_bytes"]]
        except KeyError as exc:
            raise ConfigError(f"custom template misses {exc}") from exc
        if not fwd or len({len(fwd), len(bwd), len(act), len(par)}) != 1:
            raise ValidationError("custom value lists must share one length >= 1")
        if L is not None and int(L) != len(fwd):
            raise ValidationError("L does not match the custom value lists")
        base = [
            {
                "fwd_time_us": fwd[i],
                "bwd_time_us": bwd[i],
                "activation_bytes": act[i],
                "param_bytes": par[i],
            }
            for i in range(len(fwd))
        ]
    else:
        raise ConfigError(f"unknown profile template {template!r}")

    profiles = {
        tname: [
            LayerProfile(
                layer_id=i,
                fwd_time_us=rec["fwd_time_us"] * f,
                bwd_time_us=rec["bwd_time_us"] * f,
                activation_bytes=rec["activation_bytes"],
                param_bytes=rec["param_bytes"],
            )
            for i, rec in enumerate(base)
        ]
        for tname, f in factors.items()
    }
    return ProfileSet(model_name=template, batch_size=batch_size, profiles=profiles)
