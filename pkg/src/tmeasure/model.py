"""Activation providers: a forward-only sequential CNN engine with
activation taps, seeded weight initialization, and the two binary
containers (NNW weight files, STDUMP activation dumps).

The engine computes in float64 but quantizes every tap to float32 before
reporting, so in-process results match what a dump of the same run stores.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .core import FEATURE_MAP, SCALAR_VECTOR, ActivationManifest, ManifestEntry, STRecord, STShape
from .errors import FormatError, ShapeError, TruncatedFileError

NNW_MAGIC = b"NNW1"
STDUMP_MAGIC = b"STDM"
STDUMP_VERSION = 1

ELU = "elu"
RELU = "relu"
SOFTMAX = "softmax"


# ---------------------------------------------------------------------------
# Layer descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2d:
    """3x3 convolution, stride 1, zero 'same' padding."""

    out_channels: int
    kind = "conv2d"


@dataclass(frozen=True)
class MaxPool2d:
    """2x2 max pooling, stride 2 (floor on odd dims)."""

    kind = "maxpool2d"


@dataclass(frozen=True)
class Dense:
    out_features: int
    kind = "dense"


@dataclass(frozen=True)
class Activation:
    fn: str
    kind = "activation"

    def __post_init__(self):
        if self.fn not in (ELU, RELU, SOFTMAX):
            raise ValueError(f"unknown activation {self.fn!r}")


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


Layer = Conv2d | MaxPool2d | Dense | Activation | Flatten


class NetworkSpec:
    """Ordered sequential layers plus the H x W x C input shape."""

    def __init__(self, layers: Iterable[Layer], input_shape: tuple[int, int, int]):
        self.layers: tuple[Layer, ...] = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        if len(self.input_shape) != 3:
            raise ShapeError(f"input_shape must be (H, W, C), got {input_shape}")
        self.layer_shapes = self._infer_shapes()

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer; validates consistency."""
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ShapeError(f"layer {idx}: conv2d needs spatial input, got {shape}")
                shape = (shape[0], shape[1], layer.out_channels)
            elif isinstance(layer, MaxPool2d):
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise ShapeError(f"layer {idx}: maxpool2d needs spatial input >= 2, got {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ShapeError(f"layer {idx}: dense needs flat input, got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Activation):
                if layer.fn == SOFTMAX and idx != len(self.layers) - 1:
                    raise ShapeError(f"layer {idx}: softmax must be terminal")
            else:
                raise ShapeError(f"layer {idx}: unknown layer {layer!r}")
            shapes.append(shape)
        return shapes

    def parameter_shapes(self) -> dict[int, dict[str, tuple[int, ...]]]:
        """Expected parameter array shapes keyed by layer index."""
        out: dict[int, dict[str, tuple[int, ...]]] = {}
        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                out[idx] = {
                    "kernel": (3, 3, shape[2], layer.out_channels),
                    "bias": (layer.out_channels,),
                }
            elif isinstance(layer, Dense):
                out[idx] = {"weight": (shape[0], layer.out_features), "bias": (layer.out_features,)}
            shape = self.layer_shapes[idx]
        return out

    def to_json_layers(self) -> list[dict]:
        out = []
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                out.append({"type": "conv2d", "out_channels": layer.out_channels})
            elif isinstance(layer, MaxPool2d):
                out.append({"type": "maxpool2d"})
            elif isinstance(layer, Dense):
                out.append({"type": "dense", "out_features": layer.out_features})
            elif isinstance(layer, Activation):
                out.append({"type": "activation", "fn": layer.fn})
            else:
                out.append({"type": "flatten"})
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkSpec":
        layers: list[Layer] = []
        for d in obj["layers"]:
            t = d["type"]
            if t == "conv2d":
                layers.append(Conv2d(int(d["out_channels"])))
            elif t == "maxpool2d":
                layers.append(MaxPool2d())
            elif t == "dense":
                layers.append(Dense(int(d["out_features"])))
            elif t == "activation":
                layers.append(Activation(d["fn"]))
            elif t == "flatten":
                layers.append(Flatten())
            else:
                raise FormatError(f"unknown layer type {t!r}")
        return cls(layers, tuple(obj["input_shape"]))


def simpleconv_spec(input_shape: tuple[int, int, int], base_filters: int = 4,
                    dense_features: int = 32, classes: int = 10) -> NetworkSpec:
    """Small conv/pool/dense stack with ELU activations and terminal softmax."""
    return NetworkSpec(
        [
            Conv2d(base_filters), Activation(ELU), MaxPool2d(),
            Conv2d(2 * base_filters), Activation(ELU), MaxPool2d(),
            Flatten(),
            Dense(dense_features), Activation(ELU),
            Dense(classes), Activation(SOFTMAX),
        ],
        input_shape,
    )


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

class WeightBundle:
    """Per-layer float32 parameter arrays keyed by (layer index, param name)."""

    def __init__(self, params: dict[int, dict[str, np.ndarray]]):
        self.params = {
            idx: {name: np.asarray(a, dtype=np.float32) for name, a in d.items()}
            for idx, d in params.items()
        }

    def validate_against(self, spec: NetworkSpec) -> None:
        expected = spec.parameter_shapes()
        if set(expected) != set(self.params):
            raise FormatError(
                f"parameterized layers {sorted(expected)} != bundle layers {sorted(self.params)}"
            )
        for idx, shapes in expected.items():
            for name, shape in shapes.items():
                got = self.params[idx].get(name)
                if got is None or got.shape != shape:
                    raise FormatError(
                        f"layer {idx} param {name!r}: expected shape {shape}, "
                        f"got {None if got is None else got.shape}"
                    )

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightBundle) or set(self.params) != set(other.params):
            return False
        return all(
            set(self.params[i]) == set(other.params[i])
            and all(np.array_equal(self.params[i][n], other.params[i][n]) for n in self.params[i])
            for i in self.params
        )


def random_init(spec: NetworkSpec, seed: int) -> WeightBundle:
    """Fan-in-scaled uniform kernels/weights (|w| <= sqrt(6/fan_in)),
    zero biases; bit-identical for equal seeds."""
    rng = np.random.default_rng(seed)
    params: dict[int, dict[str, np.ndarray]] = {}
    for idx, shapes in spec.parameter_shapes().items():
        layer_params = {}
        for name, shape in shapes.items():
            if name == "bias":
                layer_params[name] = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[:-1]))
                bound = np.sqrt(6.0 / fan_in)
                layer_params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[idx] = layer_params
    return WeightBundle(params)


# ---------------------------------------------------------------------------
# Forward pass with taps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationTapPolicy:
    """Which intermediate tensors become activations in the manifest."""

    post_conv: bool = True
    post_activation: bool = True
    post_pool: bool = True
    post_dense: bool = True
    exclude_reshapes: bool = True

    def __post_init__(self):
        if not (self.post_conv or self.post_activation or self.post_pool or self.post_dense):
            raise ValueError("tap policy excludes every activation")


DEFAULT_TAP_POLICY = ActivationTapPolicy()


def _conv2d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x: (B, H, W, Cin), kernel: (3, 3, Cin, Cout).  einsum keeps the
    summation order fixed so results are batch-size independent."""
    b, h, w, cin = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9, cin), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = padded[:, dy : dy + h, dx : dx + w, :]
    out = np.einsum("bhwkc,kcf->bhwf", cols, kernel.reshape(9, cin, -1), optimize=False)
    return out + bias


def _maxpool2d(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    trimmed = x[:, : h2 * 2, : w2 * 2, :]
    return trimmed.reshape(b, h2, 2, w2, 2, c).max(axis=(2, 4))


def _activation(x: np.ndarray, fn: str) -> np.ndarray:
    if fn == RELU:
        return np.maximum(x, 0.0)
    if fn == ELU:
        # alpha = 1: x for x >= 0, exp(x) - 1 below
        return np.where(x >= 0.0, x, np.expm1(np.minimum(x, 0.0)))
    if fn == SOFTMAX:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {fn!r}")


def _layer_tap_name(layer: Layer, counters: dict[str, int]) -> str:
    if isinstance(layer, Activation):
        base = layer.fn
    else:
        base = layer.kind.replace("2d", "")
    counters[base] = counters.get(base, 0) + 1
    return f"{base}{counters[base]}"


def build_manifest(spec: NetworkSpec, policy: ActivationTapPolicy = DEFAULT_TAP_POLICY) -> ActivationManifest:
    """Manifest of tapped tensors, stable across forward calls."""
    entries = []
    counters: dict[str, int] = {}
    for idx, layer in enumerate(spec.layers):
        shape = spec.layer_shapes[idx]
        tapped = (
            (isinstance(layer, Conv2d) and policy.post_conv)
            or (isinstance(layer, Activation) and policy.post_activation)
            or (isinstance(layer, MaxPool2d) and policy.post_pool)
            or (isinstance(layer, Dense) and policy.post_dense)
            or (isinstance(layer, Flatten) and not policy.exclude_reshapes)
        )
        if not tapped:
            continue
        kind = FEATURE_MAP if len(shape) == 3 else SCALAR_VECTOR
        entries.append(
            ManifestEntry(
                name=_layer_tap_name(layer, counters),
                layer_index=idx,
                shape=tuple(shape),
                kind=kind,
            )
        )
    return ActivationManifest(entries)


def forward_batch(
    spec: NetworkSpec,
    weights: WeightBundle,
    inputs: np.ndarray,
    policy: ActivationTapPolicy = DEFAULT_TAP_POLICY,
) -> np.ndarray:
    """Forward a batch (B, H, W, C); returns tapped activations as a
    (B, cell_count) float64 matrix in manifest order.

    Taps are rounded through float32 (the stored precision) and upcast.
    """
    if tuple(inputs.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input shape {inputs.shape[1:]} != spec input {spec.input_shape}")
    x = np.asarray(inputs, dtype=np.float64)
    batch = x.shape[0]
    taps: list[np.ndarray] = []
    for idx, layer in enumerate(spec.layers):
        tapped = False
        if isinstance(layer, Conv2d):
            p = weights.params[idx]
            x = _conv2d_same(x, p["kernel"].astype(np.float64), p["bias"].astype(np.float64))
            tapped = policy.post_conv
        elif isinstance(layer, MaxPool2d):
            x = _maxpool2d(x)
            tapped = policy.post_pool
        elif isinstance(layer, Flatten):
            x = x.reshape(batch, -1)
            tapped = not policy.exclude_reshapes
        elif isinstance(layer, Dense):
            p = weights.params[idx]
            x = x @ p["weight"].astype(np.float64) + p["bias"].astype(np.float64)
            tapped = policy.post_dense
        elif isinstance(layer, Activation):
            x = _activation(x, layer.fn)
            tapped = policy.post_activation
        if tapped:
            taps.append(x.reshape(batch, -1).astype(np.float32).astype(np.float64))
    return np.concatenate(taps, axis=1)


def forward_with_taps(
    spec: NetworkSpec,
    weights: WeightBundle,
    image: np.ndarray,
    policy: ActivationTapPolicy = DEFAULT_TAP_POLICY,
) -> tuple[np.ndarray, ActivationManifest]:
    """Single-image forward; returns (flat float64 taps, manifest)."""
    values = forward_batch(spec, weights, np.asarray(image)[None, ...], policy)[0]
    return values, build_manifest(spec, policy)


# ---------------------------------------------------------------------------
# NNW v1 weight files
# ---------------------------------------------------------------------------

def write_weights(path, spec: NetworkSpec, weights: WeightBundle) -> None:
    """magic | u64 manifest length | JSON manifest | float32 LE blobs."""
    weights.validate_against(spec)
    blobs: list[bytes] = []
    blob_meta = []
    offset = 0
    for idx in sorted(weights.params):
        for name in sorted(weights.params[idx]):
            arr = np.ascontiguousarray(weights.params[idx][name], dtype="<f4")
            raw = arr.tobytes()
            blob_meta.append(
                {"layer": idx, "param": name, "shape": list(arr.shape),
                 "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
    manifest = {
        "format": "nnw",
        "version": 1,
        "input_shape": list(spec.input_shape),
        "layers": spec.to_json_layers(),
        "blobs": blob_meta,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(NNW_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for raw in blobs:
            f.write(raw)


def read_weights(path) -> tuple[NetworkSpec, WeightBundle]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != NNW_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (manifest_len,) = struct.unpack("<Q", _read_or_truncated(f, 8, path))
        manifest = json.loads(_read_or_truncated(f, manifest_len, path).decode("utf-8"))
        spec = NetworkSpec.from_json(manifest)
        expected = spec.parameter_shapes()
        blob_section = f.read()

    params: dict[int, dict[str, np.ndarray]] = {}
    for meta in manifest["blobs"]:
        idx, name = int(meta["layer"]), meta["param"]
        shape = tuple(int(s) for s in meta["shape"])
        want = expected.get(idx, {}).get(name)
        if want is None or want != shape or meta["nbytes"] != 4 * int(np.prod(shape)):
            raise FormatError(f"{path}: blob {idx}/{name} inconsistent with layer shapes")
        start, end = int(meta["offset"]), int(meta["offset"]) + int(meta["nbytes"])
        if end > len(blob_section):
            raise TruncatedFileError(f"{path}: blob {idx}/{name} extends past end of file")
        arr = np.frombuffer(blob_section[start:end], dtype="<f4").reshape(shape)
        params.setdefault(idx, {})[name] = arr
    bundle = WeightBundle(params)
    bundle.validate_against(spec)
    return spec, bundle


def _read_or_truncated(f: BinaryIO, nbytes: int, path) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise TruncatedFileError(f"{path}: unexpected end of file")
    return data


# ---------------------------------------------------------------------------
# STDUMP v1 activation dumps
# ---------------------------------------------------------------------------

@dataclass
class DumpInfo:
    shape: STShape
    manifest: ActivationManifest
    order: str
    header_bytes: int
    metadata: dict = field(repr=False, default_factory=dict)

    @property
    def record_bytes(self) -> int:
        return 4 * self.manifest.cell_count


def write_dump(
    path,
    manifest: ActivationManifest,
    shape: STShape,
    records: Iterable[np.ndarray],
    order: str = "sample_major",
    extra_metadata: dict | None = None,
) -> None:
    """magic | u32 version | u64 metadata length | JSON metadata | records.

    ``records`` must yield shape.record_count flat vectors in the declared
    order; values are stored as little-endian float32.
    """
    meta = {
        "n": shape.n,
        "m": shape.m,
        "k_entries": manifest.to_json_entries(),
        "order": order,
        "dtype": "f32le",
    }
    if extra_metadata:
        meta.update(extra_metadata)
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    count = 0
    with open(path, "wb") as f:
        f.write(STDUMP_MAGIC)
        f.write(struct.pack("<I", STDUMP_VERSION))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for values in records:
            arr = np.ascontiguousarray(values, dtype="<f4")
            if arr.size != manifest.cell_count:
                raise ShapeError(f"record has {arr.size} values, manifest needs {manifest.cell_count}")
            f.write(arr.tobytes())
            count += 1
    if count != shape.record_count:
        raise ShapeError(f"wrote {count} records, shape requires {shape.record_count}")


def open_dump(path) -> DumpInfo:
    """Parse and validate the header; record payload is read lazily."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != STDUMP_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_or_truncated(f, 4, path))
        if version != STDUMP_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (meta_len,) = struct.unpack("<Q", _read_or_truncated(f, 8, path))
        meta = json.loads(_read_or_truncated(f, meta_len, path).decode("utf-8"))
        header_bytes = 4 + 4 + 8 + meta_len
    if meta.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    order = meta.get("order")
    if order not in ("sample_major", "transformation_major"):
        raise FormatError(f"{path}: unknown order {order!r}")
    manifest = ActivationManifest.from_json_entries(meta["k_entries"])
    shape = STShape(n=int(meta["n"]), m=int(meta["m"]), k=manifest.cell_count)
    info = DumpInfo(shape=shape, manifest=manifest, order=order,
                    header_bytes=header_bytes, metadata=meta)
    actual = path.stat().st_size - header_bytes
    expected = shape.record_count * info.record_bytes
    if actual != expected:
        raise TruncatedFileError(
            f"{path}: payload holds {actual} bytes, {shape.record_count} records need {expected}"
        )
    return info


def _pair_for_position(pos: int, info: DumpInfo) -> tuple[int, int]:
    if info.order == "sample_major":
        return pos // info.shape.m, pos % info.shape.m
    return pos % info.shape.n, pos // info.shape.n


def read_dump(path) -> tuple[Iterator[STRecord], ActivationManifest, STShape]:
    """Stream records in declared order without loading the whole file."""
    info = open_dump(path)

    def records() -> Iterator[STRecord]:
        with open(path, "rb") as f:
            f.seek(info.header_bytes)
            for pos in range(info.shape.record_count):
                raw = _read_or_truncated(f, info.record_bytes, path)
                i, j = _pair_for_position(pos, info)
                yield STRecord(i, j, np.frombuffer(raw, dtype="<f4").astype(np.float64))

    return records(), info.manifest, info.shape
