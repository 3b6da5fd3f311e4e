"""Hook a PyTorch model, capture activations per (sample, transformation)
pair, and write the binary containers."""

from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .formats import DumpWriter, write_nnw
from .transforms import AffineTransform, apply


class ExportError(Exception):
    """code: 'unsupported-layer' or 'no-activations'."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class HookPlan:
    """Which modules to tap: fnmatch patterns over qualified module names.

    Leaf modules only; manifest order equals forward execution order.
    Reshape-only modules (Flatten) are skipped unless included explicitly.
    """

    patterns: tuple[str, ...] = ("*",)
    include_reshapes: bool = False

    def matches(self, name: str, module: nn.Module) -> bool:
        if isinstance(module, nn.Flatten) and not self.include_reshapes:
            return False
        return any(fnmatch.fnmatch(name, p) for p in self.patterns)


def _leaf_modules(model: nn.Module):
    for name, module in model.named_modules():
        if name and not any(module.children()):
            yield name, module


def _tensor_entry(name: str, layer_index: int, tensor: torch.Tensor) -> dict:
    if tensor.dim() == 4:  # (B, C, H, W) feature map
        _, c, h, w = tensor.shape
        return {"name": name, "layer_index": layer_index, "shape": [h, w, c],
                "kind": "feature-map"}
    flat = int(np.prod(tensor.shape[1:]))
    return {"name": name, "layer_index": layer_index, "shape": [flat],
            "kind": "scalar-vector"}


def _flatten_capture(tensor: torch.Tensor) -> np.ndarray:
    """Single-sample tensor -> flat float32 cells, spatial maps in HWC order
    (the record layout the measurement engine expects)."""
    t = tensor.detach()
    if t.dim() == 4:
        t = t.permute(0, 2, 3, 1)  # BCHW -> BHWC
    return t.reshape(-1).to(torch.float32).cpu().numpy()


class _Capture:
    def __init__(self):
        self.order: list[str] = []
        self.values: dict[str, torch.Tensor] = {}

    def hook(self, name: str):
        def fn(module, inputs, output):
            if name not in self.order:
                self.order.append(name)
            self.values[name] = output

        return fn


def export_activations(
    model: nn.Module,
    dataset,
    transformations: list[AffineTransform],
    out_path,
    plan: HookPlan = HookPlan(),
    extra_metadata: dict | None = None,
    double_precision: bool = True,
) -> list[dict]:
    """Write a sample-major STDUMP of every tapped activation for every
    (sample, transformation) pair; returns the manifest entries.

    ``dataset`` is an iterable of H x W x C arrays with values in [0, 1]
    (uint8 input is normalized by 255).  The model runs in inference mode;
    upcasting to double keeps the dump numerically faithful to engines that
    accumulate in 64-bit.
    """
    images = [np.asarray(img) for img in dataset]
    if not images:
        raise ExportError("no-activations", "dataset is empty")
    images = [
        img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
        for img in images
    ]
    n, m = len(images), len(transformations)

    model = model.eval()
    if double_precision:
        model = model.double()
    dtype = next(model.parameters()).dtype if any(True for _ in model.parameters()) else torch.float64

    capture = _Capture()
    handles = []
    for name, module in _leaf_modules(model):
        if plan.matches(name, module):
            handles.append(module.register_forward_hook(capture.hook(name)))
    if not handles:
        raise ExportError("no-activations", "hook plan matched no modules")

    def forward(img: np.ndarray) -> None:
        capture.values.clear()
        x = torch.from_numpy(np.ascontiguousarray(img)).to(dtype)
        x = x.permute(2, 0, 1).unsqueeze(0)  # HWC -> BCHW
        with torch.no_grad():
            model(x)

    try:
        forward(apply(transformations[0], images[0]))
        if not capture.order:
            raise ExportError("no-activations", "hooked modules produced no outputs")
        entries = [
            _tensor_entry(name, idx, capture.values[name])
            for idx, name in enumerate(capture.order)
        ]
        meta = dict(extra_metadata or {})
        meta.setdefault(
            "transformations",
            [
                {"rot": t.rotation_degrees, "sh": t.scale_h, "sw": t.scale_w,
                 "th": t.translate_h_fraction, "tw": t.translate_w_fraction}
                for t in transformations
            ],
        )
        with DumpWriter(out_path, n, m, entries, meta) as writer:
            for i in range(n):
                for j in range(m):
                    forward(apply(transformations[j], images[i]))
                    record = np.concatenate(
                        [_flatten_capture(capture.values[name]) for name in capture.order]
                    )
                    if not np.isfinite(record).all():
                        warnings.warn(
                            f"non-finite activations at sample={i} transformation={j}; "
                            "record written, engine will flag it"
                        )
                    writer.write_record(record)
    finally:
        for h in handles:
            h.remove()
    return entries


# ---------------------------------------------------------------------------
# Weight export
# ---------------------------------------------------------------------------

@dataclass
class _ShapeTracker:
    shape: tuple[int, ...]
    hwc_to_chw_perm: np.ndarray | None = field(default=None)


def _chw_to_hwc_permutation(h: int, w: int, c: int) -> np.ndarray:
    """perm[i_hwc] = i_chw, aligning a CHW-flattened linear layer with an
    engine that flattens HWC."""
    idx = np.arange(c * h * w).reshape(c, h, w)
    return np.transpose(idx, (1, 2, 0)).reshape(-1)


def export_weights(model: nn.Module, input_shape: tuple[int, int, int], out_path) -> None:
    """Translate a sequential model into NNW v1.

    Supported: Conv2d 3x3/stride 1/padding 1, MaxPool2d 2x2/stride 2,
    Linear, Flatten, ELU(alpha=1)/ReLU/Softmax.  Anything else raises
    ExportError('unsupported-layer') naming the module.
    """
    layers: list[dict] = []
    blobs: list[tuple[int, str, np.ndarray]] = []
    h, w, c = input_shape
    state = _ShapeTracker(shape=(h, w, c))

    modules = [m for _, m in _leaf_modules(model)]
    if not modules:
        raise ExportError("unsupported-layer", "model has no leaf modules")

    for module in modules:
        idx = len(layers)
        if isinstance(module, nn.Conv2d):
            if (module.kernel_size != (3, 3) or module.stride != (1, 1)
                    or module.padding != (1, 1) or module.dilation != (1, 1)
                    or module.groups != 1):
                raise ExportError(
                    "unsupported-layer",
                    f"unsupported-layer: Conv2d with kernel={module.kernel_size} "
                    f"stride={module.stride} padding={module.padding}",
                )
            kernel = module.weight.detach().cpu().numpy()  # (out, in, kh, kw)
            blobs.append((idx, "kernel", np.transpose(kernel, (2, 3, 1, 0))))
            bias = module.bias.detach().cpu().numpy() if module.bias is not None \
                else np.zeros(module.out_channels, dtype=np.float32)
            blobs.append((idx, "bias", bias))
            layers.append({"type": "conv2d", "out_channels": int(module.out_channels)})
            state.shape = (state.shape[0], state.shape[1], int(module.out_channels))
        elif isinstance(module, nn.MaxPool2d):
            k = module.kernel_size if isinstance(module.kernel_size, tuple) else (module.kernel_size,) * 2
            s = module.stride if isinstance(module.stride, tuple) else (module.stride,) * 2
            if k != (2, 2) or s != (2, 2):
                raise ExportError(
                    "unsupported-layer",
                    f"unsupported-layer: MaxPool2d with kernel={k} stride={s}",
                )
            layers.append({"type": "maxpool2d"})
            state.shape = (state.shape[0] // 2, state.shape[1] // 2, state.shape[2])
        elif isinstance(module, nn.Flatten):
            if len(state.shape) == 3:
                state.hwc_to_chw_perm = _chw_to_hwc_permutation(*state.shape)
            layers.append({"type": "flatten"})
            state.shape = (int(np.prod(state.shape)),)
        elif isinstance(module, nn.Linear):
            weight = module.weight.detach().cpu().numpy().T  # (in, out)
            if state.hwc_to_chw_perm is not None:
                weight = weight[state.hwc_to_chw_perm]
                state.hwc_to_chw_perm = None
            blobs.append((idx, "weight", weight))
            bias = module.bias.detach().cpu().numpy() if module.bias is not None \
                else np.zeros(module.out_features, dtype=np.float32)
            blobs.append((idx, "bias", bias))
            layers.append({"type": "dense", "out_features": int(module.out_features)})
            state.shape = (int(module.out_features),)
        elif isinstance(module, nn.ELU):
            if module.alpha != 1.0:
                raise ExportError("unsupported-layer",
                                  f"unsupported-layer: ELU alpha={module.alpha}")
            layers.append({"type": "activation", "fn": "elu"})
        elif isinstance(module, nn.ReLU):
            layers.append({"type": "activation", "fn": "relu"})
        elif isinstance(module, nn.Softmax):
            layers.append({"type": "activation", "fn": "softmax"})
        else:
            raise ExportError(
                "unsupported-layer",
                f"unsupported-layer: {type(module).__name__}",
            )
    write_nnw(out_path, input_shape, layers, blobs)
