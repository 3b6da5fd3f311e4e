"""Finite affine transformation sets and their application to images.

Sets are ordered and always start with the identity transform.  ``apply``
resamples with bilinear interpolation and takes an exact, interpolation-free
path for 90-degree rotation multiples and integer-pixel translations, so
those transforms are pure pixel permutations/shifts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ImageTooSmallError

SCALE_RANGE = (0.5, 1.25)
TRANSLATION_OFFSETS = [(-1, -1), (-1, 1), (1, -1), (1, 1), (0, 1), (1, 0), (0, -1), (-1, 0)]


@dataclass(frozen=True)
class AffineTransform:
    """Scale about the center, then rotate about the center, then translate.

    Translation amounts are fractions of image height/width; positive values
    move content toward larger row/column indices.
    """

    rotation_degrees: float = 0.0
    scale_h: float = 1.0
    scale_w: float = 1.0
    translate_h_fraction: float = 0.0
    translate_w_fraction: float = 0.0

    def __post_init__(self):
        if self.scale_h <= 0 or self.scale_w <= 0:
            raise ValueError("scale factors must be positive")

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_degrees % 360.0 == 0.0
            and self.scale_h == 1.0
            and self.scale_w == 1.0
            and self.translate_h_fraction == 0.0
            and self.translate_w_fraction == 0.0
        )

    def describe(self) -> str:
        return (
            f"rot={self.rotation_degrees:g} sh={self.scale_h:g} sw={self.scale_w:g} "
            f"th={self.translate_h_fraction:g} tw={self.translate_w_fraction:g}"
        )


IDENTITY = AffineTransform()


class TransformationSet:
    """Ordered finite list of transforms; the identity must be present."""

    def __init__(self, transforms, label: str):
        self.transforms: tuple[AffineTransform, ...] = tuple(transforms)
        self.label = label
        if not any(t.is_identity for t in self.transforms):
            raise ValueError(f"transformation set {label!r} lacks the identity transform")

    def __len__(self) -> int:
        return len(self.transforms)

    def __getitem__(self, i: int) -> AffineTransform:
        return self.transforms[i]

    def __iter__(self):
        return iter(self.transforms)

    @property
    def identity_index(self) -> int:
        for i, t in enumerate(self.transforms):
            if t.is_identity:
                return i
        raise AssertionError("unreachable: identity checked at construction")


# ---------------------------------------------------------------------------
# Set builders
# ---------------------------------------------------------------------------

def rotation_set(m: int) -> TransformationSet:
    """m angles uniformly spaced over [0, 360), starting at 0."""
    if m < 1:
        raise ValueError("rotation_set needs m >= 1")
    angles = [360.0 * i / m for i in range(m)]
    return TransformationSet(
        [AffineTransform(rotation_degrees=a) for a in angles], label=f"rotation:{m}"
    )


def scale_set(factor_count: int) -> TransformationSet:
    """Identity plus (1,s), (s,1), (s,s) for each of ``factor_count`` factors.

    Factors sit on a uniform grid strictly inside (0.5, 1.25): the open
    interval is split into ``factor_count`` equal bins and each factor is a
    bin midpoint.
    """
    if factor_count < 1:
        raise ValueError("scale_set needs factor_count >= 1")
    lo, hi = SCALE_RANGE
    step = (hi - lo) / factor_count
    factors = [lo + (i + 0.5) * step for i in range(factor_count)]
    transforms = [IDENTITY]
    for s in factors:
        transforms.append(AffineTransform(scale_h=1.0, scale_w=s))
        transforms.append(AffineTransform(scale_h=s, scale_w=1.0))
        transforms.append(AffineTransform(scale_h=s, scale_w=s))
    return TransformationSet(transforms, label=f"scale:{factor_count}")


def translation_set(factors) -> TransformationSet:
    """Identity plus the 8 diagonal/axis offsets for each translation factor."""
    factors = list(factors)
    if not factors:
        raise ValueError("translation_set needs at least one factor")
    for t in factors:
        if not (0.0 < t <= 0.5):
            raise ValueError(f"translation factor {t} outside (0, 0.5]")
    transforms = [IDENTITY]
    for t in factors:
        for dh, dw in TRANSLATION_OFFSETS:
            transforms.append(
                AffineTransform(translate_h_fraction=dh * t, translate_w_fraction=dw * t)
            )
    label = "translation:" + ",".join(f"{t:g}" for t in factors)
    return TransformationSet(transforms, label=label)


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------

def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror integer indices into [0, n): ... 1 0 | 0 1 .. n-1 | n-1 n-2 ..."""
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, border: str) -> np.ndarray:
    """Sample img (H, W, C) at float coordinates with bilinear weights.

    border="reflect" mirrors out-of-range neighbors; border="zero" makes
    them contribute nothing.
    """
    h, w = img.shape[:2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]

    out = np.zeros(rows.shape + (img.shape[2],), dtype=np.float64)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri, ci = r0 + dr, c0 + dc
        if border == "reflect":
            vals = img[_reflect_indices(ri, h), _reflect_indices(ci, w)]
        else:
            inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            vals = img[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
            vals = np.where(inside[..., None], vals, 0.0)
        out += wgt * vals
    return out


def _scale(img: np.ndarray, sh: float, sw: float) -> np.ndarray:
    # Inverse mapping about the center; downscaling samples beyond the frame,
    # which the reflect border fills.
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = np.arange(h, dtype=np.float64)[:, None]
    c = np.arange(w, dtype=np.float64)[None, :]
    rows = cy + (r - cy) / sh + np.zeros_like(c)
    cols = cx + (c - cx) / sw + np.zeros_like(r)
    return _bilinear(img, rows, cols, border="reflect")


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    h, w = img.shape[:2]
    degrees = degrees % 360.0
    if degrees == 0.0:
        return img.copy()
    if degrees % 90.0 == 0.0 and h == w:
        return np.rot90(img, k=int(degrees // 90) % 4).copy()
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    u = np.arange(h, dtype=np.float64)[:, None] - cy
    v = np.arange(w, dtype=np.float64)[None, :] - cx
    # inverse map of a counter-clockwise content rotation (row 0 displayed on top)
    rows = cy + u * cos_t + v * sin_t
    cols = cx - u * sin_t + v * cos_t
    return _bilinear(img, rows, cols, border="zero")


def _translate(img: np.ndarray, th: float, tw: float) -> np.ndarray:
    h, w = img.shape[:2]
    dr, dc = th * h, tw * w
    if dr == int(dr) and dc == int(dc):
        out = np.zeros_like(img)
        dri, dci = int(dr), int(dc)
        src_r = slice(max(0, -dri), min(h, h - dri))
        src_c = slice(max(0, -dci), min(w, w - dci))
        dst_r = slice(max(0, dri), min(h, h + dri))
        dst_c = slice(max(0, dci), min(w, w + dci))
        out[dst_r, dst_c] = img[src_r, src_c]
        return out
    r = np.arange(h, dtype=np.float64)[:, None] - dr + np.zeros((1, w))
    c = np.arange(w, dtype=np.float64)[None, :] - dc + np.zeros((h, 1))
    return _bilinear(img, r, c, border="zero")


def apply(t: AffineTransform, img: np.ndarray) -> np.ndarray:
    """Transform an H x W x C image; output has the same shape and dtype
    float64.  Identity components are skipped so single-family transforms
    resample at most once."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ImageTooSmallError(f"expected H x W x C image, got shape {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ImageTooSmallError(f"image too small to transform: {img.shape}")
    out = img
    if t.scale_h != 1.0 or t.scale_w != 1.0:
        out = _scale(out, t.scale_h, t.scale_w)
    if t.rotation_degrees % 360.0 != 0.0:
        out = _rotate(out, t.rotation_degrees)
    if t.translate_h_fraction != 0.0 or t.translate_w_fraction != 0.0:
        out = _translate(out, t.translate_h_fraction, t.translate_w_fraction)
    if out is img:
        out = img.copy()
    return out


# ---------------------------------------------------------------------------
# CLI grammar
# ---------------------------------------------------------------------------

def parse_transform_file(path) -> TransformationSet:
    """One transform per line: ``rot=<deg> sh=<r> sw=<r> th=<r> tw=<r>``."""
    transforms = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = {}
        for token in line.split():
            if "=" not in token:
                raise FormatError(f"{path}:{lineno}: bad token {token!r}")
            key, _, value = token.partition("=")
            fields[key] = float(value)
        unknown = set(fields) - {"rot", "sh", "sw", "th", "tw"}
        if unknown:
            raise FormatError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        transforms.append(
            AffineTransform(
                rotation_degrees=fields.get("rot", 0.0),
                scale_h=fields.get("sh", 1.0),
                scale_w=fields.get("sw", 1.0),
                translate_h_fraction=fields.get("th", 0.0),
                translate_w_fraction=fields.get("tw", 0.0),
            )
        )
    if not transforms:
        raise FormatError(f"{path}: no transforms found")
    return TransformationSet(transforms, label=f"file:{path}")


def parse_transform_spec(text: str) -> TransformationSet:
    """Parse the CLI grammar: ``rotation:<m>``, ``scale:<factor_count>``,
    ``translation:<f1,f2,...>`` or ``file:<path>``."""
    kind, sep, arg = text.partition(":")
    if not sep:
        raise ValueError(f"bad transformation spec {text!r} (expected kind:args)")
    if kind == "rotation":
        return rotation_set(int(arg))
    if kind == "scale":
        return scale_set(int(arg))
    if kind == "translation":
        return translation_set([float(f) for f in arg.split(",") if f])
    if kind == "file":
        return parse_transform_file(arg)
    raise ValueError(f"unknown transformation kind {kind!r}")
