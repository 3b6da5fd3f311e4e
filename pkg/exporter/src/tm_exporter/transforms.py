"""Affine transformation parametrization matching the measurement engine.

Same parameter tuples, same builder grammar, same resampling algorithm
(scale about center with reflected borders, rotate about center with zero
fill, translate with zero fill; exact paths for quarter turns and
integer-pixel shifts), so exported activations line up numerically with the
engine's own transformed inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCALE_RANGE = (0.5, 1.25)
TRANSLATION_OFFSETS = [(-1, -1), (-1, 1), (1, -1), (1, 1), (0, 1), (1, 0), (0, -1), (-1, 0)]


@dataclass(frozen=True)
class AffineTransform:
    rotation_degrees: float = 0.0
    scale_h: float = 1.0
    scale_w: float = 1.0
    translate_h_fraction: float = 0.0
    translate_w_fraction: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_degrees % 360.0 == 0.0
            and self.scale_h == 1.0
            and self.scale_w == 1.0
            and self.translate_h_fraction == 0.0
            and self.translate_w_fraction == 0.0
        )


IDENTITY = AffineTransform()


def rotation_set(m: int) -> list[AffineTransform]:
    return [AffineTransform(rotation_degrees=360.0 * i / m) for i in range(m)]


def scale_set(factor_count: int) -> list[AffineTransform]:
    lo, hi = SCALE_RANGE
    step = (hi - lo) / factor_count
    out = [IDENTITY]
    for i in range(factor_count):
        s = lo + (i + 0.5) * step
        out += [
            AffineTransform(scale_h=1.0, scale_w=s),
            AffineTransform(scale_h=s, scale_w=1.0),
            AffineTransform(scale_h=s, scale_w=s),
        ]
    return out


def translation_set(factors) -> list[AffineTransform]:
    out = [IDENTITY]
    for t in factors:
        for dh, dw in TRANSLATION_OFFSETS:
            out.append(AffineTransform(translate_h_fraction=dh * t, translate_w_fraction=dw * t))
    return out


def parse_transform_spec(text: str) -> tuple[list[AffineTransform], str]:
    kind, sep, arg = text.partition(":")
    if not sep:
        raise ValueError(f"bad transformation spec {text!r}")
    if kind == "rotation":
        return rotation_set(int(arg)), text
    if kind == "scale":
        return scale_set(int(arg)), text
    if kind == "translation":
        return translation_set([float(f) for f in arg.split(",") if f]), text
    if kind == "file":
        transforms = []
        for raw in Path(arg).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = dict(token.split("=", 1) for token in line.split())
            transforms.append(
                AffineTransform(
                    rotation_degrees=float(fields.get("rot", 0.0)),
                    scale_h=float(fields.get("sh", 1.0)),
                    scale_w=float(fields.get("sw", 1.0)),
                    translate_h_fraction=float(fields.get("th", 0.0)),
                    translate_w_fraction=float(fields.get("tw", 0.0)),
                )
            )
        return transforms, text
    raise ValueError(f"unknown transformation kind {kind!r}")


def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, border: str) -> np.ndarray:
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


def _scale(img, sh, sw):
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = np.arange(h, dtype=np.float64)[:, None]
    c = np.arange(w, dtype=np.float64)[None, :]
    rows = cy + (r - cy) / sh + np.zeros_like(c)
    cols = cx + (c - cx) / sw + np.zeros_like(r)
    return _bilinear(img, rows, cols, border="reflect")


def _rotate(img, degrees):
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
    rows = cy + u * cos_t + v * sin_t
    cols = cx - u * sin_t + v * cos_t
    return _bilinear(img, rows, cols, border="zero")


def _translate(img, th, tw):
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
    """Scale, then rotate, then translate an H x W x C image (float64 out)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
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
