"""Box algebra, IoU/GIoU, and bilinear RoIAlign pooling.

Boxes are (cx, cy, w, h) in coordinates normalized to the unit square.
Array-valued helpers operate on float64 arrays of shape (n, 4); the
tensor-valued ones participate in the gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, center/size form, normalized to [0, 1]."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box with negative size: w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def boxes_to_array(boxes) -> np.ndarray:
    """Stack Box objects (or row arrays) into an (n, 4) float64 array."""
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    rows = [b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64)
            for b in boxes]
    return np.stack(rows) if rows else np.zeros((0, 4))


def corners(arr: np.ndarray) -> np.ndarray:
    """(n, 4) cxcywh -> (n, 4) x1y1x2y2."""
    arr = np.asarray(arr, dtype=np.float64)
    half = arr[..., 2:] / 2
    return np.concatenate([arr[..., :2] - half, arr[..., :2] + half], axis=-1)


def clip_boxes(arr: np.ndarray) -> np.ndarray:
    """Clip boxes to the unit square, preserving the center/size form."""
    c = np.clip(corners(arr), 0.0, 1.0)
    wh = np.maximum(c[..., 2:] - c[..., :2], 0.0)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, wh], axis=-1)


def _corner_area(c: np.ndarray) -> np.ndarray:
    # Areas derived from the corner form so that intersection and area of
    # identical boxes are the very same floats (makes iou(a, a) == 1 exact).
    return (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) cxcywh arrays -> (n, m)."""
    a, b = boxes_to_array(a), boxes_to_array(b)
    ca, cb = corners(a), corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = _corner_area(ca)[:, None] + _corner_area(cb)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU -> (n, m) in [-1, 1]."""
    a, b = boxes_to_array(a), boxes_to_array(b)
    ca, cb = corners(a), corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = _corner_area(ca)[:, None] + _corner_area(cb)[None, :] - inter
    iou = np.zeros_like(inter)
    np.divide(inter, union, out=iou, where=union > 0)
    hlt = np.minimum(ca[:, None, :2], cb[None, :, :2])
    hrb = np.maximum(ca[:, None, 2:], cb[None, :, 2:])
    hull = (hrb - hlt)[..., 0] * (hrb - hlt)[..., 1]
    out = iou.copy()
    np.subtract(iou, (hull - union) / np.where(hull > 0, hull, 1.0),
                out=out, where=hull > 0)
    return out


def iou(a, b) -> float:
    a = a.as_array() if isinstance(a, Box) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64)
    return float(iou_matrix(a.reshape(1, 4), b.reshape(1, 4))[0, 0])


def giou(a, b) -> float:
    a = a.as_array() if isinstance(a, Box) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64)
    return float(giou_matrix(a.reshape(1, 4), b.reshape(1, 4))[0, 0])


# ---------------------------------------------------------------------------
# differentiable GIoU (for the box regression loss)

_COLS = [np.eye(4)[:, i:i + 1] for i in range(4)]


def _col(t: Tensor, i: int) -> Tensor:
    return ad.matmul(t, Tensor(_COLS[i]))


def _emax(a, b):
    return ad.add(a, ad.relu(ad.sub(b, a)))


def _emin(a, b):
    return ad.sub(a, ad.relu(ad.sub(a, b)))


def giou_pairs(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-row GIoU between predicted boxes (m, 4 Tensor) and constant targets.

    Assumes every target box has positive area, which generated and
    sigmoid-parameterized boxes guarantee; the gradient reaches only ``pred``.
    """
    target = boxes_to_array(target)
    pcx, pcy, pw, ph = (_col(pred, i) for i in range(4))
    px1, py1 = ad.sub(pcx, ad.mul(pw, 0.5)), ad.sub(pcy, ad.mul(ph, 0.5))
    px2, py2 = ad.add(pcx, ad.mul(pw, 0.5)), ad.add(pcy, ad.mul(ph, 0.5))
    tc = corners(target)
    tx1, ty1, tx2, ty2 = (Tensor(tc[:, i:i + 1]) for i in range(4))

    iw = ad.relu(ad.sub(_emin(px2, tx2), _emax(px1, tx1)))
    ih = ad.relu(ad.sub(_emin(py2, ty2), _emax(py1, ty1)))
    inter = ad.mul(iw, ih)
    area_p = ad.mul(pw, ph)
    area_t = Tensor((target[:, 2] * target[:, 3]).reshape(-1, 1))
    union = ad.sub(ad.add(area_p, area_t), inter)
    iou_t = ad.div(inter, union)

    hw = ad.sub(_emax(px2, tx2), _emin(px1, tx1))
    hh = ad.sub(_emax(py2, ty2), _emin(py1, ty1))
    hull = ad.mul(hw, hh)
    return ad.sub(iou_t, ad.div(ad.sub(hull, union), hull))


# ---------------------------------------------------------------------------
# RoIAlign


def _sample_grid(boxes: np.ndarray, out_h: int, out_w: int, spb: int,
                 height: int, width: int):
    """Continuous sample coordinates for every (box, bin, sub-sample).

    Returns (ys, xs) arrays of shape (n, out_h, out_w, spb, spb) in map
    coordinates where pixel (r, c) sits at (r, c) and the map spans
    [0, H-1] x [0, W-1].
    """
    c = corners(clip_boxes(boxes))
    x1, y1, x2, y2 = (c[:, i].reshape(-1, 1, 1, 1, 1) for i in range(4))
    by = np.arange(out_h).reshape(1, -1, 1, 1, 1)
    bx = np.arange(out_w).reshape(1, 1, -1, 1, 1)
    sy = (np.arange(spb).reshape(1, 1, 1, -1, 1) + 0.5) / spb
    sx = (np.arange(spb).reshape(1, 1, 1, 1, -1) + 0.5) / spb
    u = x1 + (x2 - x1) * (bx + sx) / out_w
    v = y1 + (y2 - y1) * (by + sy) / out_h
    xs = np.clip(u * (width - 1), 0.0, width - 1)
    ys = np.clip(v * (height - 1), 0.0, height - 1)
    return ys, xs


def roi_align(feature_map: Tensor, boxes, out_h: int = 7, out_w: int = 7,
              samples_per_bin: int = 2) -> Tensor:
    """Bilinear region pooling of a 2-D map into (n, out_h, out_w) bins.

    Each bin is the mean of samples_per_bin^2 bilinear samples at regularly
    spaced sub-bin centers.  Boxes are clipped to the unit square; a
    zero-area box degenerates to point samples at its center.  The gradient
    flows back into the map.
    """
    fmap = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    if fmap.ndim != 2:
        raise ad.ShapeError(f"op 'roi_align': expected a 2-D map, got shape {fmap.shape}")
    height, width = fmap.shape
    arr = boxes_to_array(boxes)
    n = arr.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, out_h, out_w)))
    spb = int(samples_per_bin)
    ys, xs = _sample_grid(arr, out_h, out_w, spb, height, width)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy = ys - y0
    wx = xs - x0
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx

    data = fmap.data
    vals = (data[y0, x0] * w00 + data[y0, x1] * w01
            + data[y1, x0] * w10 + data[y1, x1] * w11)
    out = vals.mean(axis=(3, 4))

    def vjp(g):
        gs = g[:, :, :, None, None] / (spb * spb)
        full = np.zeros((height, width))
        np.add.at(full, (y0, x0), gs * w00)
        np.add.at(full, (y0, x1), gs * w01)
        np.add.at(full, (y1, x0), gs * w10)
        np.add.at(full, (y1, x1), gs * w11)
        return full

    return ad._finish("roi_align", out, (fmap,), (vjp,))
