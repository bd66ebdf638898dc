"""Small image helpers: grayscale, box crops, bilinear resizing."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 3 and img.shape[2] >= 3:
        return img[..., :3] @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"cannot convert shape {img.shape} to grayscale")


def check_box(box, shape):
    x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate face box {box}")
    if x < 0 or y < 0 or x + w > shape[1] or y + h > shape[0]:
        raise ValueError(f"face box {box} outside image of shape {shape[:2]}")
    return x, y, w, h


def crop(img, box) -> np.ndarray:
    x, y, w, h = check_box(box, img.shape)
    return img[y:y + h, x:x + w]


def resize_bilinear(img, out_h, out_w=None) -> np.ndarray:
    """Bilinear resize sampling at pixel centers; same size is an exact copy."""
    out_w = out_h if out_w is None else out_w
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest") for c in range(img.shape[2])],
        axis=-1,
    )


def crop_resize(img, box, side) -> np.ndarray:
    return resize_bilinear(crop(img, box), side)
