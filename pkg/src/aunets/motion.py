"""Dense optical flow, its 3-channel image embedding, and fused input bundles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .imaging import check_box, crop, crop_resize, resize_bilinear, to_gray
from .netcore.arch import FusionMode

ZERO_MOTION = (0.5, 0.5, 0.0)


@dataclass
class FlowField:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape:
            raise ValueError("dx and dy must share a shape")

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def magnitude(self):
        return np.sqrt(self.dx ** 2 + self.dy ** 2)


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 16:
            break
        pyr.append(ndimage.gaussian_filter(pyr[-1], 1.0)[::2, ::2])
    return pyr


def _warp(img, u, v):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + v, xx + u], order=1, mode="nearest")


def lucas_kanade(prev, nxt, levels=4, iters=4, sigma=2.0, reg=1e-4) -> FlowField:
    """Coarse-to-fine Lucas-Kanade on brightness constancy, with warping.

    Solves the 2x2 structure-tensor system under a Gaussian window at every
    pyramid level; ``reg`` damps flat regions toward zero update.
    """
    p0 = _pyramid(prev, levels)
    p1 = _pyramid(nxt, levels)
    u = np.zeros(p0[-1].shape)
    v = np.zeros(p0[-1].shape)
    for lvl in range(len(p0) - 1, -1, -1):
        a, b = p0[lvl], p1[lvl]
        if u.shape != a.shape:
            u = 2.0 * resize_bilinear(u, *a.shape)
            v = 2.0 * resize_bilinear(v, *a.shape)
        for _ in range(iters):
            bw = _warp(b, u, v)
            it = bw - a
            if not np.any(it):
                break
            gy, gx = np.gradient(0.5 * (a + bw))
            sxx = ndimage.gaussian_filter(gx * gx, sigma)
            syy = ndimage.gaussian_filter(gy * gy, sigma)
            sxy = ndimage.gaussian_filter(gx * gy, sigma)
            bx = -ndimage.gaussian_filter(gx * it, sigma)
            by = -ndimage.gaussian_filter(gy * it, sigma)
            sxx += reg
            syy += reg
            det = sxx * syy - sxy * sxy
            u = u + (syy * bx - sxy * by) / det
            v = v + (sxx * by - sxy * bx) / det
    return FlowField(u, v)


FlowEstimator = Callable[[np.ndarray, np.ndarray], FlowField]


def estimate_flow(prev_frame, next_frame, estimator: FlowEstimator | None = None) -> FlowField:
    """Flow from ``prev_frame`` to ``next_frame`` (pixel displacements).

    Any callable taking two grayscale float arrays and returning a FlowField
    can replace the built-in estimator.
    """
    a, b = to_gray(prev_frame), to_gray(next_frame)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    flow = (estimator or lucas_kanade)(a, b)
    if flow.dx.shape != a.shape:
        raise ValueError("estimator returned a flow field of the wrong size")
    return flow


def first_frame_policy(frames, estimator: FlowEstimator | None = None) -> list[FlowField]:
    """One flow per frame: frame t uses (t-1, t); frame 0 gets the zero field."""
    frames = list(frames)
    if not frames:
        raise ValueError("video has no frames")
    out = [FlowField.zeros(np.asarray(frames[0]).shape[:2])]
    for t in range(1, len(frames)):
        out.append(estimate_flow(frames[t - 1], frames[t], estimator))
    return out


def embed_flow(flow: FlowField, face_box, out_side: int) -> np.ndarray:
    """Map a flow field to a [0, 1] image: (x, y) scaled by the box's peak magnitude, then magnitude.

    Zero motion maps to (0.5, 0.5, 0). The result is cropped to ``face_box``
    and resized to ``out_side`` square.
    """
    x, y, w, h = check_box(face_box, flow.dx.shape)
    dx = flow.dx[y:y + h, x:x + w]
    dy = flow.dy[y:y + h, x:x + w]
    mag = np.sqrt(dx ** 2 + dy ** 2)
    s = float(mag.max())
    if s < 1e-6:
        img = np.empty((h, w, 3))
        img[...] = ZERO_MOTION
    else:
        img = np.stack([(dx / s + 1) / 2, (dy / s + 1) / 2, mag / s], axis=-1)
    return np.clip(resize_bilinear(img, out_side), 0.0, 1.0)


def rgb_crop(frame, face_box, out_side: int) -> np.ndarray:
    """Face crop resized to the network side, values in [0, 1]."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return crop_resize(img, face_box, out_side)


def build_bundle(rgb, flow_image, mode):
    """Assemble the network input for ``mode`` from an RGB crop and a flow image.

    CHANNELS stacks to H x W x 6 (rgb first), HORIZONTAL places rgb left of
    flow (H x 2W x 3), the two-stream modes return an (rgb, flow) pair.
    """
    mode = FusionMode.parse(mode)
    if mode.uses_rgb and rgb is None:
        raise ValueError(f"{mode.value} needs an RGB crop")
    if mode.uses_flow and flow_image is None:
        raise ValueError(f"{mode.value} needs a flow image")
    if mode is FusionMode.RGB_ONLY:
        return np.asarray(rgb)
    if mode is FusionMode.OF_ONLY:
        return np.asarray(flow_image)
    rgb, flow_image = np.asarray(rgb), np.asarray(flow_image)
    if rgb.shape != flow_image.shape:
        raise ValueError(f"rgb {rgb.shape} and flow {flow_image.shape} shapes differ")
    if mode is FusionMode.CHANNELS:
        return np.concatenate([rgb, flow_image], axis=-1)
    if mode is FusionMode.HORIZONTAL:
        return np.concatenate([rgb, flow_image], axis=1)
    return (rgb, flow_image)


def stack_bundles(bundles):
    """Batch a list of bundles (arrays or pairs) along a new leading axis."""
    if not bundles:
        raise ValueError("no bundles")
    if isinstance(bundles[0], tuple):
        return tuple(np.stack(part) for part in zip(*bundles))
    return np.stack(bundles)


__all__ = [
    "FlowField", "ZERO_MOTION", "build_bundle", "crop", "embed_flow", "estimate_flow",
    "first_frame_policy", "lucas_kanade", "rgb_crop", "stack_bundles",
]
