"""Weight transplant operations used to initialize fusion networks."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .arch import FusionMode, TwoStreamGraph, make_net, get_profile
from .graph import Kind, LayerGraph, propagate_shapes


class Transplant(str, Enum):
    COPY_FIRST_LAYER_TO_EXTRA_CHANNELS = "copy_first_layer_to_extra_channels"
    TILE_FC_FOR_DOUBLED_INPUT = "tile_fc_for_doubled_input"
    CLONE_TRUNK = "clone_trunk"


def _param_layers(g: LayerGraph):
    return [i for i, l in enumerate(g.layers) if l.has_params]


def _copy_p(p):
    return {k: v.copy() for k, v in p.items()}


def _copy_matching(src: LayerGraph, dst: LayerGraph, skip=()):
    si, di = _param_layers(src), _param_layers(dst)
    if len(si) != len(di):
        raise ValueError(f"source has {len(si)} parameter layers, destination {len(di)}")
    for a, b in zip(si, di):
        if b in skip:
            continue
        if any(src.params[a][k].shape != dst.params[b][k].shape for k in ("W", "b")):
            raise ValueError(f"layer {a} -> {b}: shapes differ")
        dst.params[b] = _copy_p(src.params[a])


def _flatten_shape_before(g: LayerGraph, i: int):
    """Spatial shape feeding FC layer ``i`` when it directly follows FLATTEN."""
    if i > 0 and g.layers[i - 1].kind is Kind.FLATTEN:
        return g.shapes[i - 2] if i >= 2 else g.input_shape
    return None


def tile_fc(w_src: np.ndarray, spatial_src=None, spatial_dst=None) -> np.ndarray:
    """Widen an FC weight to a doubled input, copying (not scaling) the original.

    Flat inputs are tiled by stacking rows. Inputs flattened from an image
    doubled along its width are tiled along that width so the right half
    sees the same weights as the left half.
    """
    if spatial_src is None:
        return np.concatenate([w_src, w_src], axis=0)
    h, w, c = spatial_src
    if tuple(spatial_dst) != (h, 2 * w, c):
        raise ValueError(f"cannot tile spatial input {spatial_src} onto {spatial_dst}")
    w4 = w_src.reshape(h, w, c, -1)
    return np.concatenate([w4, w4], axis=1).reshape(h * 2 * w * c, -1)


def transplant(op, src, dst):
    """Copy ``src`` weights into ``dst`` per ``op`` and return ``dst``.

    COPY_FIRST_LAYER_TO_EXTRA_CHANNELS: src is 3-channel, dst 6-channel; the
    first conv kernel is duplicated over the extra channels.
    TILE_FC_FOR_DOUBLED_INPUT: the first FC whose input doubled is tiled,
    everything else copied.
    CLONE_TRUNK: dst is a two-stream graph (or trunk); the motion trunk (or
    dst itself) becomes a copy of src, a trunk or a two-stream color trunk.
    """
    op = Transplant(op)
    if op is Transplant.CLONE_TRUNK:
        source = src.color if isinstance(src, TwoStreamGraph) else src
        target = dst.motion if isinstance(dst, TwoStreamGraph) else dst
        if [(_l.kind, _l.n_in, _l.n_out) for _l in source.layers] != [(_l.kind, _l.n_in, _l.n_out) for _l in target.layers]:
            raise ValueError("trunk layer structures differ")
        if source.input_shape != target.input_shape:
            raise ValueError("trunk input shapes differ")
        target.params = [None if p is None else _copy_p(p) for p in source.params]
        return dst
    if not (isinstance(src, LayerGraph) and isinstance(dst, LayerGraph)):
        raise ValueError(f"{op.value} works on single-stream graphs")
    si, di = _param_layers(src), _param_layers(dst)
    if op is Transplant.COPY_FIRST_LAYER_TO_EXTRA_CHANNELS:
        a, b = si[0], di[0]
        ws = src.params[a]["W"]
        if src.layers[a].kind is not Kind.CONV3X3 or dst.layers[b].kind is not Kind.CONV3X3:
            raise ValueError("first parameter layers must be convolutions")
        if dst.params[b]["W"].shape != ws.shape[:2] + (2 * ws.shape[2], ws.shape[3]):
            raise ValueError(f"destination first conv {dst.params[b]['W'].shape} is not a channel-doubled {ws.shape}")
        _copy_matching(src, dst, skip=(b,))
        dst.params[b] = {"W": np.concatenate([ws, ws], axis=2), "b": src.params[a]["b"].copy()}
        return dst
    # TILE_FC_FOR_DOUBLED_INPUT
    if len(si) != len(di):
        raise ValueError("parameter layer counts differ")
    tiled = None
    for a, b in zip(si, di):
        ws, wd = src.params[a]["W"], dst.params[b]["W"]
        if ws.shape == wd.shape:
            continue
        if src.layers[a].kind is not Kind.FC or wd.shape != (2 * ws.shape[0], ws.shape[1]) or tiled is not None:
            raise ValueError(f"layer {a}: {ws.shape} -> {wd.shape} is not a single doubled-input FC")
        tiled = b
        w_new = tile_fc(ws, _flatten_shape_before(src, a), _flatten_shape_before(dst, b))
    if tiled is None:
        raise ValueError("no FC layer with doubled input found")
    _copy_matching(src, dst, skip=(tiled,))
    ai = si[di.index(tiled)]
    dst.params[tiled] = {"W": w_new, "b": src.params[ai]["b"].copy()}
    return dst


def from_rgb(rgb: LayerGraph, mode) -> LayerGraph | TwoStreamGraph:
    """Initialize a ``mode`` network from a trained single-stream color net."""
    mode = FusionMode.parse(mode)
    profile = get_profile(rgb.meta.get("profile", "tiny"), rgb.output_shape[0])
    dst = make_net(profile, mode, seed=None, materialize=False, dtype=rgb.dtype)
    if mode in (FusionMode.RGB_ONLY, FusionMode.OF_ONLY):
        out = rgb.copy()
        out.meta = dict(dst.meta, seed=rgb.meta.get("seed"))
        return out
    if isinstance(dst, LayerGraph):
        dst.params = [
            {k: np.zeros(s, rgb.dtype) for k, s in l.param_shapes().items()} if l.has_params else None
            for l in dst.layers
        ]
        op = Transplant.COPY_FIRST_LAYER_TO_EXTRA_CHANNELS if mode is FusionMode.CHANNELS else Transplant.TILE_FC_FOR_DOUBLED_INPUT
        transplant(op, rgb, dst)
        dst.meta["seed"] = rgb.meta.get("seed")
        return dst
    # two streams: color trunk = rgb prefix, motion = clone, head tiled
    n_trunk = len(dst.color.layers)
    dst.color.params = [None if p is None else _copy_p(p) for p in rgb.params[:n_trunk]]
    transplant(Transplant.CLONE_TRUNK, dst.color, dst)
    head_params = [None if p is None else _copy_p(p) for p in rgb.params[n_trunk:]]
    first = next(i for i, l in enumerate(dst.head.layers) if l.has_params)
    head_params[first]["W"] = tile_fc(head_params[first]["W"])
    dst.head.params = head_params
    dst.meta["seed"] = rgb.meta.get("seed")
    return dst


def adapt_head(net: LayerGraph, k: int, seed: int) -> LayerGraph:
    """Swap the final FC for a fresh ``k``-way layer; every other weight is copied."""
    if k < 2:
        raise ValueError(f"head needs at least 2 outputs, got {k}")
    if not (net.layers and net.layers[-1].kind is Kind.SOFTMAX and net.layers[-2].kind is Kind.FC):
        raise ValueError("network must end in FC + softmax")
    out = net.copy()
    i = len(out.layers) - 2
    out.layers[i].n_out = k
    out.layers[i].trainable = True
    out.shapes = propagate_shapes(out.layers, out.input_shape)
    rng = np.random.default_rng(seed)
    n_in = out.layers[i].n_in
    out.params[i] = {
        "W": rng.normal(0.0, 0.01, size=(n_in, k)).astype(out.dtype),
        "b": np.zeros(k, dtype=out.dtype),
    }
    return out
