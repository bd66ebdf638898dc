"""Feed-forward layer graphs over NHWC arrays with hand-written backprop."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Kind(str, Enum):
    CONV3X3 = "conv3x3"
    MAXPOOL2X2 = "maxpool2x2"
    RELU = "relu"
    FLATTEN = "flatten"
    FC = "fc"
    SOFTMAX = "softmax"


PARAM_KINDS = (Kind.CONV3X3, Kind.FC)


@dataclass
class LayerSpec:
    """One layer. ``n_in``/``n_out`` are channels for convs and dims for FCs."""

    kind: Kind
    n_in: int = 0
    n_out: int = 0
    trainable: bool = True
    name: str = ""

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind is Kind.CONV3X3:
            return {"W": (3, 3, self.n_in, self.n_out), "b": (self.n_out,)}
        if self.kind is Kind.FC:
            return {"W": (self.n_in, self.n_out), "b": (self.n_out,)}
        return {}

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def conv(n_in, n_out, name=""):
    return LayerSpec(Kind.CONV3X3, n_in, n_out, name=name)


def fc(n_in, n_out, name=""):
    return LayerSpec(Kind.FC, n_in, n_out, name=name)


def relu():
    return LayerSpec(Kind.RELU)


def pool():
    return LayerSpec(Kind.MAXPOOL2X2)


def flatten():
    return LayerSpec(Kind.FLATTEN)


def softmax():
    return LayerSpec(Kind.SOFTMAX)


def propagate_shapes(layers, input_shape) -> list[tuple[int, ...]]:
    """Output shape (without batch axis) after every layer.

    Raises ValueError naming the first incompatible layer.
    """
    shape = tuple(int(s) for s in input_shape)
    out = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k is Kind.CONV3X3:
            if len(shape) != 3 or shape[2] != layer.n_in:
                raise ValueError(f"layer {i} ({k.value}) expects {layer.n_in} channels, got shape {shape}")
            shape = (shape[0], shape[1], layer.n_out)
        elif k is Kind.MAXPOOL2X2:
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ValueError(f"layer {i} (maxpool2x2) needs even spatial dims, got {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif k is Kind.FLATTEN:
            shape = (int(np.prod(shape)),)
        elif k is Kind.FC:
            if len(shape) != 1 or shape[0] != layer.n_in:
                raise ValueError(f"layer {i} (fc) expects input dim {layer.n_in}, got shape {shape}")
            shape = (layer.n_out,)
        elif k is Kind.SOFTMAX:
            if len(shape) != 1:
                raise ValueError(f"layer {i} (softmax) needs a vector input, got {shape}")
        out.append(shape)
    return out


# -- per-kind kernels -------------------------------------------------------

def _im2col(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n,h,w,c,3,3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _col2im(dcols, shape):
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += d[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LayerGraph:
    """A chain of layers with per-layer weight dicts.

    ``params[i]`` is ``{"W": ..., "b": ...}`` for conv/fc layers and ``None``
    otherwise. Graphs built with ``materialize=False`` carry no arrays and are
    only good for shape and parameter accounting.
    """

    def __init__(self, layers, input_shape, params=None, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.shapes = propagate_shapes(self.layers, self.input_shape)
        self.params = params if params is not None else [None] * len(self.layers)
        self.meta = {}
        if len(self.params) != len(self.layers):
            raise ValueError("params list must align with layers")

    # -- construction helpers -------------------------------------------

    @property
    def materialized(self) -> bool:
        return all(p is not None for p, l in zip(self.params, self.layers) if l.has_params)

    def init_params(self, rng, std=0.01):
        """Draw every weight from normal(0, std) with zero biases, in layer order.

        ``std="he"`` scales each layer by sqrt(2 / fan_in) instead.
        """
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                shapes = layer.param_shapes()
                fan_in = int(np.prod(shapes["W"][:-1]))
                scale = np.sqrt(2.0 / fan_in) if std == "he" else std
                self.params[i] = {
                    "W": rng.normal(0.0, scale, size=shapes["W"]).astype(self.dtype),
                    "b": np.zeros(shapes["b"], dtype=self.dtype),
                }
        return self

    def copy(self) -> "LayerGraph":
        g = LayerGraph(
            [copy.copy(l) for l in self.layers],
            self.input_shape,
            [None if p is None else {k: v.copy() for k, v in p.items()} for p in self.params],
            self.dtype,
        )
        g.meta = dict(self.meta)
        return g

    def astype(self, dtype) -> "LayerGraph":
        g = self.copy()
        g.dtype = np.dtype(dtype)
        g.params = [None if p is None else {k: v.astype(dtype) for k, v in p.items()} for p in g.params]
        return g

    @property
    def output_shape(self):
        return self.shapes[-1] if self.shapes else self.input_shape

    def freeze(self, upto=None):
        """Mark layers ``[0, upto)`` (all when None) as not trainable."""
        for layer in self.layers[: len(self.layers) if upto is None else upto]:
            layer.trainable = False
        return self

    # -- parameter views -------------------------------------------------

    def named_params(self, trainable_only=False) -> dict[str, np.ndarray]:
        out = {}
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            if not layer.has_params or (trainable_only and not layer.trainable):
                continue
            for k in ("W", "b"):
                out[f"{i}.{k}"] = p[k]
        return out

    def param_count(self, learnable_only=False) -> int:
        return sum(l.param_count() for l in self.layers if l.has_params and (l.trainable or not learnable_only))

    # -- forward / backward ----------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        if not self.materialized:
            raise ValueError("network has no weights (built with materialize=False)")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, keep=False):
        """Run the chain on ``x`` (one sample or a batch).

        Returns the output activations, or ``(out, cache)`` when ``keep``.
        """
        single = np.asarray(x).shape == self.input_shape
        a = self._check_input(x)
        cache = []
        for layer, p in zip(self.layers, self.params):
            k = layer.kind
            if k is Kind.CONV3X3:
                cols = _im2col(a)
                n, h, w, _ = a.shape
                out = (cols @ p["W"].reshape(-1, layer.n_out) + p["b"]).reshape(n, h, w, layer.n_out)
                cache.append((cols, a.shape) if keep else None)
            elif k is Kind.MAXPOOL2X2:
                n, h, w, c = a.shape
                win = a.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
                idx = win.argmax(axis=-1)
                out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
                cache.append((idx, a.shape) if keep else None)
            elif k is Kind.RELU:
                out = np.maximum(a, 0)
                cache.append(a > 0 if keep else None)
            elif k is Kind.FLATTEN:
                out = a.reshape(a.shape[0], -1)
                cache.append(a.shape if keep else None)
            elif k is Kind.FC:
                out = a @ p["W"] + p["b"]
                cache.append(a if keep else None)
            elif k is Kind.SOFTMAX:
                out = _softmax(a)
                cache.append(out if keep else None)
            a = out
        if keep:
            return a, cache
        return a[0] if single else a

    def lowest_trainable(self) -> int:
        for i, layer in enumerate(self.layers):
            if layer.has_params and layer.trainable:
                return i
        return len(self.layers)

    def backward(self, cache, d_out, need_input_grad=False, skip_softmax=False):
        """Backpropagate ``d_out`` through the cached forward pass.

        With ``skip_softmax`` the trailing softmax is treated as already
        folded into ``d_out`` (gradient with respect to the logits).
        Returns ``(grads, d_input)``; ``grads`` holds trainable layers only.
        """
        grads = {}
        stop = 0 if need_input_grad else self.lowest_trainable()
        d = d_out
        for i in range(len(self.layers) - 1, stop - 1, -1):
            layer, p, c = self.layers[i], self.params[i], cache[i]
            k = layer.kind
            if k is Kind.SOFTMAX:
                if not (skip_softmax and i == len(self.layers) - 1):
                    d = c * (d - (d * c).sum(axis=-1, keepdims=True))
            elif k is Kind.FC:
                if layer.trainable:
                    grads[f"{i}.W"] = c.T @ d
                    grads[f"{i}.b"] = d.sum(axis=0)
                d = d @ p["W"].T
            elif k is Kind.RELU:
                d = d * c
            elif k is Kind.FLATTEN:
                d = d.reshape(c)
            elif k is Kind.MAXPOOL2X2:
                idx, shape = c
                n, h, w, ch = shape
                win = np.zeros(idx.shape + (4,), dtype=d.dtype)
                np.put_along_axis(win, idx[..., None], d[..., None], axis=-1)
                d = win.reshape(n, h // 2, w // 2, ch, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)
            elif k is Kind.CONV3X3:
                cols, shape = c
                d2 = d.reshape(-1, layer.n_out)
                if layer.trainable:
                    grads[f"{i}.W"] = (cols.T @ d2).reshape(p["W"].shape)
                    grads[f"{i}.b"] = d2.sum(axis=0)
                if i > stop or need_input_grad:
                    d = _col2im(d2 @ p["W"].reshape(-1, layer.n_out).T, shape)
        return grads, (d if need_input_grad else None)


def cross_entropy(probs, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``probs``."""
    p = probs[np.arange(len(targets)), targets]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(probs.dtype).tiny))))


def logits_grad(probs, targets):
    """Gradient of the mean cross-entropy with respect to the logits."""
    g = probs.copy()
    g[np.arange(len(targets)), targets] -= 1
    return g / len(targets)
