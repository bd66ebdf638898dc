"""Profiles, the seven detector architectures, and two-stream graphs."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .graph import Kind, LayerGraph, conv, cross_entropy, fc, flatten, logits_grad, pool, relu, softmax


@dataclass(frozen=True)
class Profile:
    name: str
    input_side: int
    conv_blocks: tuple
    fc_dims: tuple
    k_outputs: int = 2

    def with_k(self, k: int) -> "Profile":
        return Profile(self.name, self.input_side, self.conv_blocks, self.fc_dims, k)

    @property
    def feature_side(self) -> int:
        return self.input_side // 2 ** len(self.conv_blocks)

    @property
    def conv_out_channels(self) -> int:
        return self.conv_blocks[-1][-1]


VGG16 = Profile(
    "vgg16", 224,
    ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)),
    (4096, 4096),
)
# Three FC layers like VGG so every two-stream fusion point exists.
TINY = Profile("tiny", 64, ((8,), (16,), (32,)), (64, 64))

PROFILES = {"vgg16": VGG16, "tiny": TINY}


def get_profile(name: str, k: int = 2) -> Profile:
    try:
        return PROFILES[name.lower()].with_k(k)
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


class FusionMode(str, Enum):
    RGB_ONLY = "rgb_only"
    OF_ONLY = "of_only"
    CHANNELS = "channels"
    HORIZONTAL = "horizontal"
    PI_CONV = "pi_conv"
    PI_FC6 = "pi_fc6"
    PI_FC7 = "pi_fc7"

    @classmethod
    def parse(cls, value) -> "FusionMode":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("/", "_").replace("-", "_")
        for m in cls:
            if v in (m.value, m.name.lower()):
                return m
        raise ValueError(f"unknown fusion mode {value!r}")

    @property
    def two_stream(self) -> bool:
        return self in (FusionMode.PI_CONV, FusionMode.PI_FC6, FusionMode.PI_FC7)

    @property
    def uses_rgb(self) -> bool:
        return self is not FusionMode.OF_ONLY

    @property
    def uses_flow(self) -> bool:
        return self is not FusionMode.RGB_ONLY


class Arch(str, Enum):
    """The seven columns of the parameter table."""

    HYDRANET = "hydranet"
    AUNETS = "aunets"
    CHANNELS = "channels"
    HORIZONTAL = "horizontal"
    PI_CONV = "pi_conv"
    PI_FC6 = "pi_fc6"
    PI_FC7 = "pi_fc7"

    @classmethod
    def parse(cls, value) -> "Arch":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("/", "_").replace("-", "_")
        for a in cls:
            if v in (a.value, a.name.lower()):
                return a
        raise ValueError(f"unknown architecture descriptor {value!r}")


# stage index of each two-stream fusion point: 0 = after conv, 1 = after fc6, 2 = after fc7
FUSION_STAGE = {FusionMode.PI_CONV: 0, FusionMode.PI_FC6: 1, FusionMode.PI_FC7: 2}


def conv_trunk(profile: Profile, in_channels: int = 3) -> list:
    layers, c = [], in_channels
    for b, block in enumerate(profile.conv_blocks, start=1):
        for j, width in enumerate(block, start=1):
            layers += [conv(c, width, name=f"conv{b}_{j}"), relu()]
            c = width
        layers.append(pool())
    layers.append(flatten())
    return layers


def fc_layers(in_dim: int, profile: Profile, start: int = 0) -> list:
    """FC stack from hidden stage ``start`` (0 = fc6) through the softmax."""
    dims = list(profile.fc_dims)
    layers, d = [], in_dim
    for s in range(start, len(dims)):
        layers += [fc(d, dims[s], name=f"fc{6 + s}"), relu()]
        d = dims[s]
    layers += [fc(d, profile.k_outputs, name=f"fc{6 + len(dims)}"), softmax()]
    return layers


def trunk_out_dim(profile: Profile, stage: int, width_factor: int = 1) -> int:
    if stage == 0:
        return profile.feature_side ** 2 * width_factor * profile.conv_out_channels
    return profile.fc_dims[stage - 1]


class TwoStreamGraph:
    """Color and motion trunks joined by feature concatenation into one head."""

    def __init__(self, color: LayerGraph, motion: LayerGraph, head: LayerGraph, fusion: FusionMode, meta=None):
        if color.output_shape != motion.output_shape:
            raise ValueError("color and motion trunks must produce equal shapes")
        if head.input_shape != (2 * color.output_shape[0],):
            raise ValueError(f"head input {head.input_shape} must be twice the stream output {color.output_shape}")
        self.color, self.motion, self.head = color, motion, head
        self.fusion = fusion
        self.meta = dict(meta or {})

    @property
    def dtype(self):
        return self.head.dtype

    @property
    def input_shape(self):
        return (self.color.input_shape, self.motion.input_shape)

    @property
    def parts(self):
        return {"color": self.color, "motion": self.motion, "head": self.head}

    def copy(self) -> "TwoStreamGraph":
        return TwoStreamGraph(self.color.copy(), self.motion.copy(), self.head.copy(), self.fusion, self.meta)

    def astype(self, dtype) -> "TwoStreamGraph":
        return TwoStreamGraph(self.color.astype(dtype), self.motion.astype(dtype), self.head.astype(dtype), self.fusion, self.meta)

    def named_params(self, trainable_only=False):
        out = {}
        for name, g in self.parts.items():
            out.update({f"{name}.{k}": v for k, v in g.named_params(trainable_only).items()})
        return out

    def param_count(self, learnable_only=False) -> int:
        return sum(g.param_count(learnable_only) for g in self.parts.values())

    def _split(self, x):
        if not (isinstance(x, (tuple, list)) and len(x) == 2):
            raise ValueError("two-stream input must be a (color, motion) pair")
        return x

    def forward(self, x, keep=False):
        xc, xm = self._split(x)
        single = np.asarray(xc).shape == self.color.input_shape
        if keep:
            fc_, cc = self.color.forward(xc, keep=True)
            fm, cm = self.motion.forward(xm, keep=True)
            out, ch = self.head.forward(np.concatenate([fc_, fm], axis=1), keep=True)
            return out, (cc, cm, ch, fc_.shape[1])
        fc_ = self.color.forward(xc)
        fm = self.motion.forward(xm)
        if single:
            fc_, fm = fc_[None], fm[None]
        out = self.head.forward(np.concatenate([fc_, fm], axis=1))
        return out[0] if single else out

    def backward(self, cache, d_out, need_input_grad=False, skip_softmax=False):
        cc, cm, ch, split = cache
        any_trunk = any(l.has_params and l.trainable for l in self.color.layers + self.motion.layers)
        grads, d_feat = self.head.backward(ch, d_out, need_input_grad=any_trunk or need_input_grad, skip_softmax=skip_softmax)
        grads = {f"head.{k}": v for k, v in grads.items()}
        dx = []
        for name, g, c, d in (("color", self.color, cc, d_feat[:, :split] if d_feat is not None else None),
                              ("motion", self.motion, cm, d_feat[:, split:] if d_feat is not None else None)):
            if d is None or (g.lowest_trainable() == len(g.layers) and not need_input_grad):
                dx.append(None)
                continue
            gg, di = g.backward(c, d, need_input_grad=need_input_grad)
            grads.update({f"{name}.{k}": v for k, v in gg.items()})
            dx.append(di)
        return grads, (tuple(dx) if need_input_grad else None)


def make_net(profile: Profile, mode=FusionMode.RGB_ONLY, seed: int | None = 0, materialize=True,
             dtype=np.float32, hydra=False, init_std=0.01):
    """Build any detector architecture over ``profile``.

    Weights come from normal(0, 0.01) with zero biases, drawn in layer order
    from ``seed``. Two-stream nets get bit-identical trunks, with the color
    trunk frozen below the fusion point. ``hydra`` freezes the conv trunk.
    """
    mode = FusionMode.parse(mode)
    s = profile.input_side
    meta = {"profile": profile.name, "fusion_mode": mode.value, "seed": seed}
    if mode.two_stream:
        stage = FUSION_STAGE[mode]
        trunk_layers = conv_trunk(profile)
        d = trunk_out_dim(profile, 0)
        dims = list(profile.fc_dims)
        for j in range(stage):
            trunk_layers += [fc(d, dims[j], name=f"fc{6 + j}"), relu()]
            d = dims[j]
        color = LayerGraph(trunk_layers, (s, s, 3), dtype=dtype)
        motion = LayerGraph([_clone_spec(l) for l in trunk_layers], (s, s, 3), dtype=dtype)
        head = LayerGraph(fc_layers(2 * d, profile, start=stage), (2 * d,), dtype=dtype)
        color.freeze()
        net = TwoStreamGraph(color, motion, head, mode, meta)
        if materialize:
            rng = np.random.default_rng(seed)
            color.init_params(rng, init_std)
            motion.params = [None if p is None else {k: v.copy() for k, v in p.items()} for p in color.params]
            head.init_params(rng, init_std)
        return net
    in_c = 6 if mode is FusionMode.CHANNELS else 3
    width = 2 if mode is FusionMode.HORIZONTAL else 1
    layers = conv_trunk(profile, in_c) + fc_layers(trunk_out_dim(profile, 0, width), profile)
    net = LayerGraph(layers, (s, s * width, in_c), dtype=dtype)
    net.meta = meta
    if hydra:
        net.freeze(upto=_first_fc(net))
    if materialize:
        net.init_params(np.random.default_rng(seed), init_std)
    return net


def build(profile: Profile, seed: int = 0, materialize=True, dtype=np.float32) -> LayerGraph:
    """Single-stream color network over ``profile`` with all layers trainable."""
    return make_net(profile, FusionMode.RGB_ONLY, seed, materialize, dtype)


def _clone_spec(layer):
    from copy import copy
    return copy(layer)


def _first_fc(net: LayerGraph) -> int:
    return next(i for i, l in enumerate(net.layers) if l.kind is Kind.FC)


ARCH_MODE = {
    Arch.HYDRANET: FusionMode.RGB_ONLY,
    Arch.AUNETS: FusionMode.RGB_ONLY,
    Arch.CHANNELS: FusionMode.CHANNELS,
    Arch.HORIZONTAL: FusionMode.HORIZONTAL,
    Arch.PI_CONV: FusionMode.PI_CONV,
    Arch.PI_FC6: FusionMode.PI_FC6,
    Arch.PI_FC7: FusionMode.PI_FC7,
}


def describe(arch, profile: Profile = VGG16):
    """Weightless network for an architecture descriptor."""
    arch = Arch.parse(arch)
    return make_net(profile, ARCH_MODE[arch], materialize=False, hydra=arch is Arch.HYDRANET)


def param_count(net_or_arch, learnable_only: bool = False, profile: Profile = VGG16) -> int:
    """Exact parameter count of a network or of an architecture descriptor."""
    if isinstance(net_or_arch, (LayerGraph, TwoStreamGraph)):
        net = net_or_arch
    else:
        net = describe(net_or_arch, profile)
    return net.param_count(learnable_only)


def param_table(profile: Profile = VGG16) -> dict:
    """``{arch: (total, learnable)}`` for all seven architectures."""
    return {a: (param_count(a, False, profile), param_count(a, True, profile)) for a in Arch}


# -- generic model entry points ----------------------------------------------

def forward(net, x, keep=False):
    """Forward pass for either graph type. Softmax rows sum to one."""
    return net.forward(x, keep=keep)


def backward(net, x, targets):
    """Cross-entropy loss and gradients for every trainable parameter."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    probs, cache = net.forward(x, keep=True)
    loss = cross_entropy(probs, targets)
    grads, _ = net.backward(cache, logits_grad(probs, targets), skip_softmax=True)
    return loss, grads
