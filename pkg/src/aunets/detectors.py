"""Per-AU binary detectors: training loop, HydraNet heads, independent AUNets."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netcore
from .evalkit import f1_frame
from .netcore import FusionMode, LayerGraph, TwoStreamGraph, adapt_head
from .netcore.graph import Kind
from .temporal import decide

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_epochs: int = 12
    beta1: float = 0.5
    beta2: float = 0.999
    plateau_epochs: int = 3
    plateau_tol: float = 1e-4
    seed: int = 0
    max_epochs: int = 12
    batch_size: int = 16
    weight_decay: float = 0.0
    metric: str = "f1"  # "f1" for binary detectors, "accuracy" for k-way heads

    def lr(self, epoch: int) -> float:
        return self.lr0 * max(0.0, 1.0 - epoch / self.decay_epochs)


def plateau_stop(history, patience: int = 3, tol: float = 1e-4):
    """Return ``(stop, best_epoch)`` for a validation trace.

    Training stops once ``patience`` consecutive epochs fail to beat the best
    value by more than ``tol``.
    """
    best, best_epoch, stale = -np.inf, -1, 0
    for e, v in enumerate(history):
        if v > best + tol:
            best, best_epoch, stale = v, e, 0
        else:
            stale += 1
    return stale >= patience, best_epoch


def _n(inputs):
    return len(inputs[0]) if isinstance(inputs, tuple) else len(inputs)


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(a[idx] for a in inputs)
    return inputs[idx]


def predict_proba(net, inputs, batch_size: int = 64) -> np.ndarray:
    """Softmax outputs for a batch of inputs, evaluated in chunks."""
    n = _n(inputs)
    out = [netcore.forward(net, _take(inputs, slice(i, i + batch_size))) for i in range(0, n, batch_size)]
    return np.concatenate(out, axis=0)


def _score(net, val, metric):
    x, y = val
    probs = predict_proba(net, x)
    if metric == "accuracy":
        return float(np.mean(probs.argmax(axis=1) == y))
    return f1_frame(decide(probs[:, 1]), y)[2]


def _snapshot(net):
    return {k: v.copy() for k, v in net.named_params().items()}


def _restore(net, snap):
    params = net.named_params()
    for k, v in snap.items():
        params[k][...] = v


def train_detector(net, train, val, cfg: TrainConfig = None, log_path=None):
    """Adam training with linear decay, plateau early stop and best-snapshot return.

    ``train`` and ``val`` are ``(inputs, labels)``; inputs is an array or a
    (color, motion) pair of arrays. The net is updated in place and left at
    the weights of its best validation epoch. Returns ``(net, log)``.
    """
    cfg = cfg or TrainConfig()
    x, y = train
    y = np.asarray(y, dtype=np.int64)
    if _n(x) == 0 or len(y) == 0 or _n(val[0]) == 0:
        raise ValueError("training and validation data must be nonempty")
    val = (val[0], np.asarray(val[1], dtype=np.int64))
    rng = np.random.default_rng(cfg.seed)
    state = netcore.adam_init()
    history, logrows = [], []
    best_snap = None
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr(epoch)
        if lr <= 0:
            break
        order = rng.permutation(len(y))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, grads = netcore.backward(net, _take(x, idx), y[idx])
            netcore.adam_step(net, grads, state, lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
            losses.append(loss * len(idx))
        score = _score(net, val, cfg.metric)
        history.append(score)
        stop, best_epoch = plateau_stop(history, cfg.plateau_epochs, cfg.plateau_tol)
        if best_epoch == epoch:
            best_snap = _snapshot(net)
        row = {"epoch": epoch, "loss": float(np.sum(losses) / len(y)), "f1_val": score, "lr": lr}
        logrows.append(row)
        log.debug("epoch %d loss %.4f val %.4f lr %.2e", epoch, row["loss"], score, lr)
        if stop:
            break
    if best_snap is not None:
        _restore(net, best_snap)
    if log_path is not None:
        write_log(log_path, logrows)
    return net, logrows


def write_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "f1_val", "lr"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['loss']:.8f}", f"{r['f1_val']:.8f}", f"{r['lr']:.8g}"])


# -- single detectors --------------------------------------------------------

@dataclass
class Detector:
    """One AU detector: a network plus the fusion mode of its inputs."""

    net: object
    mode: FusionMode = FusionMode.RGB_ONLY
    au: int | None = None

    def __post_init__(self):
        self.mode = FusionMode.parse(self.mode)

    def check(self, bundle):
        expected = self.net.input_shape
        if self.mode.two_stream:
            ok = isinstance(bundle, tuple) and len(bundle) == 2 and all(
                np.shape(b)[-3:] == e for b, e in zip(bundle, expected))
        else:
            ok = not isinstance(bundle, tuple) and np.shape(bundle)[-3:] == expected
        if not ok:
            got = tuple(np.shape(b) for b in bundle) if isinstance(bundle, tuple) else np.shape(bundle)
            raise ValueError(f"bundle {got} does not match {self.mode.value} input {expected}")

    def predict(self, inputs) -> np.ndarray:
        self.check(inputs)
        return predict_proba(self.net, inputs)[:, 1]

    def save(self, path) -> str:
        self.net.meta["au"] = self.au
        return netcore.save(self.net, path)

    @classmethod
    def load(cls, path) -> "Detector":
        net = netcore.load(path)
        return cls(net, net.meta["fusion_mode"], net.meta.get("au"))


def predict_frame(detector: Detector, bundle) -> float:
    """Probability that the AU is present in one frame."""
    detector.check(bundle)
    single = (bundle[0][None], bundle[1][None]) if isinstance(bundle, tuple) else np.asarray(bundle)[None]
    return float(predict_proba(detector.net, single)[0, 1])


# -- HydraNet -----------------------------------------------------------------

class HydraNet:
    """Frozen conv trunk shared by independent per-AU FC heads."""

    def __init__(self, trunk: LayerGraph, head_template: list, profile_name: str = "tiny"):
        self.trunk = trunk.freeze()
        self.head_template = head_template
        self.profile_name = profile_name
        self.heads: dict[int, LayerGraph] = {}

    @classmethod
    def from_net(cls, net: LayerGraph) -> "HydraNet":
        """Split a single-stream net at its first FC; the head template keeps fc shapes."""
        first_fc = next(i for i, l in enumerate(net.layers) if l.kind is Kind.FC)
        trunk = LayerGraph([l for l in net.copy().layers[:first_fc]], net.input_shape,
                           [None if p is None else {k: v.copy() for k, v in p.items()} for p in net.params[:first_fc]],
                           net.dtype)
        template = [(l.kind, l.n_in, l.n_out) for l in net.layers[first_fc:]]
        template[-2] = (Kind.FC, template[-2][1], 2)
        return cls(trunk, template, net.meta.get("profile", "tiny"))

    def _new_head(self, seed) -> LayerGraph:
        from .netcore.graph import LayerSpec
        layers = [LayerSpec(k, a, b) for k, a, b in self.head_template]
        return LayerGraph(layers, self.trunk.output_shape, dtype=self.trunk.dtype).init_params(np.random.default_rng(seed))

    def grow_head(self, au: int, seed: int = 0) -> "HydraNet":
        if au in self.heads:
            raise ValueError(f"AU{au} already has a head")
        self.heads[au] = self._new_head(seed)
        return self

    def remove_head(self, au: int) -> "HydraNet":
        del self.heads[au]
        return self

    def features(self, x) -> np.ndarray:
        return predict_proba(self.trunk, x)

    def predict(self, au: int, x) -> np.ndarray:
        return predict_proba(self.heads[au], self.features(x))[:, 1]

    def detector(self, au: int) -> Detector:
        """Full-network view of one head; trunk layers are frozen and arrays shared."""
        from copy import copy
        layers = [copy(l) for l in self.trunk.layers] + [copy(l) for l in self.heads[au].layers]
        for l in layers[: len(self.trunk.layers)]:
            l.trainable = False
        net = LayerGraph(layers, self.trunk.input_shape, self.trunk.params + self.heads[au].params, self.trunk.dtype)
        net.meta = {"profile": self.profile_name, "fusion_mode": FusionMode.RGB_ONLY.value, "seed": None}
        return Detector(net, FusionMode.RGB_ONLY, au)

    def train_head(self, au: int, train, val, cfg: TrainConfig = None, log_path=None):
        """Train one head on precomputed trunk features; the trunk is never touched."""
        ft = self.features(train[0])
        fv = self.features(val[0])
        return train_detector(self.heads[au], (ft, train[1]), (fv, val[1]), cfg, log_path)


# -- AUNets ---------------------------------------------------------------------

@dataclass
class AUNetEnsemble:
    detectors: dict = field(default_factory=dict)

    def add(self, au: int, detector: Detector):
        if any(detector.net is d.net for d in self.detectors.values()):
            raise ValueError("AUNets entries may not share a network")
        detector.au = au
        self.detectors[au] = detector

    def predict(self, x) -> dict:
        return {au: d.predict(x) for au, d in sorted(self.detectors.items())}


def head_for_detection(pretrained: LayerGraph, mode, seed: int) -> Detector:
    """A 2-way detector for ``mode`` from a k-way pretrained color network."""
    net = adapt_head(pretrained, 2, seed)
    return Detector(netcore.from_rgb(net, mode), mode)


__all__ = [
    "AUNetEnsemble", "Detector", "HydraNet", "TrainConfig", "adapt_head", "head_for_detection",
    "plateau_stop", "predict_frame", "predict_proba", "train_detector", "write_log",
]
