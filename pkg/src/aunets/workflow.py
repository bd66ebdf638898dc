"""End-to-end training and inference over a dataset directory.

Shared by the CLI and the acceptance suite: sample preparation (crops, flow
images, jittering), synthetic pretraining, view classifier training,
per-(view, AU) detector training in the frontal-first order, and cascade
prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import netcore
from .datakit import (
    FRONTAL, VIEWS, FrameRecord, SplitPlan, face_box, group_videos, jitter_balance, load_dataset,
    make_splits, read_manifest, render_face, subject_params,
)
from .detectors import Detector, TrainConfig, head_for_detection, train_detector
from .evalkit import report, write_predictions
from .motion import FlowField, build_bundle, embed_flow, first_frame_policy, rgb_crop, stack_bundles
from .multiview import (
    EnsembleIndex, MissingCheckpointError, MissingModelError, Pipeline, adapt_training_order, detect_sequence,
    prediction_rows, route, view_input,
)
from .netcore import FusionMode, get_profile, make_net

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Every knob of a run; all fields have defaults and flags override file values."""

    profile: str = "tiny"
    fusion: str = "horizontal"
    median_window: int = 7
    seed: int = 0
    fold: int = 0
    # AU detectors
    lr0: float = 1e-3
    decay_epochs: int = 12
    max_epochs: int = 12
    beta1: float = 0.5
    beta2: float = 0.999
    plateau_epochs: int = 3
    batch_size: int = 16
    weight_decay: float = 0.0
    jitter_max_factor: int = 9
    # pretraining on synthetic expression classes
    pretrain_classes: int = 22
    pretrain_per_class: int = 40
    pretrain_lr0: float = 1e-3
    pretrain_epochs: int = 12
    # view classifier
    view_lr0: float = 1e-3
    view_epochs: int = 12
    view_plateau_epochs: int = 4
    view_stride: int = 10
    view_aggregation: str = "mean"
    smooth_on: str = "probs"

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        return TrainConfig(self.lr0, self.decay_epochs, self.beta1, self.beta2, self.plateau_epochs, 1e-4,
                           self.seed + seed_offset, self.max_epochs, self.batch_size, self.weight_decay)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {k!r}")
            values[k] = v
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls().override(**values)

    def override(self, **values) -> "RunConfig":
        out = {}
        for f in fields(self):
            if f.name in values and values[f.name] is not None:
                default = getattr(self, f.name)
                out[f.name] = type(default)(values[f.name])
        return replace(self, **out)


# -- frames, flows, samples ------------------------------------------------------

class VideoStore:
    """Lazily loads frames and computes flow fields per video."""

    def __init__(self, records, estimator=None):
        self.videos = group_videos(records)
        self.estimator = estimator
        self._frames: dict = {}
        self._flows: dict = {}

    def frames(self, vid):
        if vid not in self._frames:
            self._frames[vid] = [r.load_image() for r in self.videos[vid]]
        return self._frames[vid]

    def flows(self, vid):
        if vid not in self._flows:
            self._flows[vid] = first_frame_policy(self.frames(vid), self.estimator)
        return self._flows[vid]

    def release(self, vids=None):
        for vid in list(self._frames if vids is None else vids):
            self._frames.pop(vid, None)
            self._flows.pop(vid, None)


def record_bundle(store: VideoStore, rec: FrameRecord, mode, side):
    mode = FusionMode.parse(mode)
    rgb = rgb_crop(store.frames(rec.video_id)[rec.frame_index], rec.face_box, side) if mode.uses_rgb else None
    fl = embed_flow(store.flows(rec.video_id)[rec.frame_index], rec.face_box, side) if mode.uses_flow else None
    return build_bundle(rgb, fl, mode)


def au_samples(store, records, au, mode, side, jitter_max_factor=None):
    """Stacked bundles and labels for one AU; optional jitter balancing."""
    records = list(records)
    if jitter_max_factor:
        records = jitter_balance(records, au, jitter_max_factor)
    x = stack_bundles([record_bundle(store, r, mode, side) for r in records])
    if isinstance(x, tuple):
        x = tuple(a.astype(np.float32) for a in x)
    else:
        x = x.astype(np.float32)
    return x, np.array([r.labels[au] for r in records], dtype=np.int64)


# -- pretraining ------------------------------------------------------------------

def expression_prototypes(n_classes: int, aus, seed: int) -> np.ndarray:
    """Distinct AU amplitude patterns standing in for expression classes."""
    rng = np.random.default_rng([seed, 22])
    protos = []
    while len(protos) < n_classes:
        p = rng.choice([0.0, 0.5, 1.0], size=len(aus))
        if not any(np.array_equal(p, q) for q in protos):
            protos.append(p)
    return np.array(protos)


def pretrain_samples(n_classes: int, per_class: int, aus, seed: int, side: int, image_side: int = 96,
                     draw: int = 0):
    """Rendered faces of unseen subjects in random views, labelled by expression class.

    ``seed`` fixes the class prototypes; ``draw`` picks an independent sample.
    """
    protos = expression_prototypes(n_classes, aus, seed)
    rng = np.random.default_rng([seed, 23, draw])
    xs, ys = [], []
    for c, proto in enumerate(protos):
        for i in range(per_class):
            subj = 10_000 + int(rng.integers(1_000_000)) + 1_000_000 * draw
            view = VIEWS[int(rng.integers(len(VIEWS)))]
            p = subject_params(subj, seed, image_side)
            amps = {au: float(np.clip(a + rng.normal(0, 0.05), 0, 1)) for au, a in zip(aus, proto)}
            img = render_face(p, amps, view, image_side)
            xs.append(rgb_crop(img, face_box(p, view, image_side), side).astype(np.float32))
            ys.append(c)
    return np.stack(xs), np.array(ys)


def pretrain(rc: RunConfig, aus, image_side: int = 96):
    """Train a k-way expression classifier from scratch (the encoder every detector starts from)."""
    profile = get_profile(rc.profile, rc.pretrain_classes)
    net = make_net(profile, FusionMode.RGB_ONLY, rc.seed, init_std="he")
    x, y = pretrain_samples(rc.pretrain_classes, rc.pretrain_per_class, aus, rc.seed, profile.input_side, image_side)
    xv, yv = pretrain_samples(rc.pretrain_classes, max(4, rc.pretrain_per_class // 4), aus, rc.seed,
                              profile.input_side, image_side, draw=1)
    cfg = replace(rc.train_config(101), lr0=rc.pretrain_lr0, max_epochs=rc.pretrain_epochs,
                  decay_epochs=rc.pretrain_epochs, metric="accuracy")
    net, logrows = train_detector(net, (x, y), (xv, yv), cfg)
    return net, logrows


# -- view classifier ---------------------------------------------------------------

def augment_frame(frame, rng, max_shift=8):
    """Random translation plus per-channel gain and a global offset."""
    dx, dy = rng.integers(-max_shift, max_shift + 1, 2)
    g = np.roll(frame, (int(dy), int(dx)), axis=(0, 1))
    return np.clip(g * rng.uniform(0.75, 1.25, 3) + rng.uniform(-0.1, 0.1), 0, 1)


def view_samples(store, records, side, stride=1, copies=0, seed=0):
    """View-classifier inputs every ``stride`` frames, plus ``copies`` augmented versions of each."""
    rng = np.random.default_rng([seed, 31])
    xs, ys = [], []
    for r in records:
        if r.frame_index % stride:
            continue
        frame = store.frames(r.video_id)[r.frame_index]
        variants = [frame] + [augment_frame(frame, rng) for _ in range(copies)]
        xs.extend(view_input(f, side) for f in variants)
        ys.extend([VIEWS.index(r.view)] * len(variants))
    return np.stack(xs).astype(np.float32), np.array(ys)


def train_view_classifier(store, train_records, val_records, rc: RunConfig):
    """Nine-way view classifier on whole frames, trained from scratch."""
    profile = get_profile(rc.profile, len(VIEWS))
    side = profile.input_side
    net = make_net(profile, FusionMode.RGB_ONLY, rc.seed + 7, init_std="he")
    x, y = view_samples(store, train_records, side, stride=4, copies=3, seed=rc.seed)
    xv, yv = view_samples(store, val_records, side, stride=4)
    cfg = replace(rc.train_config(202), lr0=rc.view_lr0, max_epochs=rc.view_epochs,
                  decay_epochs=rc.view_epochs, metric="accuracy", plateau_epochs=rc.view_plateau_epochs)
    net.meta["role"] = "view_classifier"
    return train_detector(net, (x, y), (xv, yv), cfg)


# -- cascade training ----------------------------------------------------------------

def checkpoint_path(models_dir, dataset, view, au, mode) -> Path:
    return Path(models_dir) / dataset / view / f"AU{au}_{FusionMode.parse(mode).value}.ckpt"


@dataclass
class Experiment:
    root: Path
    out: Path
    rc: RunConfig
    records: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    split: SplitPlan | None = None

    @classmethod
    def open(cls, root, out, rc: RunConfig) -> "Experiment":
        root = Path(root)
        records = list(load_dataset(root))
        if not records:
            raise ValueError(f"no frames found under {root}")
        manifest = read_manifest(root)
        split = make_splits({r.subject_id for r in records}, rc.seed)
        return cls(root, Path(out), rc, records, manifest, split)

    @property
    def aus(self):
        return tuple(self.manifest.get("au_set") or sorted(self.records[0].labels))

    @property
    def views(self):
        return tuple(self.manifest.get("views") or sorted({r.view for r in self.records}))

    @property
    def dataset(self):
        return self.root.name

    @property
    def side(self):
        return get_profile(self.rc.profile).input_side

    def subset(self, subjects, view=None):
        s = set(subjects)
        return [r for r in self.records if r.subject_id in s and (view is None or r.view == view)]

    @property
    def train_subjects(self):
        return self.split.train_subjects(self.rc.fold)

    @property
    def val_subjects(self):
        return [self.split.validation_subject(self.rc.fold)]

    @property
    def test_subjects(self):
        return self.split.test_subjects(self.rc.fold)

    @property
    def models_dir(self):
        return self.out / "models"

    def pretrained_path(self):
        return self.models_dir / self.dataset / "pretrain.ckpt"

    def view_classifier_path(self):
        return self.models_dir / self.dataset / "view_classifier.ckpt"

    def index_path(self):
        return self.models_dir / self.dataset / "ensemble_index.csv"

    # -- stages --

    def run_pretrain(self):
        net, logrows = pretrain(self.rc, self.aus, self.manifest.get("image_side", 96))
        netcore.save(net, self.pretrained_path())
        return net, logrows

    def load_pretrained(self):
        path = self.pretrained_path()
        if not path.exists():
            raise MissingModelError(f"pretrained encoder {path} not found; run pretrain first")
        return netcore.load(path)

    def run_view_classifier(self):
        recs = self.subset(self.train_subjects)
        val = self.subset(self.val_subjects)
        store = VideoStore(recs + val)
        net, logrows = train_view_classifier(store, recs, val, self.rc)
        netcore.save(net, self.view_classifier_path())
        return net, logrows

    def train_au(self, view, au, init: Detector | None = None):
        """Train the (view, AU) detector and write exactly its checkpoint and log."""
        mode = FusionMode.parse(self.rc.fusion)
        if init is None:
            if view == FRONTAL:
                init = head_for_detection(self.load_pretrained(), mode, self.rc.seed + au)
            else:
                path = checkpoint_path(self.models_dir, self.dataset, FRONTAL, au, mode)
                if not path.exists():
                    raise MissingCheckpointError(FRONTAL, au, f"{path} needed to initialize {view}")
                init = Detector.load(path)
        train = self.subset(self.train_subjects, view)
        val = self.subset(self.val_subjects, view)
        store = VideoStore(train + val)
        xt = au_samples(store, train, au, mode, self.side, self.rc.jitter_max_factor)
        xv = au_samples(store, val, au, mode, self.side)
        store.release()
        cfg = self.rc.train_config(1000 * VIEWS.index(view) + au)
        path = checkpoint_path(self.models_dir, self.dataset, view, au, mode)
        net, logrows = train_detector(init.net, xt, xv, cfg, log_path=path.with_suffix(".log.csv"))
        det = Detector(net, mode, au)
        det.net.meta["view"] = view
        digest = det.save(path)
        return det, logrows, path, digest

    def train_all(self, views=None):
        """Frontal first, then every other view from the frontal weights."""
        index = EnsembleIndex()
        views = views or self.views
        for stage in adapt_training_order(views, FRONTAL, include_pretrain=False):
            for au in self.aus:
                det, logrows, path, digest = self.train_au(stage.view, au)
                index.add(stage.view, au, path, digest)
                log.info("%s AU%d best val F1 %.3f", stage.view, au, max(r["f1_val"] for r in logrows))
        index.write(self.index_path())
        return index

    def build_index(self) -> EnsembleIndex:
        index = EnsembleIndex()
        mode = FusionMode.parse(self.rc.fusion)
        for view in self.views:
            for au in self.aus:
                path = checkpoint_path(self.models_dir, self.dataset, view, au, mode)
                if path.exists():
                    index.add(view, au, path)
        return index

    def pipeline(self, index=None) -> Pipeline:
        index = index or self.build_index()
        index.check_complete(self.views, self.aus)
        cache: dict = {}

        def detectors_for(view):
            v = view.value if hasattr(view, "value") else str(view)
            if v not in cache:
                cache[v] = route(index, v, self.aus)
            return cache[v]

        if not self.view_classifier_path().exists():
            raise MissingModelError(f"view classifier {self.view_classifier_path()} not found; run train-view first")
        return Pipeline(netcore.load(self.view_classifier_path()), detectors_for, self.aus,
                        FusionMode.parse(self.rc.fusion), self.side, self.rc.median_window, self.rc.view_stride,
                        self.rc.view_aggregation, self.rc.smooth_on)

    def predict(self, subjects=None, index=None):
        """Run the cascade over every video of ``subjects`` (default: the test fold)."""
        pipe = self.pipeline(index)
        recs = self.subset(subjects or self.test_subjects)
        store = VideoStore(recs)
        rows, views = [], {}
        for vid, vrecs in store.videos.items():
            res = detect_sequence(pipe, store.frames(vid), [r.face_box for r in vrecs], store.flows(vid))
            views[vid] = (vrecs[0].view, res.view.value)
            rows.extend(prediction_rows(vid, res))
            store.release([vid])
        return rows, views


def label_map(records):
    return {(r.video_id, r.frame_index): r.labels for r in records}


def evaluate_rows(rows, records, decision_column="decision_smoothed"):
    cols = ("video_id", "frame", "predicted_view", "au", "prob_raw", "prob_smoothed", "decision_raw", "decision_smoothed")
    dict_rows = [dict(zip(cols, map(str, r))) for r in rows]
    return report(dict_rows, label_map(records), decision_column=decision_column)[0]
