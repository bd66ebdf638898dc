"""View classification, routing to per-view detector ensembles, and the cascade."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from . import netcore
from .datakit import FRONTAL, VIEWS
from .detectors import Detector, predict_proba
from .imaging import resize_bilinear, to_gray
from .motion import build_bundle, embed_flow, first_frame_policy, rgb_crop, stack_bundles
from .netcore import FusionMode
from .temporal import DEFAULT_WINDOW, DetectionSequence, smooth_sequence

Viewpoint = Enum("Viewpoint", {v: v for v in VIEWS}, type=str)


class MissingModelError(LookupError):
    """A required trained model (encoder, view classifier, detector) is absent."""


class MissingCheckpointError(MissingModelError):
    def __init__(self, view, au, detail=""):
        self.view, self.au = str(view), au
        super().__init__(f"missing checkpoint for view {self.view} / AU{au}{': ' + detail if detail else ''}")


def _view_name(view) -> str:
    v = view.value if isinstance(view, Enum) else str(view)
    if v not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    return v


# -- view classification -----------------------------------------------------

def view_input(frame, side: int) -> np.ndarray:
    """Whole frame, resized square, as standardized grayscale in three channels.

    Dropping color and contrast leaves head geometry as the only view cue.
    """
    g = to_gray(resize_bilinear(np.asarray(frame, dtype=np.float64), side))
    g = (g - g.mean()) / (g.std() + 1e-6)
    return np.repeat(g[..., None], 3, axis=-1)


def aggregate_views(dists, how: str = "mean") -> int:
    """Video-level view index from per-frame distributions; ties go to the lowest index."""
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim != 2 or len(d) == 0:
        raise ValueError("need at least one per-frame distribution")
    if how == "mean":
        scores = d.mean(axis=0)
    elif how == "vote":
        scores = np.bincount(d.argmax(axis=1), minlength=d.shape[1]).astype(float)
    else:
        raise ValueError(f"unknown aggregation {how!r}")
    return int(np.flatnonzero(scores == scores.max())[0])


def classify_view_video(classifier, frames, stride: int = 10, how: str = "mean", side: int | None = None):
    """Predicted view for a video plus the per-frame distributions used.

    Every ``stride``-th frame (starting at 0) is classified; distributions are
    averaged, then the arg-max view wins.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("video has no frames")
    picked = frames[::max(1, stride)]
    if callable(classifier) and not hasattr(classifier, "forward"):
        dists = np.asarray([classifier(f) for f in picked], dtype=np.float64)
    else:
        side = side or classifier.input_shape[0]
        x = np.stack([view_input(f, side) for f in picked])
        dists = predict_proba(classifier, x)
    return Viewpoint(VIEWS[aggregate_views(dists, how)]), dists


# -- ensemble index -------------------------------------------------------------

@dataclass
class EnsembleIndex:
    """(view, AU) -> checkpoint path, with content hashes."""

    entries: dict = field(default_factory=dict)  # (view, au) -> (path, sha256)

    def add(self, view, au: int, path, digest: str | None = None):
        self.entries[(_view_name(view), int(au))] = (str(path), digest or netcore.file_hash(path))

    def missing(self, views, aus):
        return [(v, a) for v in views for a in aus if (v, a) not in self.entries]

    def check_complete(self, views, aus):
        holes = self.missing(views, aus)
        if holes:
            raise MissingCheckpointError(*holes[0], detail=f"{len(holes)} entries missing")

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["view", "au", "checkpoint", "sha256"])
            for (v, a), (p, h) in sorted(self.entries.items(), key=lambda kv: (VIEWS.index(kv[0][0]), kv[0][1])):
                w.writerow([v, a, p, h])

    @classmethod
    def read(cls, path) -> "EnsembleIndex":
        idx = cls()
        base = Path(path).parent
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                p = Path(row["checkpoint"])
                idx.entries[(row["view"], int(row["au"]))] = (str(p if p.is_absolute() else base / p), row["sha256"])
        return idx


def route(index: EnsembleIndex, view, aus) -> dict:
    """Load the detectors trained for ``view``, verifying each checkpoint hash."""
    v = _view_name(view)
    out = {}
    for au in aus:
        entry = index.entries.get((v, int(au)))
        if entry is None:
            raise MissingCheckpointError(v, au)
        path, digest = entry
        if not Path(path).exists():
            raise MissingCheckpointError(v, au, f"{path} not found")
        if digest and netcore.file_hash(path) != digest:
            raise MissingCheckpointError(v, au, f"{path} hash mismatch")
        out[int(au)] = Detector.load(path)
    return out


# -- cascade ----------------------------------------------------------------------

@dataclass
class CascadeResult:
    view: object
    view_distributions: np.ndarray
    sequences: dict  # au -> DetectionSequence


@dataclass
class Pipeline:
    view_classifier: object
    detectors_for_view: Callable  # view -> {au: Detector}
    aus: tuple
    mode: FusionMode = FusionMode.HORIZONTAL
    side: int = 64
    window: int = DEFAULT_WINDOW
    view_stride: int = 10
    view_aggregation: str = "mean"
    smooth_on: str = "probs"
    flow_estimator: Callable | None = None

    @classmethod
    def from_index(cls, view_classifier, index: EnsembleIndex, aus, **kw) -> "Pipeline":
        return cls(view_classifier, lambda v: route(index, v, aus), tuple(aus), **kw)


def frame_bundles(frames, boxes, mode, side, flows=None, estimator=None):
    mode = FusionMode.parse(mode)
    if mode.uses_flow and flows is None:
        flows = first_frame_policy(frames, estimator)
    out = []
    for t, (frame, box) in enumerate(zip(frames, boxes)):
        rgb = rgb_crop(frame, box, side) if mode.uses_rgb else None
        fl = embed_flow(flows[t], box, side) if mode.uses_flow else None
        out.append(build_bundle(rgb, fl, mode))
    return out


def detect_sequence(pipeline: Pipeline, frames, face_boxes, flows=None) -> CascadeResult:
    """Flow -> view -> per-AU frame inference -> median smoothing for one video."""
    frames = list(frames)
    if len(face_boxes) != len(frames):
        raise ValueError("one face box per frame is required")
    mode = FusionMode.parse(pipeline.mode)
    if mode.uses_flow and flows is None:
        flows = first_frame_policy(frames, pipeline.flow_estimator)
    view, dists = classify_view_video(pipeline.view_classifier, frames, pipeline.view_stride, pipeline.view_aggregation)
    detectors = pipeline.detectors_for_view(view)
    x = stack_bundles(frame_bundles(frames, face_boxes, mode, pipeline.side, flows))
    seqs = {}
    for au in pipeline.aus:
        probs = detectors[au].predict(x)
        seqs[au] = smooth_sequence(DetectionSequence(au, probs, pipeline.window), pipeline.window, pipeline.smooth_on)
    return CascadeResult(view, dists, seqs)


def prediction_rows(video_id, result: CascadeResult):
    rows = []
    view = result.view.value if isinstance(result.view, Enum) else str(result.view)
    for au, s in sorted(result.sequences.items()):
        for f in range(len(s.probs_raw)):
            rows.append([video_id, f, view, au, f"{s.probs_raw[f]:.6f}", f"{s.probs_smoothed[f]:.6f}",
                         int(s.decisions_raw[f]), int(s.decisions_smoothed[f])])
    return rows


# -- training order ---------------------------------------------------------------

@dataclass
class Stage:
    kind: str  # "pretrain", "frontal", "view"
    view: str | None = None
    init_from: str | None = None


def adapt_training_order(views=VIEWS, frontal: str = FRONTAL, include_pretrain: bool = True) -> list:
    """Pretrain, then the frontal detectors, then every other view initialized from frontal."""
    views = [_view_name(v) for v in views]
    if frontal not in views:
        raise ValueError(f"frontal view {frontal} must be part of the plan")
    order = [Stage("pretrain")] if include_pretrain else []
    order.append(Stage("frontal", frontal, "pretrain" if include_pretrain else None))
    order += [Stage("view", v, frontal) for v in views if v != frontal]
    return order
