"""Frame-level metrics, per-AU report tables, and occlusion saliency."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PREDICTION_COLUMNS = (
    "video_id", "frame", "predicted_view", "au",
    "prob_raw", "prob_smoothed", "decision_raw", "decision_smoothed",
)


def _binary_pair(decisions, labels):
    d = np.asarray(decisions)
    y = np.asarray(labels)
    if d.shape != y.shape:
        raise ValueError(f"length mismatch: {d.shape} vs {y.shape}")
    if d.size == 0:
        raise ValueError("empty tracks")
    if not (np.isin(d, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("decisions and labels must be binary")
    return d.astype(bool), y.astype(bool)


def f1_frame(decisions, labels):
    """(precision, recall, f1) over frames; every 0/0 is taken as 0."""
    d, y = _binary_pair(decisions, labels)
    tp = int(np.sum(d & y))
    fp = int(np.sum(d & ~y))
    fn = int(np.sum(~d & y))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def accuracy(decisions, labels) -> float:
    d, y = _binary_pair(decisions, labels)
    return float(np.mean(d == y))


@dataclass
class MetricRow:
    au: str
    precision: float
    recall: float
    f1: float
    accuracy: float
    n: int = 0


@dataclass
class MetricReport:
    rows: list
    group: dict = field(default_factory=dict)
    decision_column: str = "decision_smoothed"

    @property
    def average(self) -> MetricRow:
        m = lambda attr: float(np.mean([getattr(r, attr) for r in self.rows])) if self.rows else 0.0
        return MetricRow("Av.", m("precision"), m("recall"), m("f1"), m("accuracy"), sum(r.n for r in self.rows))

    @property
    def mean_f1(self) -> float:
        return self.average.f1

    def render_text(self) -> str:
        title = ", ".join(f"{k}={v}" for k, v in self.group.items())
        lines = [title] if title else []
        lines.append(f"{'AU':>5} | {'P':>6} {'R':>6} {'F1':>6} {'ACC':>6} | {'frames':>6}")
        lines.append("-" * len(lines[-1]))
        for r in self.rows + [self.average]:
            lines.append(f"{r.au:>5} | {100 * r.precision:6.1f} {100 * r.recall:6.1f} {100 * r.f1:6.1f} {100 * r.accuracy:6.1f} | {r.n:6d}")
        return "\n".join(lines) + "\n"

    def render_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = list(self.group)
        w.writerow(keys + ["au", "precision", "recall", "f1", "accuracy", "n"])
        for r in self.rows + [self.average]:
            w.writerow([self.group[k] for k in keys] + [r.au, f"{r.precision:.6f}", f"{r.recall:.6f}",
                                                        f"{r.f1:.6f}", f"{r.accuracy:.6f}", r.n])
        return buf.getvalue()


def read_predictions(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PREDICTION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing prediction columns {missing}")
        return list(reader)


def write_predictions(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        w.writerows(rows)


def report(predictions, labels, group_by=(), decision_column="decision_smoothed", au_set=None):
    """Per-AU metrics from prediction rows against ``labels``.

    ``predictions`` is a CSV path or list of row dicts in the prediction
    schema; ``labels`` maps (video_id, frame) to {au: 0/1}. ``group_by`` names
    row columns (e.g. ``predicted_view``) to split the report on. Returns a
    list of MetricReports, one per group, in sorted group order.
    """
    rows = read_predictions(predictions) if isinstance(predictions, (str, Path)) else list(predictions)
    groups: dict = {}
    for row in rows:
        key = tuple(row[g] for g in group_by)
        groups.setdefault(key, []).append(row)
    reports = []
    for key in sorted(groups):
        per_au: dict = {}
        for row in groups[key]:
            au = int(row["au"])
            lab = labels[(row["video_id"], int(row["frame"]))]
            if au not in lab or (au_set is not None and au not in au_set):
                raise ValueError(f"unknown AU column AU{au}")
            d, y = per_au.setdefault(au, ([], []))
            d.append(int(row[decision_column]))
            y.append(lab[au])
        metric_rows = []
        for au in sorted(per_au):
            d, y = per_au[au]
            p, r, f = f1_frame(d, y)
            metric_rows.append(MetricRow(str(au), p, r, f, accuracy(d, y), len(d)))
        reports.append(MetricReport(metric_rows, dict(zip(group_by, key)), decision_column))
    return reports


def occlusion_saliency(predict, bundle, patch_side: int, stride: int | None = None, fill=None,
                       occlude_flow: bool = False):
    """Drop in presence probability as a square patch slides over the face.

    ``predict`` maps a batch of bundles to probabilities. The patch covers
    the RGB part (or the single input) and is filled with ``fill`` (the
    dataset mean color; defaults to the image mean). With ``occlude_flow``
    the flow part is set to zero motion under the patch as well.
    Returns an array over the sliding grid: p_base - p_occluded.
    """
    from .motion import ZERO_MOTION

    pair = isinstance(bundle, tuple)
    rgb = np.asarray(bundle[0] if pair else bundle, dtype=np.float64)
    h = rgb.shape[0]
    w = rgb.shape[1]
    horizontal = not pair and w == 2 * h and rgb.shape[2] == 3
    side_w = h if horizontal else w
    if patch_side > h or patch_side > side_w or patch_side < 1:
        raise ValueError(f"patch {patch_side} larger than input {h}x{side_w}")
    stride = stride or max(1, patch_side // 2)
    if fill is None:
        fill = rgb[:, :side_w, :3].reshape(-1, 3).mean(axis=0)
    fill = np.asarray(fill, dtype=np.float64)
    ys = list(range(0, h - patch_side + 1, stride))
    xs = list(range(0, side_w - patch_side + 1, stride))
    base = float(predict(_batch([bundle]))[0])
    occluded = []
    for y in ys:
        for x in xs:
            if pair:
                a = rgb.copy()
                a[y:y + patch_side, x:x + patch_side] = fill
                m = np.array(bundle[1], dtype=np.float64)
                if occlude_flow:
                    m[y:y + patch_side, x:x + patch_side] = ZERO_MOTION
                occluded.append((a, m))
            else:
                a = rgb.copy()
                a[y:y + patch_side, x:x + patch_side, :3] = fill
                if occlude_flow:
                    if horizontal:
                        a[y:y + patch_side, side_w + x:side_w + x + patch_side] = ZERO_MOTION
                    elif a.shape[2] == 6:
                        a[y:y + patch_side, x:x + patch_side, 3:] = ZERO_MOTION
                occluded.append(a)
    probs = []
    for i in range(0, len(occluded), 64):
        probs.extend(np.asarray(predict(_batch(occluded[i:i + 64]))).tolist())
    return base - np.array(probs).reshape(len(ys), len(xs))


def _batch(bundles):
    if isinstance(bundles[0], tuple):
        return tuple(np.stack(p) for p in zip(*bundles))
    return np.stack(bundles)
