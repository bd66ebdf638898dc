"""Dataset layout, subject splits, jitter balancing and a synthetic face-video generator.

The generator draws parametric cartoon faces (head ellipse, brows, eyes,
two-lip mouth) whose geometry is driven by four action units:

* AU1  inner brow raise  -> inner brow endpoints move up
* AU2  outer brow raise  -> outer brow endpoints move up
* AU12 lip corner pull   -> mouth corners lift and widen
* AU24 lip press         -> the gap between the lips closes

Each of the nine views is a fixed affine map (yaw shear, pitch scale) of the
frontal face, applied about the face center.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

GENERATOR_VERSION = "cartoon-2"
SYNTH_AUS = (1, 2, 12, 24)
BP4D_AUS = (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24)
FERA_AUS = (1, 4, 6, 7, 10, 12, 14, 15, 17, 23)
VIEWS = tuple(f"V{i}" for i in range(1, 10))
FRONTAL = "V1"
# (yaw, pitch) per view; V1 is frontal.
VIEW_POSE = {
    "V1": (0, 0), "V2": (-1, 0), "V3": (1, 0), "V4": (0, -1), "V5": (0, 1),
    "V6": (-1, -1), "V7": (1, -1), "V8": (-1, 1), "V9": (1, 1),
}
JITTER_ORDER = ("R", "L", "U", "D", "UR", "UL", "DR", "DL")
_JITTER_DIR = {
    "R": (1, 0), "L": (-1, 0), "U": (0, -1), "D": (0, 1),
    "UR": (1, -1), "UL": (-1, -1), "DR": (1, 1), "DL": (-1, 1),
}


@dataclass
class FrameRecord:
    video_id: str
    frame_index: int
    image: object  # path or array
    face_box: tuple
    labels: dict
    view: str = "UNKNOWN"
    subject_id: str = ""
    image_size: tuple = (0, 0)  # (height, width)
    jitter: str = ""

    def load_image(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        return read_frame(self.image)


@dataclass
class SplitPlan:
    folds: list  # three sorted subject lists
    seed: int = 0

    def test_subjects(self, k):
        return list(self.folds[k])

    def validation_subject(self, k):
        return min(self.pool(k))

    def pool(self, k):
        return sorted(s for j, f in enumerate(self.folds) if j != k for s in f)

    def train_subjects(self, k):
        val = self.validation_subject(k)
        return [s for s in self.pool(k) if s != val]


def make_splits(subjects, seed: int = 0) -> SplitPlan:
    """Round-robin sorted subjects into three folds.

    The seed is recorded but does not change membership: fold assignment is
    a function of the sorted subject set only.
    """
    subjects = sorted(set(subjects))
    if len(subjects) < 3:
        raise ValueError(f"need at least 3 subjects for 3 folds, got {len(subjects)}")
    folds = [subjects[i::3] for i in range(3)]
    return SplitPlan(folds, seed)


def _shift_box(box, direction, magnitude, image_size):
    x, y, w, h = box
    ux, uy = _JITTER_DIR[direction]
    sx = int(round(0.05 * w * magnitude)) * ux
    sy = int(round(0.05 * h * magnitude)) * uy
    H, W = image_size
    nx = min(max(x + sx, 0), W - w)
    ny = min(max(y + sy, 0), H - h)
    return (nx, ny, w, h)


def jitter_balance(records, au: int, max_factor: int = 9):
    """Replicate positives with shifted boxes until positives reach 0.9 x negatives.

    Jitters are added in rounds (first R for every positive, then L, ...);
    a round that would push positives past 1.2 x negatives is cut short at
    the 0.9 target. Each positive is used at most ``max_factor`` times in
    total. Directions beyond the first eight repeat at larger shifts.
    """
    records = list(records)
    pos = [r for r in records if r.labels[au] == 1]
    neg = [r for r in records if r.labels[au] == 0]
    if not pos or not neg:
        return records
    target = math.ceil(0.9 * len(neg))
    if len(pos) >= target:
        return records
    out = list(records)
    count = len(pos)
    for rnd in range(1, max_factor):
        direction = JITTER_ORDER[(rnd - 1) % 8]
        magnitude = 1 + (rnd - 1) // 8
        cut = count + len(pos) > 1.2 * len(neg)
        for r in pos:
            if cut and count >= target:
                break
            box = _shift_box(r.face_box, direction, magnitude, r.image_size)
            out.append(replace(r, face_box=box, jitter=f"{direction}{magnitude if magnitude > 1 else ''}"))
            count += 1
        if count >= target:
            break
    return out


# -- synthetic faces -------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_subjects: int = 6
    n_views: int = 9
    frames_per_video: int = 48
    au_set: tuple = SYNTH_AUS
    events_per_au: tuple = (1, 2)
    seed: int = 0
    image_side: int = 96
    texture: float = 0.0


@dataclass
class FaceParams:
    rx: float = 26.0
    ry: float = 33.0
    cx: float = 48.0
    cy: float = 50.0
    skin: tuple = (0.85, 0.70, 0.55)
    bg: tuple = (0.22, 0.26, 0.32)
    eye_x: float = 10.0
    eye_y: float = -8.0
    brow_y: float = -15.0
    brow_in: float = 4.0
    brow_out: float = 16.0
    brow_w: float = 1.8
    mouth_y: float = 14.0
    mouth_w: float = 9.0
    lip_gap: float = 2.0
    lip_w: float = 2.2
    texture_seed: int = 0


def subject_params(index: int, seed: int, side: int = 96) -> FaceParams:
    rng = np.random.default_rng([seed, index, 17])
    sc = rng.uniform(0.92, 1.08)
    c = side / 96.0
    return FaceParams(
        rx=26.0 * sc * c, ry=33.0 * sc * c,
        cx=side / 2 + rng.uniform(-2, 2) * c, cy=side * 50 / 96 + rng.uniform(-2, 2) * c,
        skin=tuple(np.clip(np.array([0.85, 0.70, 0.55]) + rng.uniform(-0.08, 0.08, 3), 0, 1)),
        bg=tuple(np.clip(np.array([0.22, 0.26, 0.32]) + rng.uniform(-0.05, 0.05, 3), 0, 1)),
        eye_x=10.0 * sc * c + rng.uniform(-0.8, 0.8), eye_y=-8.0 * sc * c,
        brow_y=-15.0 * sc * c + rng.uniform(-0.8, 0.8),
        brow_in=4.0 * sc * c, brow_out=16.0 * sc * c, brow_w=rng.uniform(1.5, 2.1) * c,
        mouth_y=14.0 * sc * c + rng.uniform(-0.8, 0.8), mouth_w=9.0 * sc * c + rng.uniform(-0.8, 0.8),
        lip_gap=2.0 * c, lip_w=rng.uniform(1.9, 2.5) * c,
        texture_seed=int(rng.integers(2 ** 31)),
    )


def view_matrix(view: str) -> np.ndarray:
    yaw, pitch = VIEW_POSE[view]
    return np.array([[1.0 - 0.12 * abs(yaw), 0.4 * yaw], [0.0, 1.0 + 0.2 * pitch]])


def face_box(p: FaceParams, view: str, side: int) -> tuple:
    """Integer bounding box of the transformed head ellipse, clipped to the frame."""
    A = view_matrix(view)
    ex = math.hypot(A[0, 0] * p.rx, A[0, 1] * p.ry)
    ey = math.hypot(A[1, 0] * p.rx, A[1, 1] * p.ry)
    x0 = max(0, int(math.floor(p.cx - ex)))
    y0 = max(0, int(math.floor(p.cy - ey)))
    x1 = min(side, int(math.ceil(p.cx + ex)))
    y1 = min(side, int(math.ceil(p.cy + ey)))
    return (x0, y0, x1 - x0, y1 - y0)


def _cover(d):
    return np.clip(0.5 - d, 0.0, 1.0)


def _seg_dist(x, y, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    t = np.clip(((x - ax) * vx + (y - ay) * vy) / (vx * vx + vy * vy), 0, 1)
    return np.hypot(x - ax - t * vx, y - ay - t * vy)


def _texture(seed, shape):
    from scipy import ndimage
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.standard_normal(shape), 1.5) * 3.0


def render_face(p: FaceParams, amps: dict, view: str = FRONTAL, side: int = 96, texture: float = 0.0,
                shift=(0.0, 0.0)) -> np.ndarray:
    """Render one RGB frame in [0, 1]. ``amps`` maps AU code to amplitude in [0, 1]."""
    A = view_matrix(view)
    Ainv = np.linalg.inv(A)
    v, u = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    u = u - p.cx - shift[0]
    v = v - p.cy - shift[1]
    x = Ainv[0, 0] * u + Ainv[0, 1] * v
    y = Ainv[1, 0] * u + Ainv[1, 1] * v
    img = np.empty((side, side, 3))
    img[...] = p.bg

    def paint(alpha, color):
        img[...] = img * (1 - alpha[..., None]) + np.asarray(color) * alpha[..., None]

    r = np.hypot(x / p.rx, y / p.ry)
    head = _cover((r - 1.0) * min(p.rx, p.ry))
    paint(head, p.skin)
    if texture:
        from scipy import ndimage
        tex = _texture(p.texture_seed, (side + 16, side + 16))
        # sampled in face coordinates so the texture moves with the face
        t = ndimage.map_coordinates(tex, [y + p.cy + 8, x + p.cx + 8], order=1, mode="reflect")
        img += texture * t[..., None] * 0.1
    for sgn in (-1, 1):
        paint(_cover(np.hypot(x - sgn * p.eye_x, y - p.eye_y) - 2.5), (0.08, 0.08, 0.1))
        inner_y = p.brow_y - 5.0 * amps.get(1, 0.0)
        outer_y = p.brow_y - 1.0 - 5.0 * amps.get(2, 0.0)
        d = _seg_dist(x, y, sgn * p.brow_in, inner_y, sgn * p.brow_out, outer_y) - p.brow_w
        paint(_cover(d), (0.16, 0.10, 0.07))
    lift = 6.0 * amps.get(12, 0.0)
    mw = p.mouth_w + 3.0 * amps.get(12, 0.0)
    gap = p.lip_gap * (1.0 - 0.9 * amps.get(24, 0.0))
    lip = p.lip_w * (1.0 - 0.35 * amps.get(24, 0.0))
    t = np.clip((x / mw) ** 2, 0, 1)
    inside = np.abs(x) < mw
    yc = p.mouth_y - lift * t
    dist = np.abs(y - yc)
    k = 1.0 - 0.6 * t
    paint(np.where(inside, _cover(dist - (gap + lip) * k), 0.0), (0.72, 0.30, 0.30))
    paint(np.where(inside, _cover(dist - gap * k), 0.0), (0.25, 0.05, 0.06))
    return np.clip(img, 0.0, 1.0)


def trapezoid(frame, start, apex_start, apex_end, end) -> float:
    if frame < start or frame > end:
        return 0.0
    if frame < apex_start:
        return (frame - start) / (apex_start - start)
    if frame <= apex_end:
        return 1.0
    return (end - frame) / (end - apex_end)


def sample_events(rng, n_frames, n_events):
    """Non-overlapping (start, apex_start, apex_end, end) spans inside the video."""
    events = []
    for _ in range(n_events):
        for _attempt in range(50):
            on, apex, off = int(rng.integers(3, 6)), int(rng.integers(6, 13)), int(rng.integers(3, 6))
            length = on + apex + off
            if length + 2 >= n_frames:
                break
            s = int(rng.integers(1, n_frames - length))
            span = (s, s + on, s + on + apex - 1, s + length - 1)
            if all(span[3] + 3 < e[0] or e[3] + 3 < span[0] for e in events):
                events.append(span)
                break
    return sorted(events)


def activation_track(events, n_frames) -> np.ndarray:
    amp = np.zeros(n_frames)
    for e in events:
        amp = np.maximum(amp, [trapezoid(f, *e) for f in range(n_frames)])
    return amp


def labels_from_amplitude(amp) -> np.ndarray:
    return (np.asarray(amp) > 0.5).astype(np.int64)


def subject_ids(n):
    return [f"S{i:03d}" for i in range(1, n + 1)]


def synthesize_video(spec: SyntheticSpec, subject_index: int, view: str):
    """Frames, per-AU amplitude tracks, and the face box for one video."""
    p = subject_params(subject_index, spec.seed, spec.image_side)
    rng = np.random.default_rng([spec.seed, subject_index, VIEWS.index(view), 3])
    n = spec.frames_per_video
    amps = {}
    lo, hi = spec.events_per_au
    for au in spec.au_set:
        k = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
        amps[au] = activation_track(sample_events(rng, n, k), n)
    frames = [
        render_face(p, {au: amps[au][f] for au in spec.au_set}, view, spec.image_side, spec.texture)
        for f in range(n)
    ]
    return frames, amps, face_box(p, view, spec.image_side)


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_frame(path, img):
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def generate_synthetic(spec: SyntheticSpec, root) -> Path:
    """Render the whole synthetic corpus under ``root`` and return it."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"destination {root} is not writable: {exc}") from exc
    views = VIEWS[: spec.n_views]
    for si, sid in enumerate(subject_ids(spec.n_subjects)):
        for view in views:
            frames, amps, box = synthesize_video(spec, si, view)
            vid = f"{sid}_{view}"
            vdir = root / "subjects" / sid / view / vid
            vdir.mkdir(parents=True, exist_ok=True)
            rows = []
            for f, img in enumerate(frames):
                write_frame(vdir / f"frame_{f:06d}.png", img)
                rows.append([vid, f, *box, *(int(amps[au][f] > 0.5) for au in spec.au_set)])
            write_labels(vdir / "labels.csv", spec.au_set, rows)
    manifest = {
        "au_set": list(spec.au_set),
        "views": list(views),
        "seed": spec.seed,
        "generator_version": GENERATOR_VERSION,
        "n_subjects": spec.n_subjects,
        "frames_per_video": spec.frames_per_video,
        "image_side": spec.image_side,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def write_labels(path, au_set, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame", "face_x", "face_y", "face_w", "face_h", *(f"AU{a}" for a in au_set)])
        w.writerows(rows)


class DatasetError(ValueError):
    pass


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def load_dataset(root, au_set=None):
    """Yield FrameRecords in (video_id, frame_index) order.

    Labels must be 0/1 and cover ``au_set`` (default: the manifest's set).
    """
    root = Path(root)
    manifest = read_manifest(root)
    au_set = tuple(au_set or manifest.get("au_set", ()))
    side = manifest.get("image_side")
    files = sorted((root / "subjects").glob("*/*/*/labels.csv"), key=lambda p: p.parent.name)
    for path in files:
        sid, view = path.parent.parent.parent.name, path.parent.parent.name
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            au_cols = {}
            for i, name in enumerate(header[6:], start=6):
                if not name.startswith("AU"):
                    raise DatasetError(f"{path}:1: unexpected column {name!r}")
                au_cols[int(name[2:])] = i
            missing = [a for a in au_set if a not in au_cols]
            if missing:
                raise DatasetError(f"{path}:1: missing label columns {missing}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                labels = {}
                for a in au_set or au_cols:
                    val = row[au_cols[a]].strip()
                    if val not in ("0", "1"):
                        raise DatasetError(f"{path}:{lineno}: AU{a} label {val!r} is not binary")
                    labels[a] = int(val)
                try:
                    frame = int(row[1])
                    box = tuple(int(v) for v in row[2:6])
                except ValueError as exc:
                    raise DatasetError(f"{path}:{lineno}: {exc}") from None
                img = path.parent / f"frame_{frame:06d}.png"
                rows.append(FrameRecord(row[0], frame, img, box, labels, view, sid,
                                        (side, side) if side else _image_size(img)))
            yield from sorted(rows, key=lambda r: r.frame_index)


def _image_size(path):
    with Image.open(path) as im:
        return (im.height, im.width)


def group_videos(records):
    """``{video_id: [records in frame order]}`` preserving first-seen order."""
    videos: dict = {}
    for r in records:
        videos.setdefault(r.video_id, []).append(r)
    return videos


# -- motion-labelled task ------------------------------------------------------

def motion_task_video(seed: int, subject_index: int, n_frames: int = 48, side: int = 96,
                      speed=(1.0, 1.6)):
    """A video whose single label marks frames where the inner brows are moving.

    Brow height follows holds and ramps at random levels, so a still frame
    says nothing about the label; only frame-to-frame motion does.
    Returns (frames, labels, face_box).
    """
    p = subject_params(subject_index, seed, side)
    rng = np.random.default_rng([seed, subject_index, 99])
    level = rng.uniform(0, 1)
    amps, labels = [level], [0]
    moving = False
    while len(amps) < n_frames:
        seg = int(rng.integers(3, 8))
        moving = not moving
        if moving:
            step = rng.uniform(*speed) / 5.0
            direction = 1 if level < 0.5 else -1
            for _ in range(seg):
                nxt = level + direction * step
                if not 0.0 <= nxt <= 1.0:
                    direction = -direction
                    nxt = level + direction * step
                level = nxt
                amps.append(level)
                labels.append(1)
        else:
            amps.extend([level] * seg)
            labels.extend([0] * seg)
    amps, labels = amps[:n_frames], labels[:n_frames]
    frames = [render_face(p, {1: a}, FRONTAL, side) for a in amps]
    return frames, np.array(labels, dtype=np.int64), face_box(p, FRONTAL, side)
