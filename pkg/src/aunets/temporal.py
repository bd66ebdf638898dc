"""Sliding median smoothing of per-AU prediction tracks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_WINDOW = 7
THRESHOLD = 0.5


def median_smooth(track, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Centered running median; the track is mirrored about its ends (``c b a | a b c``)."""
    if not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window!r}")
    x = np.asarray(track, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("track must be a nonempty 1-D sequence")
    if window == 1:
        return x.copy()
    half = window // 2
    padded = np.pad(x, half, mode="symmetric")
    return np.median(sliding_window_view(padded, window), axis=-1)


def decide(probs, threshold: float = THRESHOLD) -> np.ndarray:
    """Binary decisions; a probability exactly at the threshold counts as present."""
    return (np.asarray(probs) >= threshold).astype(np.int64)


@dataclass
class DetectionSequence:
    au: int
    probs_raw: np.ndarray
    window: int = DEFAULT_WINDOW
    probs_smoothed: np.ndarray = field(default=None)
    decisions_raw: np.ndarray = field(default=None)
    decisions_smoothed: np.ndarray = field(default=None)

    def __post_init__(self):
        self.probs_raw = np.asarray(self.probs_raw, dtype=np.float64)
        if self.decisions_raw is None:
            self.decisions_raw = decide(self.probs_raw)
        if self.probs_smoothed is None:
            self.probs_smoothed = self.probs_raw.copy()
        if self.decisions_smoothed is None:
            self.decisions_smoothed = decide(self.probs_smoothed)
        n = len(self.probs_raw)
        if not all(len(t) == n for t in (self.probs_smoothed, self.decisions_raw, self.decisions_smoothed)):
            raise ValueError("all tracks must share one length")


def smooth_sequence(seq: DetectionSequence, window: int = DEFAULT_WINDOW, on: str = "probs") -> DetectionSequence:
    """Median-filter a detection track.

    ``on="probs"`` smooths probabilities and re-thresholds; ``on="decisions"``
    filters the raw binary decisions instead and leaves probabilities raw.
    """
    if on == "probs":
        sm = median_smooth(seq.probs_raw, window)
        return DetectionSequence(seq.au, seq.probs_raw, window, sm, seq.decisions_raw, decide(sm))
    if on == "decisions":
        d = median_smooth(seq.decisions_raw, window).astype(np.int64)
        return DetectionSequence(seq.au, seq.probs_raw, window, seq.probs_raw.copy(), seq.decisions_raw, d)
    raise ValueError(f"unknown smoothing target {on!r}")
