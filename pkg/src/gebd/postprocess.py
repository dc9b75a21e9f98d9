"""Score post-processing: Gaussian smoothing, peak picking, clip-score merging.

Frame f carries the timestamp (f + 0.5) / fps everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import Clip
from .util import atomic_write_text

PEAK_THRESHOLD = 0.1
PEAK_NEIGHBOR_SECONDS = 0.5


@dataclass
class BoundaryScores:
    """Length-T per-frame boundary score signal.

    Raw model scores lie in (0, 1); merged clip scores may exceed 1 because
    overlapping windows are summed, never renormalized.
    """

    video_id: str
    fps: float
    scores: np.ndarray
    smoothed: bool = False

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or len(self.scores) < 1:
            raise ValueError(f"{self.video_id}: scores must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.video_id}: scores must be finite")
        if self.fps <= 0:
            raise ValueError(f"{self.video_id}: fps must be positive")


@dataclass
class DetectionList:
    """Sorted boundary timestamps (seconds) emitted for one video."""

    video_id: str
    timestamps: list[float]

    def __post_init__(self):
        self.timestamps = [float(t) for t in self.timestamps]
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError(f"{self.video_id}: timestamps must be strictly increasing")


def smoothing_window(fps: float) -> int:
    """Frames in one second, forced odd so the filter stays centered."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    return 2 * int(math.floor(fps / 2)) + 1


def smoothing_taps(fps: float) -> np.ndarray:
    """Normalized Gaussian taps (sigma = 1 frame) over the one-second window."""
    half = smoothing_window(fps) // 2
    j = np.arange(-half, half + 1)
    taps = np.exp(-0.5 * j * j)
    return taps / taps.sum()


@lru_cache(maxsize=64)
def smoothing_matrix(num_frames: int, fps: float) -> np.ndarray:
    """T x T smoothing operator; edge rows renormalize over the in-range taps."""
    taps = smoothing_taps(fps)
    half = len(taps) // 2
    m = np.zeros((num_frames, num_frames))
    for t in range(num_frames):
        lo = max(0, t - half)
        hi = min(num_frames, t + half + 1)
        seg = taps[lo - t + half:hi - t + half]
        m[t, lo:hi] = seg / seg.sum()
    m.setflags(write=False)
    return m


def gaussian_smooth(s: BoundaryScores) -> BoundaryScores:
    smoothed = smoothing_matrix(len(s.scores), s.fps) @ s.scores
    return BoundaryScores(s.video_id, s.fps, smoothed, smoothed=True)


def pick_peaks(
    s: BoundaryScores,
    threshold: float = PEAK_THRESHOLD,
    neighbor_seconds: float = PEAK_NEIGHBOR_SECONDS,
) -> DetectionList:
    """Frames that top every neighbor within the window and clear the threshold.

    On a plateau of equal window-maxima only the earliest frame fires.
    """
    x = s.scores
    t = len(x)
    w = int(math.floor(neighbor_seconds * s.fps + 1e-9))
    candidate = np.zeros(t, dtype=bool)
    for f in range(t):
        lo = max(0, f - w)
        hi = min(t, f + w + 1)
        if x[f] > threshold and x[f] >= x[lo:hi].max():
            candidate[f] = True
    stamps = []
    for f in np.flatnonzero(candidate):
        if f > 0 and candidate[f - 1] and x[f - 1] == x[f]:
            continue
        stamps.append((f + 0.5) / s.fps)
    return DetectionList(s.video_id, stamps)


def merge_clip_scores(scored_clips: list[tuple[Clip, BoundaryScores]]) -> BoundaryScores:
    """Sum overlapping clip scores onto the parent frame range.

    Sums are kept as-is (no renormalization); any uncovered parent frame is
    a coverage gap and an error.
    """
    if not scored_clips:
        raise ValueError("merge_clip_scores: no clips")
    vid = scored_clips[0][0].video_id
    fps = scored_clips[0][0].fps
    smoothed = scored_clips[0][1].smoothed
    parent_len = max(clip.end_frame for clip, _ in scored_clips)
    total = np.zeros(parent_len)
    covered = np.zeros(parent_len, dtype=int)
    for clip, sc in scored_clips:
        if clip.video_id != vid:
            raise ValueError(f"merge_clip_scores: mixed videos {vid!r} and {clip.video_id!r}")
        if clip.fps != fps or sc.fps != fps:
            raise ValueError("merge_clip_scores: clips must share fps")
        if sc.smoothed != smoothed:
            raise ValueError("merge_clip_scores: mixed smoothed and raw clip scores")
        if len(sc.scores) != clip.num_frames:
            raise ValueError(
                f"merge_clip_scores: clip [{clip.start_frame}, {clip.end_frame}) has "
                f"{len(sc.scores)} scores"
            )
        total[clip.start_frame:clip.end_frame] += sc.scores
        covered[clip.start_frame:clip.end_frame] += 1
    gaps = np.flatnonzero(covered == 0)
    if gaps.size:
        raise ValueError(f"merge_clip_scores: coverage gap at frames {gaps[:8].tolist()}")
    return BoundaryScores(vid, fps, total, smoothed=smoothed)


def save_scores(path: str | Path, s: BoundaryScores) -> None:
    rec = {
        "video_id": s.video_id,
        "fps": s.fps,
        "scores": [float(v) for v in s.scores],
        "smoothed": s.smoothed,
    }
    atomic_write_text(path, json.dumps(rec) + "\n")


def load_scores(path: str | Path) -> BoundaryScores:
    path = Path(path)
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
        return BoundaryScores(
            str(rec["video_id"]), float(rec["fps"]), np.asarray(rec["scores"]), bool(rec["smoothed"])
        )
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValueError(f"{path}: invalid score file: {e}") from e


def save_detections(path: str | Path, d: DetectionList) -> None:
    rec = {"video_id": d.video_id, "timestamps": d.timestamps}
    atomic_write_text(path, json.dumps(rec) + "\n")


def load_detections(path: str | Path) -> DetectionList:
    path = Path(path)
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
        return DetectionList(str(rec["video_id"]), [float(t) for t in rec["timestamps"]])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValueError(f"{path}: invalid detection file: {e}") from e
