"""Trajectory-based motion features for one candidate.

A candidate is linked to point trajectories through a short greedy
tracklet: the trajectories that stay inside the tracklet's boxes are its
foreground trajectories, the rest belong to the background and are
discarded.  Each foreground trajectory is summarized by a normalized
block-Hankel matrix (capturing its dynamics independently of image
position) and all of them jointly by per-direction movement histograms
binned over the frames of the analysis window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import BBox, RawTrajectory, VideoStream, iou
from .flowfeat import merged_direction_bins

TRACKLET_LEN = 15
TRACK_IOU_THRESHOLD = 0.3
MIN_COINCIDENT_FRAMES = 8
HANKELET_MAX_DIST = 2.0 - math.sqrt(2.0)


@dataclass
class Tracklet:
    """Greedy chain of candidate boxes, up to 15 consecutive frames."""

    video_id: int
    start_frame: int
    boxes: list[BBox]
    seed_id: int

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class Hankelet:
    """Normalized 16x8 block-Hankel matrix of a 15-point trajectory.

    ``gram`` caches K @ K.T (unit Frobenius norm for non-degenerate
    inputs).  A trajectory with no motion at all yields the degenerate
    zero matrix.
    """

    matrix: np.ndarray
    degenerate: bool
    gram: np.ndarray


@dataclass
class Mph:
    """Movement histograms: 5 merged directions x one bin per window frame,
    jointly L1-normalized; values are summed displacement magnitudes."""

    hist: np.ndarray  # (5, window length)


@dataclass
class TrajFeature:
    """Per-candidate trajectory summary used by the inter-video energy."""

    hankelets: list[Hankelet]
    mph: Mph
    trajectory_count: int
    gram_stack: np.ndarray | None = None  # (len(hankelets), 256)

    def __post_init__(self):
        if self.gram_stack is None:
            if self.hankelets:
                self.gram_stack = np.stack([h.gram.ravel() for h in self.hankelets])
            else:
                self.gram_stack = np.zeros((0, 256))


def build_tracklet(
    stream: VideoStream,
    frame: int,
    cand_id: int,
    iou_threshold: float = TRACK_IOU_THRESHOLD,
) -> Tracklet:
    """Extend a candidate greedily by max-IoU successors for up to 15 frames.

    Ties on IoU go to the lower candidate id; tracking stops at the frame
    horizon or when the best overlap drops below the threshold.
    """
    cur = stream.candidates[frame][cand_id].box
    boxes = [cur]
    f = frame + 1
    while len(boxes) < TRACKLET_LEN and f < stream.frame_count:
        best_iou = 0.0
        best_box = None
        for cand in stream.candidates[f]:
            v = iou(cur, cand.box)
            if v > best_iou:  # strict: equal IoU keeps the earlier (lower) id
                best_iou = v
                best_box = cand.box
        if best_box is None or best_iou < iou_threshold:
            break
        boxes.append(best_box)
        cur = best_box
        f += 1
    return Tracklet(video_id=stream.video_id, start_frame=frame, boxes=boxes, seed_id=cand_id)


def _coincidence_counts(starts: np.ndarray, points: np.ndarray, tracklet: Tracklet) -> np.ndarray:
    """Frames on which each trajectory's point lies inside the tracklet box."""
    L = len(tracklet.boxes)
    t0 = tracklet.start_frame
    bx = np.array([b.x for b in tracklet.boxes])
    by = np.array([b.y for b in tracklet.boxes])
    bw = np.array([b.w for b in tracklet.boxes])
    bh = np.array([b.h for b in tracklet.boxes])

    idx = starts[:, None] + np.arange(TRACKLET_LEN)[None, :] - t0  # (n, 15)
    valid = (idx >= 0) & (idx < L)
    idx = np.clip(idx, 0, L - 1)
    px = points[:, :, 0]
    py = points[:, :, 1]
    inside = (
        valid
        & (px >= bx[idx])
        & (px <= bx[idx] + bw[idx])
        & (py >= by[idx])
        & (py <= by[idx] + bh[idx])
    )
    return inside.sum(axis=1)


def coincident_mask(starts: np.ndarray, points: np.ndarray, tracklet: Tracklet) -> np.ndarray:
    """Foreground mask over pre-stacked trajectories (starts (n,), points
    (n, 15, 2)): True where the trajectory sticks to the tracklet."""
    return _coincidence_counts(starts, points, tracklet) >= MIN_COINCIDENT_FRAMES


def filter_foreground(trajectories: Sequence[RawTrajectory], tracklet: Tracklet) -> list[RawTrajectory]:
    """Keep trajectories inside the tracklet's boxes on >= 8 of their 15
    frames; frames past the tracklet's end count as non-coincident."""
    if not trajectories:
        return []
    starts = np.array([t.start_frame for t in trajectories])
    points = np.stack([t.points for t in trajectories])
    mask = coincident_mask(starts, points, tracklet)
    return [t for t, keep in zip(trajectories, mask) if keep]


# _HANKEL_IDX[i, j] = i + j: point index feeding block row i, column j
_HANKEL_IDX = np.arange(8)[:, None] + np.arange(8)[None, :]


def hankelets_batch(trajectories: Sequence[RawTrajectory]) -> list[Hankelet]:
    """Build Hankel descriptors for many trajectories at once."""
    if not trajectories:
        return []
    pts = np.stack([t.points for t in trajectories])  # (n, 15, 2)
    if pts.shape[1:] != (TRACKLET_LEN, 2):
        raise ValueError(f"trajectories must have {TRACKLET_LEN} points, got {pts.shape[1:]}")
    q = pts - pts[:, :1]
    H = np.empty((len(trajectories), 16, 8))
    H[:, 0::2] = q[:, :, 0][:, _HANKEL_IDX]
    H[:, 1::2] = q[:, :, 1][:, _HANKEL_IDX]
    grams = H @ H.transpose(0, 2, 1)
    norms = np.sqrt((grams * grams).sum(axis=(1, 2)))
    out = []
    for k, norm in enumerate(norms):
        if norm == 0.0:
            out.append(Hankelet(matrix=np.zeros((16, 8)), degenerate=True, gram=np.zeros((16, 16))))
        else:
            out.append(
                Hankelet(matrix=H[k] / math.sqrt(norm), degenerate=False, gram=grams[k] / norm)
            )
    return out


def hankelet(traj: RawTrajectory) -> Hankelet:
    """Build the normalized 16x8 block-Hankel matrix of a trajectory.

    The first point is subtracted from all points, so the result depends
    only on the motion, not on where it happens in the image.
    """
    return hankelets_batch([traj])[0]


def hankelet_dist(a: Hankelet, b: Hankelet) -> float:
    """Gram-overlap distance in [0, 2 - sqrt(2)]; degenerate inputs get the
    neutral maximum so missing motion evidence never favors a match."""
    if a.degenerate or b.degenerate:
        return HANKELET_MAX_DIST
    return float(2.0 - np.linalg.norm(a.gram + b.gram))


def mph(trajectories: Sequence[RawTrajectory], window: tuple[int, int]) -> Mph:
    """Movement histograms of a candidate's foreground trajectories.

    For every window frame f and trajectory step p[f+1] - p[f], the step's
    magnitude is added to the bin of its merged direction at column f.
    """
    t0, t1 = window
    T = t1 - t0
    if not trajectories:
        return Mph(hist=np.zeros((5, T)))
    pts = np.stack([t.points for t in trajectories])  # (n, 15, 2)
    steps = np.diff(pts, axis=1).reshape(-1, 2)  # (n*14, 2)
    starts = np.array([t.start_frame for t in trajectories])
    frames = (starts[:, None] + np.arange(TRACKLET_LEN - 1)[None, :]).ravel()
    in_win = (frames >= t0) & (frames < t1)
    steps = steps[in_win]
    cols = frames[in_win] - t0
    mags = np.hypot(steps[:, 0], steps[:, 1])
    bins = merged_direction_bins(steps[:, 0], steps[:, 1])
    hist = np.bincount(bins * T + cols, weights=mags, minlength=5 * T).reshape(5, T)
    total = hist.sum()
    if total > 0:
        hist /= total
    return Mph(hist=hist)


def traj_feature(
    trajectories: Sequence[RawTrajectory], window: tuple[int, int]
) -> TrajFeature:
    """Bundle Hankel descriptors and movement histograms for one candidate.

    Degenerate (motionless) trajectories contribute no Hankel descriptor;
    a candidate may end up with an empty list.
    """
    hanks = [h for h in (hankelet(t) for t in trajectories) if not h.degenerate]
    return TrajFeature(hankelets=hanks, mph=mph(trajectories, window), trajectory_count=len(trajectories))


def psi_traj(a: TrajFeature, b: TrajFeature) -> float:
    """Trajectory matching energy: mean pairwise Hankel distance plus mean
    per-direction L1 distance of the movement histograms."""
    if len(a.hankelets) and len(b.hankelets):
        ips = a.gram_stack @ b.gram_stack.T
        dists = 2.0 - np.sqrt(2.0 + 2.0 * np.clip(ips, -1.0, 1.0))
        hank_term = float(dists.mean())
    else:
        hank_term = HANKELET_MAX_DIST
    mph_term = float(np.abs(a.mph.hist - b.mph.hist).sum()) / 5.0
    return hank_term + mph_term
