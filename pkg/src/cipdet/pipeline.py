"""End-to-end detection: sliding windows, per-window CRF solves, lowest-
energy merging, and precision/recall evaluation.

Each window is solved independently under the assumption that the target
person does not change within it.  Overlapping windows then compete per
frame: the covering window with the lowest total energy supplies the
final detection, so windows that straddle a change of target (and pay
for it in energy) lose to the clean windows on both sides.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .config import Config
from .crf import build_window_crf, node_index
from .dataset import BBox, Candidate, Dataset, Detection, GroundTruth, iou
from .flowfeat import FrameFeature, frame_feature
from .solver import solve_trws
from .trajfeat import (
    Hankelet,
    RawTrajectory,
    TrajFeature,
    build_tracklet,
    filter_foreground,
    hankelet,
    mph,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# sliding windows

def make_windows(total_frames: int, length: int, stride: int) -> list[int]:
    """Window start frames: 0, stride, 2*stride, ...; the final window is
    shifted left so it ends exactly at total_frames."""
    if not (1 <= length <= total_frames):
        raise ValueError(f"window length {length} not in [1, {total_frames}]")
    if not (1 <= stride <= length):
        raise ValueError(f"stride {stride} not in [1, {length}]")
    last = total_frames - length
    starts = list(range(0, last + 1, stride))
    if starts[-1] != last:
        starts.append(last)
    return starts


@dataclass
class WindowResult:
    """One window's chosen state and box per (video, frame) plus its energy."""

    index: int
    start: int
    length: int
    # per video, per frame offset: (candidate id or None, box or None)
    picks: list[list[tuple[int | None, BBox | None]]]
    energy: float


def merge_windows(results: list[WindowResult], total_frames: int) -> list[Detection]:
    """Per (video, frame), adopt the covering window with the lowest energy
    (ties to the lowest window index)."""
    if not results:
        raise ValueError("no window results to merge")
    n_videos = len(results[0].picks)
    best: dict[tuple[int, int], WindowResult] = {}
    for res in sorted(results, key=lambda r: r.index):
        for v in range(n_videos):
            for t in range(res.length):
                key = (v, res.start + t)
                cur = best.get(key)
                if cur is None or res.energy < cur.energy:
                    best[key] = res
    detections = []
    for v in range(n_videos):
        for f in range(total_frames):
            res = best.get((v, f))
            if res is None:
                raise ValueError(f"frame {f} of video {v} is not covered by any window")
            state, box = res.picks[v][f - res.start]
            detections.append(
                Detection(video_id=v, frame=f, state=state, box=box, window_energy=res.energy)
            )
    return detections


# ---------------------------------------------------------------------------
# feature cache

class FeatureCache:
    """Computed-once per-(video, frame) features, shared across windows.

    Frame features and per-candidate foreground trajectories (with their
    Hankel descriptors) do not depend on the window; movement histograms
    do and are built per window by :class:`WindowFeatureView`.
    """

    def __init__(self, dataset: Dataset, config: Config):
        self.dataset = dataset
        self.config = config
        self._frame: dict[tuple[int, int], list[FrameFeature]] = {}
        self._traj: dict[tuple[int, int], list[tuple[list[RawTrajectory], list[Hankelet]]]] = {}
        self._lock = threading.Lock()
        self._by_start = [
            self._group_by_start(s.trajectories) for s in dataset.streams
        ]

    @staticmethod
    def _group_by_start(trajectories: list[RawTrajectory]) -> dict[int, list[RawTrajectory]]:
        grouped: dict[int, list[RawTrajectory]] = {}
        for tr in trajectories:
            grouped.setdefault(tr.start_frame, []).append(tr)
        return grouped

    def frame_features(self, video: int, frame: int) -> list[FrameFeature]:
        key = (video, frame)
        got = self._frame.get(key)
        if got is not None:
            return got
        stream = self.dataset.streams[video]
        flow = stream.flow_at(frame)
        feats = [frame_feature(flow, c.box) for c in stream.candidates[frame]]
        with self._lock:
            return self._frame.setdefault(key, feats)

    def candidate_trajectories(self, video: int, frame: int) -> list[tuple[list[RawTrajectory], list[Hankelet]]]:
        key = (video, frame)
        got = self._traj.get(key)
        if got is not None:
            return got
        stream = self.dataset.streams[video]
        grouped = self._by_start[video]
        nearby: list[RawTrajectory] = []
        for s in range(frame - 14, frame + 15):
            nearby.extend(grouped.get(s, ()))
        per_cand = []
        for cand in stream.candidates[frame]:
            tracklet = build_tracklet(stream, frame, cand.id, self.config.tracklet_iou)
            kept = filter_foreground(nearby, tracklet)
            hanks = [h for h in (hankelet(t) for t in kept) if not h.degenerate]
            per_cand.append((kept, hanks))
        with self._lock:
            return self._traj.setdefault(key, per_cand)


class WindowFeatureView:
    """Adapter giving the CRF builder window-scoped trajectory features."""

    def __init__(self, cache: FeatureCache, start: int, length: int):
        self.cache = cache
        self.window = (start, start + length)

    def frame_features(self, video: int, frame: int) -> list[FrameFeature]:
        return self.cache.frame_features(video, frame)

    def traj_features(self, video: int, frame: int) -> list[TrajFeature]:
        out = []
        for kept, hanks in self.cache.candidate_trajectories(video, frame):
            out.append(
                TrajFeature(hankelets=hanks, mph=mph(kept, self.window), trajectory_count=len(kept))
            )
        return out


# ---------------------------------------------------------------------------
# detection

def run_window(dataset: Dataset, cache: FeatureCache, index: int, start: int, length: int) -> WindowResult:
    cfg = cache.config
    t0 = time.perf_counter()
    view = WindowFeatureView(cache, start, length)
    problem = build_window_crf(dataset.streams, start, length, view, cfg)
    report = solve_trws(problem, cfg.trws_max_iters, cfg.trws_epsilon)
    picks: list[list[tuple[int | None, BBox | None]]] = []
    for v in range(dataset.n_videos):
        row = []
        for t in range(length):
            state = report.labeling.states[node_index(v, t, length)]
            cands = dataset.streams[v].candidates[start + t]
            if state >= len(cands):  # idle
                row.append((None, None))
            else:
                row.append((state, cands[state].box))
        picks.append(row)
    log.info(
        "window %d [%d, %d): energy %.3f, bound %.3f, %d iters, %.2fs",
        index, start, start + length, report.labeling.energy, report.lower_bound,
        report.iterations, time.perf_counter() - t0,
    )
    return WindowResult(index=index, start=start, length=length, picks=picks, energy=report.labeling.energy)


def detect_windows(dataset: Dataset, config: Config, threads: int | None = None) -> list[WindowResult]:
    """Solve every sliding window; windows run concurrently."""
    total = dataset.frame_count
    length = min(config.window_length, total)
    stride = min(config.window_stride, length)
    starts = make_windows(total, length, stride)
    cache = FeatureCache(dataset, config)
    workers = threads or os.cpu_count() or 1
    if workers <= 1 or len(starts) == 1:
        return [run_window(dataset, cache, k, s, length) for k, s in enumerate(starts)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_window, dataset, cache, k, s, length) for k, s in enumerate(starts)]
        return [f.result() for f in futures]


def detect(dataset: Dataset, config: Config | None = None, threads: int | None = None) -> list[Detection]:
    """Full pipeline: features, per-window CRF solves, lowest-energy merge."""
    cfg = (config or Config()).validate()
    results = detect_windows(dataset, cfg, threads)
    return merge_windows(results, dataset.frame_count)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Metrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f_score(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f_score": self.f_score,
        }


@dataclass
class EvalReport:
    overall: Metrics
    per_video: list[Metrics]

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_video": [m.to_dict() for m in self.per_video],
        }

    def pretty(self) -> str:
        lines = []
        for v, m in enumerate(self.per_video):
            lines.append(
                f"video {v}: precision {m.precision:.4f}  recall {m.recall:.4f}  "
                f"f-score {m.f_score:.4f}  (tp {m.tp} fp {m.fp} fn {m.fn})"
            )
        m = self.overall
        lines.append(
            f"overall: precision {m.precision:.4f}  recall {m.recall:.4f}  "
            f"f-score {m.f_score:.4f}  (tp {m.tp} fp {m.fp} fn {m.fn})"
        )
        return "\n".join(lines)


def evaluate(
    detections: list[Detection], ground_truth: GroundTruth, iou_threshold: float = 0.5
) -> EvalReport:
    """Per frame: a detection overlapping the truth above the threshold is a
    true positive; a detection with no matching truth is a false positive;
    a truth with no matching detection is a false negative.  Idle frames
    without ground truth are ignored."""
    by_key = {}
    for d in detections:
        if (d.video_id, d.frame) in by_key:
            raise ValueError(f"duplicate detection for video {d.video_id} frame {d.frame}")
        by_key[(d.video_id, d.frame)] = d
    for v in range(ground_truth.n_videos):
        for f in range(ground_truth.frame_count):
            if (v, f) not in by_key:
                raise ValueError(f"detections do not cover video {v} frame {f}")

    per_video = [Metrics() for _ in range(ground_truth.n_videos)]
    for v in range(ground_truth.n_videos):
        m = per_video[v]
        for f in range(ground_truth.frame_count):
            det = by_key[(v, f)]
            gt_box = ground_truth.boxes[v][f]
            if det.box is not None:
                if gt_box is not None and iou(det.box, gt_box) > iou_threshold:
                    m.tp += 1
                else:
                    m.fp += 1
                    if gt_box is not None:
                        m.fn += 1
            elif gt_box is not None:
                m.fn += 1
    overall = Metrics(
        tp=sum(m.tp for m in per_video),
        fp=sum(m.fp for m in per_video),
        fn=sum(m.fn for m in per_video),
    )
    return EvalReport(overall=overall, per_video=per_video)


def exclude_undetectable(
    detections: list[Detection],
    ground_truth: GroundTruth,
    candidates: list[list[list[Candidate]]],
    iou_threshold: float = 0.5,
) -> tuple[list[Detection], GroundTruth]:
    """Drop from evaluation every frame whose true person is not among the
    candidates (no candidate overlaps the truth above the threshold).

    Dropped frames become (idle, no truth) pairs, which `evaluate` ignores,
    so the returned pair feeds a second evaluate call directly.
    """
    excluded = set()
    for v, per_frame in enumerate(ground_truth.boxes):
        for f, gt_box in enumerate(per_frame):
            if gt_box is None:
                continue
            if not any(iou(c.box, gt_box) > iou_threshold for c in candidates[v][f]):
                excluded.add((v, f))
    new_gt = GroundTruth(
        [
            [None if (v, f) in excluded else box for f, box in enumerate(per_frame)]
            for v, per_frame in enumerate(ground_truth.boxes)
        ]
    )
    new_dets = [
        Detection(d.video_id, d.frame, None, None, d.window_energy)
        if (d.video_id, d.frame) in excluded
        else d
        for d in detections
    ]
    return new_dets, new_gt
