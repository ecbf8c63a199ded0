"""On-disk dataset model for synchronized multi-video inputs.

Layout of a dataset directory::

    manifest.json            list of {video_id, frame_count, width, height}
    video_<k>/
        candidates.json      per-frame array of {id, x, y, w, h}
        trajectories.json    array of {start_frame, points: [[x, y] * 15]}
        flow/<frame>.flo2    binary flow raster (see FLOW_MAGIC below)
    ground_truth.json        per video, per-frame nullable {x, y, w, h}

Flow rasters (``.flo2``): magic bytes ``CIP2``, then width and height as
32-bit little-endian unsigned ints, then width*height*2 little-endian
float32 values, row-major, (u, v) interleaved per pixel.  The raster at
frame t encodes motion t -> t+1; the final frame of a video carries a
zero raster.

Coordinates are pixels with the origin at the top-left corner, y down.
All videos in a dataset share the same frame count (temporal sync).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FLOW_MAGIC = b"CIP2"
TRAJECTORY_LEN = 15


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner (x, y), extent (w, h) in pixels."""

    x: float
    y: float
    w: float
    h: float

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def area(self) -> float:
        return self.w * self.h

    def contains(self, px: float, py: float) -> bool:
        """Point-in-box test, boundary inclusive."""
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h

    def intersects_frame(self, width: float, height: float) -> bool:
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


def round_px(v: float) -> int:
    """Half-up rounding to the pixel grid (deterministic, no banker's rounding)."""
    return int(math.floor(v + 0.5))


def pixel_bounds(box: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Rasterize a box to integer (x0, x1, y0, y1), clipped to the frame.

    Returns empty ranges (x0 >= x1 or y0 >= y1) when the box misses the frame.
    """
    x0 = max(round_px(box.x), 0)
    x1 = min(round_px(box.x + box.w), width)
    y0 = max(round_px(box.y), 0)
    y1 = min(round_px(box.y + box.h), height)
    return x0, x1, y0, y1


@dataclass(frozen=True)
class Candidate:
    """One human detection on one frame; ``id`` is the per-frame ordinal."""

    id: int
    box: BBox


@dataclass
class FlowRaster:
    """Dense per-frame motion field, shape (height, width, 2) of (u, v)."""

    data: np.ndarray

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class RawTrajectory:
    """A 15-point track, one (x, y) position per frame from start_frame on."""

    start_frame: int
    points: np.ndarray  # (15, 2) float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)


@dataclass
class VideoStream:
    """One loaded video: per-frame candidates, flow access, trajectories.

    Read-only after construction; safe to share across workers.  Flow
    rasters are read lazily from ``flow_dir`` unless ``rasters`` holds
    them in memory (synthetic/in-memory datasets).
    """

    video_id: int
    frame_count: int
    width: int
    height: int
    candidates: list[list[Candidate]]
    trajectories: list[RawTrajectory]
    flow_dir: Path | None = None
    rasters: list[FlowRaster] | None = None
    dropped_trajectories: int = 0
    # start_frame -> (points stacked (n, 15, 2)) for fast coincidence tests
    traj_index: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.traj_index:
            by_start: dict[int, list[np.ndarray]] = {}
            for tr in self.trajectories:
                by_start.setdefault(tr.start_frame, []).append(tr.points)
            self.traj_index = {s: np.stack(p) for s, p in by_start.items()}

    def flow_at(self, frame: int) -> FlowRaster:
        if self.rasters is not None:
            return self.rasters[frame]
        if self.flow_dir is None:
            raise DatasetError(f"video {self.video_id} has no flow source")
        raster = read_flow_raster(self.flow_dir / f"{frame:06d}.flo2")
        if raster.width != self.width or raster.height != self.height:
            raise DatasetError(
                f"video {self.video_id} frame {frame}: flow raster is "
                f"{raster.width}x{raster.height}, expected {self.width}x{self.height}"
            )
        return raster


@dataclass
class GroundTruth:
    """Per video, per frame: the true co-interest person box, or None."""

    boxes: list[list[BBox | None]]

    @property
    def n_videos(self) -> int:
        return len(self.boxes)

    @property
    def frame_count(self) -> int:
        return len(self.boxes[0]) if self.boxes else 0


IDLE = None  # detection state marker: no person selected on this frame


@dataclass
class Detection:
    """Final per-frame decision: a candidate box or idle, plus the energy
    of the sliding window that produced it."""

    video_id: int
    frame: int
    state: int | None  # candidate id, or None for idle
    box: BBox | None
    window_energy: float

    def __post_init__(self):
        if (self.state is None) != (self.box is None):
            raise DatasetError(
                f"detection ({self.video_id},{self.frame}): idle state and "
                "box presence are inconsistent"
            )


@dataclass
class Dataset:
    """A loaded multi-view dataset; all streams share frame_count."""

    streams: list[VideoStream]
    ground_truth: GroundTruth | None = None

    @property
    def n_videos(self) -> int:
        return len(self.streams)

    @property
    def frame_count(self) -> int:
        return self.streams[0].frame_count


# ---------------------------------------------------------------------------
# flow raster binary IO

def write_flow_raster(raster: FlowRaster, path: Path | str) -> None:
    data = np.ascontiguousarray(raster.data, dtype="<f4")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(data.tobytes())


def read_flow_raster(path: Path | str) -> FlowRaster:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise DatasetError(f"{path}: bad flow magic {raw[:4]!r}")
    if len(raw) < 12:
        raise DatasetError(f"{path}: truncated flow header")
    w, h = struct.unpack("<II", raw[4:12])
    expected = 12 + w * h * 2 * 4
    if len(raw) != expected:
        raise DatasetError(f"{path}: flow payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    if not np.isfinite(data).all():
        raise DatasetError(f"{path}: non-finite flow values")
    return FlowRaster(np.array(data, dtype=np.float32))


# ---------------------------------------------------------------------------
# JSON helpers

def _box_to_json(box: BBox) -> dict:
    return {"x": box.x, "y": box.y, "w": box.w, "h": box.h}


def _box_from_json(obj: dict) -> BBox:
    return BBox(float(obj["x"]), float(obj["y"]), float(obj["w"]), float(obj["h"]))


def _validate_box(box: BBox, width: int, height: int, where: str) -> None:
    if not (box.w > 0 and box.h > 0):
        raise DatasetError(f"{where}: box has non-positive extent {box.w}x{box.h}")
    if not all(math.isfinite(v) for v in (box.x, box.y, box.w, box.h)):
        raise DatasetError(f"{where}: non-finite box")
    if not box.intersects_frame(width, height):
        raise DatasetError(f"{where}: box does not intersect the frame")


def _write_json(obj, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# dataset load / write

def load_dataset(root: Path | str, with_ground_truth: bool = True) -> Dataset:
    """Load and validate a dataset directory.

    Trajectories whose point count differs from 15 are dropped with a
    counted warning.  Frame-count mismatches between videos, missing
    manifests, and malformed flow rasters are hard errors.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if not isinstance(manifest, list) or not manifest:
        raise DatasetError(f"{manifest_path}: expected a non-empty list of videos")

    streams = []
    frame_count = None
    for entry in manifest:
        vid = int(entry["video_id"])
        fc = int(entry["frame_count"])
        width, height = int(entry["width"]), int(entry["height"])
        if frame_count is None:
            frame_count = fc
        elif fc != frame_count:
            raise DatasetError(
                f"video {vid} has {fc} frames, others have {frame_count}: "
                "videos must be temporally synchronized"
            )
        vdir = root / f"video_{vid}"

        with open(vdir / "candidates.json") as f:
            cand_frames = json.load(f)
        if len(cand_frames) != fc:
            raise DatasetError(f"video {vid}: candidates.json covers {len(cand_frames)} frames, expected {fc}")
        candidates: list[list[Candidate]] = []
        for t, frame_cands in enumerate(cand_frames):
            cands = []
            for j, obj in enumerate(frame_cands):
                cid = int(obj["id"])
                if cid != j:
                    raise DatasetError(f"video {vid} frame {t}: candidate ids not contiguous from 0")
                box = _box_from_json(obj)
                _validate_box(box, width, height, f"video {vid} frame {t} candidate {cid}")
                cands.append(Candidate(cid, box))
            candidates.append(cands)

        with open(vdir / "trajectories.json") as f:
            traj_objs = json.load(f)
        trajectories = []
        dropped = 0
        for obj in traj_objs:
            pts = np.asarray(obj["points"], dtype=np.float64)
            if pts.ndim != 2 or pts.shape != (TRAJECTORY_LEN, 2):
                dropped += 1
                continue
            if not np.isfinite(pts).all():
                raise DatasetError(f"video {vid}: trajectory with non-finite points")
            trajectories.append(RawTrajectory(int(obj["start_frame"]), pts))
        if dropped:
            log.warning("video %d: dropped %d trajectories not %d frames long", vid, dropped, TRAJECTORY_LEN)

        flow_dir = vdir / "flow"
        if not flow_dir.is_dir():
            raise DatasetError(f"video {vid}: missing flow directory {flow_dir}")
        # validate the first raster eagerly so size errors surface at load
        first = read_flow_raster(flow_dir / "000000.flo2")
        if first.width != width or first.height != height:
            raise DatasetError(
                f"video {vid}: flow raster is {first.width}x{first.height}, "
                f"manifest says {width}x{height}"
            )

        streams.append(
            VideoStream(
                video_id=vid,
                frame_count=fc,
                width=width,
                height=height,
                candidates=candidates,
                trajectories=trajectories,
                flow_dir=flow_dir,
                dropped_trajectories=dropped,
            )
        )

    gt = None
    if with_ground_truth and (root / "ground_truth.json").is_file():
        gt = load_ground_truth(root, streams)
    return Dataset(streams=streams, ground_truth=gt)


def load_ground_truth(root: Path | str, streams: list[VideoStream] | None = None) -> GroundTruth:
    root = Path(root)
    with open(root / "ground_truth.json") as f:
        raw = json.load(f)
    boxes: list[list[BBox | None]] = []
    for v, per_frame in enumerate(raw):
        row: list[BBox | None] = []
        for t, obj in enumerate(per_frame):
            if obj is None:
                row.append(None)
                continue
            box = _box_from_json(obj)
            if streams is not None:
                _validate_box(box, streams[v].width, streams[v].height, f"ground truth video {v} frame {t}")
            row.append(box)
        boxes.append(row)
    if streams is not None:
        for v, row in enumerate(boxes):
            if len(row) != streams[v].frame_count:
                raise DatasetError(f"ground truth video {v}: {len(row)} frames, expected {streams[v].frame_count}")
    return GroundTruth(boxes)


def write_dataset(ds: Dataset, root: Path | str) -> None:
    """Write a fully in-memory dataset in the standard layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in ds.streams:
        manifest.append(
            {"video_id": s.video_id, "frame_count": s.frame_count, "width": s.width, "height": s.height}
        )
        vdir = root / f"video_{s.video_id}"
        (vdir / "flow").mkdir(parents=True, exist_ok=True)
        cand_frames = [
            [{"id": c.id, **_box_to_json(c.box)} for c in frame] for frame in s.candidates
        ]
        _write_json(cand_frames, vdir / "candidates.json")
        trajs = [
            {"start_frame": tr.start_frame, "points": tr.points.tolist()} for tr in s.trajectories
        ]
        _write_json(trajs, vdir / "trajectories.json")
        for t in range(s.frame_count):
            write_flow_raster(s.flow_at(t), vdir / "flow" / f"{t:06d}.flo2")
    _write_json(manifest, root / "manifest.json")
    if ds.ground_truth is not None:
        write_ground_truth(ds.ground_truth, root)


def write_ground_truth(gt: GroundTruth, root: Path | str) -> None:
    raw = [[None if b is None else _box_to_json(b) for b in row] for row in gt.boxes]
    _write_json(raw, Path(root) / "ground_truth.json")


# ---------------------------------------------------------------------------
# detections IO

def write_detections(detections: list[Detection], path: Path | str) -> None:
    """Serialize detections sorted video-major, frame-minor.

    Each (video, frame) pair must appear exactly once.
    """
    seen = set()
    for d in detections:
        key = (d.video_id, d.frame)
        if key in seen:
            raise DatasetError(f"duplicate detection for video {d.video_id} frame {d.frame}")
        seen.add(key)
    records = []
    for d in sorted(detections, key=lambda d: (d.video_id, d.frame)):
        rec = {
            "video_id": d.video_id,
            "frame": d.frame,
            "state": "idle" if d.state is None else d.state,
            "window_energy": d.window_energy,
        }
        if d.box is not None:
            rec["box"] = _box_to_json(d.box)
        records.append(rec)
    _write_json(records, Path(path))


def load_detections(path: Path | str) -> list[Detection]:
    with open(path) as f:
        records = json.load(f)
    detections = []
    for rec in records:
        state = rec["state"]
        idle = state == "idle"
        detections.append(
            Detection(
                video_id=int(rec["video_id"]),
                frame=int(rec["frame"]),
                state=None if idle else int(state),
                box=None if idle else _box_from_json(rec["box"]),
                window_energy=float(rec["window_energy"]),
            )
        )
    return detections
