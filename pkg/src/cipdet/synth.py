"""Synthetic multi-view scene generator with exact ground truth.

Actors move in a flat world with piecewise-constant 3D velocities; each
camera projects that motion orthographically, scaling the horizontal
component by the cosine of its yaw (so lateral motion flips direction
between front and back views while vertical motion keeps its sign) and
adding its own ego-motion to everything in view.  Cameras that follow
the target person encode the follow as an ego-motion offset stream, so
the target stays put in their frames while everyone else drifts.

Actors carry no appearance at all: candidates are distinguishable only
by their motion and by a per-actor oscillating "limb" flow pattern
painted into the lower half of their boxes.  Generated datasets are
written in the standard on-disk layout and are byte-identical for a
fixed scene and seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds

log = logging.getLogger(__name__)


@dataclass
class MotionScript:
    """One actor: velocity segments (lateral, vertical, depth per frame),
    box size, and the parameters of its limb-motion texture."""

    segments: list[tuple[int, tuple[float, float, float]]]
    base_size: tuple[float, float] = (14.0, 28.0)
    limb_amplitude: float = 1.2
    limb_freq: float = 0.08  # cycles per frame
    limb_phase: float = 0.0
    limb_spatial_freq: float = 2.0
    limb_spatial_phase: float = 0.0

    def velocities(self, frames: int) -> np.ndarray:
        out = np.zeros((frames, 3))
        t = 0
        for n, v in self.segments:
            out[t : t + n] = v
            t += n
        if t != frames:
            raise ValueError(f"velocity segments cover {t} frames, scene has {frames}")
        return out

    def limb_value(self, t: np.ndarray | float, rel_row: np.ndarray | float) -> np.ndarray:
        """Vertical limb-flow velocity at frame t and relative row (0..1)
        of the lower box half."""
        return (
            self.limb_amplitude
            * np.sin(2.0 * np.pi * self.limb_freq * np.asarray(t) + self.limb_phase)
            * np.cos(np.pi * self.limb_spatial_freq * np.asarray(rel_row) + self.limb_spatial_phase)
        )


@dataclass
class CameraScript:
    """One camera: yaw (sets the horizontal projection factor), per-frame
    ego-motion offsets, per-actor anchor positions, and the wearer (who
    never appears in their own view)."""

    yaw: float
    anchors: list[tuple[float, float]]
    ego: np.ndarray | None = None  # (frames, 2) pixels/frame
    wearer: int | None = None


@dataclass
class NoiseSpec:
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    jitter: float = 0.0
    seed: int = 0

    def validate(self) -> "NoiseSpec":
        if not (0.0 <= self.miss_rate <= 1.0 and 0.0 <= self.fp_rate <= 1.0):
            raise ValueError("noise rates must lie in [0, 1]")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        return self


@dataclass
class Scene:
    actors: list[MotionScript]
    cameras: list[CameraScript]
    noise: NoiseSpec
    cip_segments: list[tuple[int, int]]  # (frames, actor id)
    frames: int
    width: int = 128
    height: int = 72
    traj_spawn_step: int = 5
    torso_points: int = 2
    limb_points: int = 3
    bg_trajectories: int = 0

    def validate(self) -> "Scene":
        if len(self.actors) < 1 or len(self.cameras) < 2:
            raise ValueError("a scene needs at least 1 actor and 2 cameras")
        if sum(n for n, _ in self.cip_segments) != self.frames:
            raise ValueError("cip segments must partition the stream")
        for cam in self.cameras:
            if len(cam.anchors) != len(self.actors):
                raise ValueError("each camera needs one anchor per actor")
            if cam.ego is not None and len(cam.ego) != self.frames:
                raise ValueError("ego offsets must cover every frame")
        self.noise.validate()
        for a in self.actors:
            a.velocities(self.frames)
        return self

    def cip_at(self) -> np.ndarray:
        out = np.zeros(self.frames, dtype=np.int64)
        t = 0
        for n, actor in self.cip_segments:
            out[t : t + n] = actor
            t += n
        return out


def _detectable(box: ds.BBox, width: int, height: int) -> bool:
    """A detector only fires on boxes with a meaningful in-frame extent."""
    x0, x1, y0, y1 = ds.pixel_bounds(box, width, height)
    return (x1 - x0) >= 2 and (y1 - y0) >= 2


@dataclass
class _ActorView:
    """Kinematics of one actor as seen by one camera."""

    centers: np.ndarray  # (frames, 2)
    sizes: np.ndarray  # (frames, 2)
    img_vel: np.ndarray  # (frames, 2) motion t -> t+1

    def box(self, t: int) -> ds.BBox:
        cx, cy = self.centers[t]
        w, h = self.sizes[t]
        return ds.BBox(cx - w / 2.0, cy - h / 2.0, w, h)


def _actor_views(scene: Scene, cam: CameraScript) -> list[_ActorView]:
    frames = scene.frames
    ego = cam.ego if cam.ego is not None else np.zeros((frames, 2))
    pan = np.vstack([np.zeros(2), np.cumsum(ego, axis=0)[:-1]])
    cos_yaw = math.cos(cam.yaw)
    views = []
    for a, script in enumerate(scene.actors):
        vel = script.velocities(frames)
        pos = np.vstack([np.zeros(3), np.cumsum(vel, axis=0)[:-1]])
        proj_vel = np.column_stack([cos_yaw * vel[:, 0], vel[:, 1]])
        centers = np.array(cam.anchors[a]) + np.column_stack(
            [cos_yaw * pos[:, 0], pos[:, 1]]
        ) + pan
        scale = np.clip(1.0 - 0.04 * pos[:, 2], 0.5, 1.8)
        sizes = np.array(script.base_size) * scale[:, None]
        views.append(_ActorView(centers=centers, sizes=sizes, img_vel=proj_vel + ego))
    return views


def _paint_raster(
    scene: Scene, cam: CameraScript, views: list[_ActorView], t: int
) -> ds.FlowRaster:
    H, W = scene.height, scene.width
    ego = cam.ego[t] if cam.ego is not None else np.zeros(2)
    data = np.empty((H, W, 2), dtype=np.float32)
    data[:, :] = ego
    for a, view in enumerate(views):
        if a == cam.wearer:
            continue
        box = view.box(t)
        x0, x1, y0, y1 = ds.pixel_bounds(box, W, H)
        if x0 >= x1 or y0 >= y1:
            continue
        data[y0:y1, x0:x1] = view.img_vel[t]
        # limb texture in the lower half of the (unclipped) box
        lower_start = box.y + box.h / 2.0
        r0 = max(ds.round_px(lower_start), y0)
        if r0 < y1:
            rows = np.arange(r0, y1)
            rel = (rows + 0.5 - lower_start) / (box.h / 2.0)
            limb = scene.actors[a].limb_value(t, np.clip(rel, 0.0, 1.0))
            data[r0:y1, x0:x1, 1] += limb[:, None].astype(np.float32)
    return ds.FlowRaster(data)


def _make_trajectories(
    scene: Scene, cam: CameraScript, views: list[_ActorView], rng: np.random.Generator
) -> list[ds.RawTrajectory]:
    frames = scene.frames
    span = ds.TRAJECTORY_LEN
    trajectories = []
    ego = cam.ego if cam.ego is not None else np.zeros((frames, 2))
    for a, view in enumerate(views):
        if a == cam.wearer:
            continue
        script = scene.actors[a]
        for s in range(0, frames - span + 1, scene.traj_spawn_step):
            for kind, count in (("torso", scene.torso_points), ("limb", scene.limb_points)):
                for _ in range(count):
                    rel_x = rng.uniform(0.15, 0.85)
                    if kind == "torso":
                        rel_y = rng.uniform(0.08, 0.45)
                    else:
                        rel_y = rng.uniform(0.55, 0.95)
                    p0 = view.centers[s] - view.sizes[s] / 2.0 + np.array([rel_x, rel_y]) * view.sizes[s]
                    steps = view.img_vel[s : s + span - 1].copy()
                    if kind == "limb":
                        lrel = (rel_y - 0.5) * 2.0
                        steps[:, 1] += script.limb_value(np.arange(s, s + span - 1), lrel)
                    pts = np.vstack([p0, p0 + np.cumsum(steps, axis=0)])
                    trajectories.append(ds.RawTrajectory(start_frame=s, points=pts))
    for s in range(0, frames - span + 1, scene.traj_spawn_step):
        for _ in range(scene.bg_trajectories):
            p0 = np.array([rng.uniform(0, scene.width), rng.uniform(0, scene.height)])
            steps = ego[s : s + span - 1]
            pts = np.vstack([p0, p0 + np.cumsum(steps, axis=0)])
            trajectories.append(ds.RawTrajectory(start_frame=s, points=pts))
    return trajectories


def generate(scene: Scene, out_dir: Path | str) -> ds.Dataset:
    """Render a scene to a dataset directory and load it back.

    Fully deterministic for a fixed scene and seed: two runs produce
    byte-identical files.
    """
    scene.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scene.noise.seed)
    cip = scene.cip_at()
    noise = scene.noise

    manifest = []
    gt_rows = []
    for c, cam in enumerate(scene.cameras):
        views = _actor_views(scene, cam)
        vdir = out / f"video_{c}"
        (vdir / "flow").mkdir(parents=True, exist_ok=True)

        trajectories = _make_trajectories(scene, cam, views, rng)

        visible_any = [False] * len(scene.actors)
        cand_frames = []
        gt_row: list[ds.BBox | None] = []
        for t in range(scene.frames):
            cands = []
            for a, view in enumerate(views):
                if a == cam.wearer:
                    continue
                box = view.box(t)
                if not _detectable(box, scene.width, scene.height):
                    continue
                visible_any[a] = True
                if noise.miss_rate > 0 and rng.random() < noise.miss_rate:
                    continue
                if noise.jitter > 0:
                    dx, dy = rng.normal(0.0, noise.jitter, size=2)
                    box = ds.BBox(box.x + dx, box.y + dy, box.w, box.h)
                    if not _detectable(box, scene.width, scene.height):
                        continue
                cands.append(box)
            if noise.fp_rate > 0:
                for _ in range(rng.poisson(noise.fp_rate)):
                    w = rng.uniform(10.0, 20.0)
                    h = w * rng.uniform(1.7, 2.3)
                    cx = rng.uniform(0.0, scene.width)
                    cy = rng.uniform(0.0, scene.height)
                    box = ds.BBox(cx - w / 2.0, cy - h / 2.0, w, h)
                    if _detectable(box, scene.width, scene.height):
                        cands.append(box)
            cand_frames.append(
                [{"id": i, "x": b.x, "y": b.y, "w": b.w, "h": b.h} for i, b in enumerate(cands)]
            )

            cip_actor = int(cip[t])
            if cip_actor == cam.wearer:
                gt_row.append(None)
            else:
                true_box = views[cip_actor].box(t)
                gt_row.append(true_box if _detectable(true_box, scene.width, scene.height) else None)

        for a, seen in enumerate(visible_any):
            if a != cam.wearer and not seen:
                log.warning("actor %d never enters the frame of camera %d", a, c)

        for t in range(scene.frames):
            if t < scene.frames - 1:
                raster = _paint_raster(scene, cam, views, t)
            else:
                raster = ds.FlowRaster(np.zeros((scene.height, scene.width, 2), dtype=np.float32))
            ds.write_flow_raster(raster, vdir / "flow" / f"{t:06d}.flo2")

        ds._write_json(cand_frames, vdir / "candidates.json")
        ds._write_json(
            [{"start_frame": tr.start_frame, "points": tr.points.tolist()} for tr in trajectories],
            vdir / "trajectories.json",
        )
        manifest.append(
            {"video_id": c, "frame_count": scene.frames, "width": scene.width, "height": scene.height}
        )
        gt_rows.append(gt_row)

    ds._write_json(manifest, out / "manifest.json")
    ds.write_ground_truth(ds.GroundTruth(gt_rows), out)
    return ds.load_dataset(out)


# ---------------------------------------------------------------------------
# scene construction helpers and presets

def _oscillation(frames: int, speed: float, half_period: int, phase_steps: int = 0,
                 axis: int = 0) -> list[tuple[int, tuple[float, float, float]]]:
    """Triangle-wave motion along one axis: alternate +speed/-speed every
    half period, optionally starting mid-cycle."""
    segs: list[tuple[int, tuple[float, float, float]]] = []
    t = 0
    sign = 1.0
    first = half_period - (phase_steps % (2 * half_period)) % half_period
    if phase_steps % (2 * half_period) >= half_period:
        sign = -1.0
    while t < frames:
        n = min(first if t == 0 else half_period, frames - t)
        v = [0.0, 0.0, 0.0]
        v[axis] = sign * speed
        segs.append((n, (v[0], v[1], v[2])))
        sign = -sign
        t += n
    return segs


def _follow_ego(scene_actors: list[MotionScript], cip: np.ndarray, frames: int, yaw: float) -> np.ndarray:
    """Ego offsets that keep the current target stationary in the view."""
    cos_yaw = math.cos(yaw)
    ego = np.zeros((frames, 2))
    for t in range(frames):
        vel = _velocity_at(scene_actors[int(cip[t])], t, frames)
        ego[t] = (-cos_yaw * vel[0], -vel[1])
    return ego


def _velocity_at(script: MotionScript, t: int, frames: int) -> tuple[float, float, float]:
    acc = 0
    for n, v in script.segments:
        acc += n
        if t < acc:
            return v
    raise ValueError(f"frame {t} beyond script ({acc} frames)")


def _spread_anchors(n_actors: int, width: int, height: int, order: list[int] | None = None) -> list[tuple[float, float]]:
    order = order or list(range(n_actors))
    xs = [(k + 1) * width / (n_actors + 1) for k in range(n_actors)]
    return [(xs[order[a]], 0.55 * height) for a in range(n_actors)]


def _default_actors(n: int, frames: int) -> list[MotionScript]:
    """Actors with mutually distinct speeds, periods, and limb patterns."""
    actors = []
    for k in range(n):
        speed = 0.45 + 0.11 * k
        half = max(8, int(round(14.0 / speed)))
        segs = _oscillation(frames, speed, half, phase_steps=3 * k, axis=0)
        actors.append(
            MotionScript(
                segments=segs,
                base_size=(12.0 + (k % 3), 26.0 + 2 * (k % 2)),
                limb_amplitude=1.0 + 0.15 * k,
                limb_freq=0.05 + 0.022 * k,
                limb_phase=0.7 * k,
                limb_spatial_freq=1.0 + (k % 3),
                limb_spatial_phase=0.4 * k,
            )
        )
    return actors


def _follow_cameras(
    actors: list[MotionScript],
    cip: np.ndarray,
    frames: int,
    yaws: list[float],
    width: int,
    height: int,
    wearers: list[int | None] | None = None,
) -> list[CameraScript]:
    cams = []
    for c, yaw in enumerate(yaws):
        wearer = wearers[c] if wearers else None
        cams.append(
            CameraScript(
                yaw=yaw,
                anchors=_spread_anchors(len(actors), width, height,
                                        order=[(a + c) % len(actors) for a in range(len(actors))]),
                ego=_follow_ego(actors, cip, frames, yaw),
                wearer=wearer,
            )
        )
    return cams


def preset_tiny(frames: int = 30, seed: int = 7) -> Scene:
    """2 views, 2 actors, 30 frames: smallest end-to-end scene."""
    width, height = 96, 72
    actors = _default_actors(2, frames)
    cip_segments = [(frames, 0)]
    cip = np.zeros(frames, dtype=np.int64)
    cams = _follow_cameras(actors, cip, frames, [0.3, 2.7], width, height)
    return Scene(
        actors=actors, cameras=cams, noise=NoiseSpec(seed=seed),
        cip_segments=cip_segments, frames=frames, width=width, height=height,
    ).validate()


def preset_clean6(frames: int = 1200, seed: int = 11) -> Scene:
    """6 views, 6 actors, target person rotates every 200 frames, no noise."""
    width, height = 128, 72
    actors = _default_actors(6, frames)
    seg = 200
    cip_segments = []
    t = 0
    k = 0
    while t < frames:
        n = min(seg, frames - t)
        cip_segments.append((n, k % 6))
        t += n
        k += 1
    scene_cip = np.concatenate([np.full(n, a, dtype=np.int64) for n, a in cip_segments])
    yaws = [0.0, 0.45, 0.6, 2.45, 2.6, math.pi]
    cams = _follow_cameras(actors, scene_cip, frames, yaws, width, height)
    return Scene(
        actors=actors, cameras=cams, noise=NoiseSpec(seed=seed),
        cip_segments=cip_segments, frames=frames, width=width, height=height,
    ).validate()


def preset_egoview(frames: int = 240, seed: int = 13) -> Scene:
    """5 actors wearing the 5 cameras; the target is camera 0's wearer, so
    camera 0 should stay idle.  One distractor strays through its view."""
    width, height = 128, 72
    actors = _default_actors(5, frames)
    # the target (actor 0) keeps moving so the other cameras keep panning
    actors[0].segments = _oscillation(frames, 0.8, 18, axis=0)
    cip_segments = [(frames, 0)]
    cip = np.zeros(frames, dtype=np.int64)
    yaws = [0.0, 0.45, 2.6, math.pi, 0.65]
    wearers: list[int | None] = [0, 1, 2, 3, 4]
    # actor 1 sweeps far and fast, crossing camera 0's view once, briefly
    actors[1].segments = _oscillation(frames, 2.2, 100, axis=0)
    cams = _follow_cameras(actors, cip, frames, yaws, width, height, wearers)
    # camera 0 is worn by the target: it tracks nobody, it just bobs
    wander = np.zeros((frames, 2))
    wander[:, 1] = 0.7 * np.sin(2 * np.pi * np.arange(frames) / 80.0)
    cams[0].ego = wander
    anchors0 = list(cams[0].anchors)
    anchors0[1] = (-215.0, 0.55 * height)
    for a in (2, 3, 4):
        anchors0[a] = (-400.0, 0.55 * height)
    cams[0].anchors = anchors0
    return Scene(
        actors=actors, cameras=cams, noise=NoiseSpec(seed=seed),
        cip_segments=cip_segments, frames=frames, width=width, height=height,
    ).validate()


def preset_noisy(frames: int = 240, seed: int = 17) -> Scene:
    """4 views, 4 actors, detector noise: misses, spurious boxes, jitter."""
    width, height = 128, 72
    actors = _default_actors(4, frames)
    half = frames // 2
    cip_segments = [(half, 0), (frames - half, 1)]
    cip = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(frames - half, dtype=np.int64)])
    yaws = [0.0, 0.5, 2.6, math.pi]
    cams = _follow_cameras(actors, cip, frames, yaws, width, height)
    return Scene(
        actors=actors, cameras=cams,
        noise=NoiseSpec(miss_rate=0.1, fp_rate=0.1, jitter=2.0, seed=seed),
        cip_segments=cip_segments, frames=frames, width=width, height=height,
        bg_trajectories=2,
    ).validate()


def scenario_presets() -> dict[str, Scene]:
    """Named scene catalog with the standard sizes."""
    return {
        "tiny": preset_tiny(),
        "clean6": preset_clean6(),
        "egoview": preset_egoview(),
        "noisy": preset_noisy(),
    }


# ---------------------------------------------------------------------------
# scene file IO

def scene_to_json(scene: Scene) -> dict:
    return {
        "frames": scene.frames,
        "width": scene.width,
        "height": scene.height,
        "traj_spawn_step": scene.traj_spawn_step,
        "torso_points": scene.torso_points,
        "limb_points": scene.limb_points,
        "bg_trajectories": scene.bg_trajectories,
        "cip_segments": [[n, a] for n, a in scene.cip_segments],
        "noise": {
            "miss_rate": scene.noise.miss_rate,
            "fp_rate": scene.noise.fp_rate,
            "jitter": scene.noise.jitter,
            "seed": scene.noise.seed,
        },
        "actors": [
            {
                "segments": [[n, list(v)] for n, v in a.segments],
                "base_size": list(a.base_size),
                "limb_amplitude": a.limb_amplitude,
                "limb_freq": a.limb_freq,
                "limb_phase": a.limb_phase,
                "limb_spatial_freq": a.limb_spatial_freq,
                "limb_spatial_phase": a.limb_spatial_phase,
            }
            for a in scene.actors
        ],
        "cameras": [
            {
                "yaw": c.yaw,
                "wearer": c.wearer,
                "anchors": [list(p) for p in c.anchors],
                "ego": None if c.ego is None else np.asarray(c.ego).tolist(),
            }
            for c in scene.cameras
        ],
    }


def scene_from_json(obj: dict) -> Scene:
    actors = [
        MotionScript(
            segments=[(int(n), (float(v[0]), float(v[1]), float(v[2]))) for n, v in a["segments"]],
            base_size=(float(a["base_size"][0]), float(a["base_size"][1])),
            limb_amplitude=float(a["limb_amplitude"]),
            limb_freq=float(a["limb_freq"]),
            limb_phase=float(a["limb_phase"]),
            limb_spatial_freq=float(a["limb_spatial_freq"]),
            limb_spatial_phase=float(a["limb_spatial_phase"]),
        )
        for a in obj["actors"]
    ]
    cameras = [
        CameraScript(
            yaw=float(c["yaw"]),
            anchors=[(float(p[0]), float(p[1])) for p in c["anchors"]],
            ego=None if c.get("ego") is None else np.asarray(c["ego"], dtype=np.float64),
            wearer=None if c.get("wearer") is None else int(c["wearer"]),
        )
        for c in obj["cameras"]
    ]
    n = obj["noise"]
    return Scene(
        actors=actors,
        cameras=cameras,
        noise=NoiseSpec(float(n["miss_rate"]), float(n["fp_rate"]), float(n["jitter"]), int(n["seed"])),
        cip_segments=[(int(s[0]), int(s[1])) for s in obj["cip_segments"]],
        frames=int(obj["frames"]),
        width=int(obj["width"]),
        height=int(obj["height"]),
        traj_spawn_step=int(obj.get("traj_spawn_step", 5)),
        torso_points=int(obj.get("torso_points", 2)),
        limb_points=int(obj.get("limb_points", 3)),
        bg_trajectories=int(obj.get("bg_trajectories", 0)),
    ).validate()


def save_scene(scene: Scene, path: Path | str) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_json(scene), f, indent=1, sort_keys=True)
        f.write("\n")


def load_scene(path: Path | str) -> Scene:
    with open(path) as f:
        return scene_from_json(json.load(f))
