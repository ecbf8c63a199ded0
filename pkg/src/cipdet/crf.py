"""Pairwise CRF over a window: one node per frame, one state per candidate
plus a trailing idle state.

Edges and costs:

* intra-video: every unordered frame pair of the same video pays a
  center-displacement cost, plus a size-change cost when the frames are
  adjacent;
* inter-video: every unordered video pair at the same frame pays the
  motion-pattern mismatch (frame features + trajectory features);
* idle: any entry involving an idle state costs the window-wide mean of
  the candidate-candidate entries of its kind, which sits between the
  energy of a well-matched pair and that of a mismatched pair.

There is no unary term: candidates carry no appearance information.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .config import Config
from .dataset import VideoStream
from .flowfeat import HOF_DIM, MAG_DIM, FrameFeature
from .trajfeat import HANKELET_MAX_DIST, TrajFeature


def node_index(video: int, frame_offset: int, window_length: int) -> int:
    """Flat node id, video-major frame-minor."""
    return video * window_length + frame_offset


def node_video_frame(index: int, window_length: int) -> tuple[int, int]:
    return divmod(index, window_length)


@dataclass
class Edge:
    a: int
    b: int
    costs: np.ndarray  # (states of a, states of b)


@dataclass
class CrfProblem:
    """Immutable pairwise energy model; state index ``count-1`` is idle."""

    n_videos: int
    window_length: int
    state_counts: list[int]
    edges: list[Edge]

    @property
    def num_nodes(self) -> int:
        return self.n_videos * self.window_length

    def validate(self) -> "CrfProblem":
        if len(self.state_counts) != self.num_nodes:
            raise ValueError(
                f"{len(self.state_counts)} state counts for {self.num_nodes} nodes"
            )
        if any(s < 1 for s in self.state_counts):
            raise ValueError("every node needs at least the idle state")
        seen = set()
        for e in self.edges:
            if not (0 <= e.a < e.b < self.num_nodes):
                raise ValueError(f"bad edge ({e.a}, {e.b})")
            if (e.a, e.b) in seen:
                raise ValueError(f"duplicate edge ({e.a}, {e.b})")
            seen.add((e.a, e.b))
            expected = (self.state_counts[e.a], self.state_counts[e.b])
            if e.costs.shape != expected:
                raise ValueError(f"edge ({e.a},{e.b}) cost table {e.costs.shape} != {expected}")
            if not np.isfinite(e.costs).all():
                raise ValueError(f"edge ({e.a},{e.b}) has non-finite costs")
            if (e.costs < 0).any():
                raise ValueError(f"edge ({e.a},{e.b}) has negative costs")
        return self

    def is_intra(self, edge: Edge) -> bool:
        return edge.a // self.window_length == edge.b // self.window_length


@dataclass
class Labeling:
    """Chosen state per node plus the total edge energy of the assignment."""

    states: list[int]
    energy: float


def labeling_energy(problem: CrfProblem, states: list[int] | np.ndarray) -> float:
    return float(sum(e.costs[states[e.a], states[e.b]] for e in problem.edges))


def psi_intra(
    center_a: np.ndarray,
    size_a: np.ndarray,
    center_b: np.ndarray,
    size_b: np.ndarray,
    adjacent: bool,
) -> float:
    """Location-change penalty, plus a size-change penalty between adjacent
    frames.  Centers and sizes are normalized to [0, 1] by frame dims."""
    cost = 1.0 - 1.0 / (np.linalg.norm(np.subtract(center_a, center_b)) + 1.0)
    if adjacent:
        cost += 1.0 - 1.0 / (np.linalg.norm(np.subtract(size_a, size_b)) + 1.0)
    return float(cost)


class WindowFeatures(Protocol):
    """Per-candidate features of the frames covered by a window."""

    def frame_features(self, video: int, frame: int) -> list[FrameFeature]: ...

    def traj_features(self, video: int, frame: int) -> list[TrajFeature]: ...


class _FramePack:
    """Stacked per-frame candidate features for batched inter-video costs."""

    def __init__(self, ffeats: list[FrameFeature], tfeats: list[TrajFeature]):
        n = len(ffeats)
        self.n = n
        self.hof = np.stack([f.hof for f in ffeats]) if n else np.zeros((0, HOF_DIM))
        self.mag = np.stack([f.mag for f in ffeats]) if n else np.zeros((0, MAG_DIM))
        self.mag_norm = np.zeros((n, MAG_DIM))
        self.flat_mag = np.zeros(n, dtype=bool)  # rows with zero variance
        for i, f in enumerate(ffeats):
            if f.mag_norm is None:
                self.flat_mag[i] = True
            else:
                self.mag_norm[i] = f.mag_norm
        self.mph = (
            np.stack([t.mph.hist.ravel() for t in tfeats]) if n else np.zeros((0, 0))
        )
        self.gram_counts = np.array([t.gram_stack.shape[0] for t in tfeats], dtype=np.int64)
        self.grams = (
            np.concatenate([t.gram_stack for t in tfeats]) if n else np.zeros((0, 256))
        )
        self.gram_offsets = np.zeros(n, dtype=np.int64)
        if n:
            np.cumsum(self.gram_counts[:-1], out=self.gram_offsets[1:])


def _inter_block(a: _FramePack, b: _FramePack, w_frame: float, w_traj: float) -> np.ndarray:
    """Pairwise inter-video energies; identical to combining psi_frame and
    psi_traj per pair, computed for the whole candidate block at once."""
    l1 = np.abs(a.hof[:, None, :] - b.hof[None, :, :]).sum(axis=2)
    corr = (a.mag_norm @ b.mag_norm.T) / MAG_DIM
    np.clip(corr, -1.0, 1.0, out=corr)
    if a.flat_mag.any() or b.flat_mag.any():
        flat_pair = a.flat_mag[:, None] | b.flat_mag[None, :]
        equal = (a.mag[:, None, :] == b.mag[None, :, :]).all(axis=2)
        corr = np.where(flat_pair, equal.astype(float), corr)
    psi_f = (1.0 - np.exp(-l1)) + (1.0 - corr) / 2.0

    if a.grams.shape[0] and b.grams.shape[0]:
        ips = a.grams @ b.grams.T
        d = 2.0 - np.sqrt(2.0 + 2.0 * np.clip(ips, -1.0, 1.0))
        # rows/cols of zero-gram candidates produce garbage partial sums
        # (reduceat quirk); the counts mask replaces them below
        off_a = np.minimum(a.gram_offsets, d.shape[0] - 1)
        off_b = np.minimum(b.gram_offsets, d.shape[1] - 1)
        row_sums = np.add.reduceat(d, off_a, axis=0)
        pair_sums = np.add.reduceat(row_sums, off_b, axis=1)
        counts = a.gram_counts[:, None] * b.gram_counts[None, :]
        hank = np.divide(
            pair_sums, counts, out=np.full(counts.shape, HANKELET_MAX_DIST, dtype=float),
            where=counts > 0,
        )
    else:
        hank = np.full((a.n, b.n), HANKELET_MAX_DIST)
    mph_l1 = np.abs(a.mph[:, None, :] - b.mph[None, :, :]).sum(axis=2) / 5.0
    return w_frame * psi_f + w_traj * (hank + mph_l1)


def _geometry(stream: VideoStream, frame: int) -> tuple[np.ndarray, np.ndarray]:
    cands = stream.candidates[frame]
    centers = np.empty((len(cands), 2))
    sizes = np.empty((len(cands), 2))
    for i, c in enumerate(cands):
        cx, cy = c.box.center()
        centers[i] = (cx / stream.width, cy / stream.height)
        sizes[i] = (c.box.w / stream.width, c.box.h / stream.height)
    return centers, sizes


def _pair_dist(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    dx = pa[:, 0, None] - pb[None, :, 0]
    dy = pa[:, 1, None] - pb[None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


def _intra_table(
    geo_t: tuple[np.ndarray, np.ndarray],
    geo_r: tuple[np.ndarray, np.ndarray],
    adjacent: bool,
    weight: float,
) -> np.ndarray:
    centers_t, sizes_t = geo_t
    centers_r, sizes_r = geo_r
    na, nb = len(centers_t), len(centers_r)
    table = np.zeros((na + 1, nb + 1))
    if na and nb:
        cost = 1.0 - 1.0 / (_pair_dist(centers_t, centers_r) + 1.0)
        if adjacent:
            cost = cost + (1.0 - 1.0 / (_pair_dist(sizes_t, sizes_r) + 1.0))
        table[:na, :nb] = weight * cost
    return table


def build_window_crf(
    streams: list[VideoStream],
    start: int,
    window_length: int,
    features: WindowFeatures,
    config: Config | None = None,
) -> CrfProblem:
    """Assemble the CRF of one window, idle costs included.

    ``features`` must provide frame/trajectory features for every
    candidate of every covered frame (candidate-id order).
    """
    cfg = config or Config()
    T = window_length
    if T < 1:
        raise ValueError("window must cover at least one frame")
    N = len(streams)
    for s in streams:
        if start < 0 or start + T > s.frame_count:
            raise ValueError(f"window [{start}, {start + T}) out of range for video {s.video_id}")

    state_counts = [
        len(streams[n].candidates[start + t]) + 1 for n in range(N) for t in range(T)
    ]
    geos = [[_geometry(streams[n], start + t) for t in range(T)] for n in range(N)]

    edges: list[Edge] = []
    for n in range(N):
        for t, r in itertools.combinations(range(T), 2):
            table = _intra_table(geos[n][t], geos[n][r], adjacent=(r - t == 1), weight=cfg.w_intra)
            edges.append(Edge(node_index(n, t, T), node_index(n, r, T), table))

    for t in range(T):
        f = start + t
        packs = [
            _FramePack(features.frame_features(n, f), features.traj_features(n, f))
            for n in range(N)
        ]
        for n, m in itertools.combinations(range(N), 2):
            na, nb = packs[n].n, packs[m].n
            table = np.zeros((na + 1, nb + 1))
            if na and nb:
                table[:na, :nb] = _inter_block(packs[n], packs[m], cfg.w_frame, cfg.w_traj)
            edges.append(Edge(node_index(n, t, T), node_index(m, t, T), table))

    problem = CrfProblem(n_videos=N, window_length=T, state_counts=state_counts, edges=edges)
    return augment_idle(problem)


def augment_idle(problem: CrfProblem) -> CrfProblem:
    """Fill idle-involving cost entries with the window-wide mean of the
    candidate-candidate entries (intra and inter means kept separate).

    A window with no candidate pairs of one kind gets the mid-range
    neutral value 1 for that kind.
    """
    sums = {True: 0.0, False: 0.0}
    counts = {True: 0, False: 0}
    for e in problem.edges:
        block = e.costs[:-1, :-1]
        kind = problem.is_intra(e)
        sums[kind] += block.sum()
        counts[kind] += block.size
    mu_intra = sums[True] / counts[True] if counts[True] else 1.0
    mu_inter = sums[False] / counts[False] if counts[False] else 1.0

    edges = []
    for e in problem.edges:
        mu = mu_intra if problem.is_intra(e) else mu_inter
        costs = e.costs.copy()
        costs[-1, :] = mu
        costs[:, -1] = mu
        edges.append(Edge(e.a, e.b, costs))
    return CrfProblem(
        n_videos=problem.n_videos,
        window_length=problem.window_length,
        state_counts=list(problem.state_counts),
        edges=edges,
    )


def idle_means(problem: CrfProblem) -> tuple[float, float]:
    """(intra, inter) idle cost levels of an idle-augmented problem."""
    mu = [1.0, 1.0]
    for e in problem.edges:
        if e.costs.shape[0] > 1 or e.costs.shape[1] > 1:
            mu[0 if problem.is_intra(e) else 1] = float(e.costs[-1, -1])
    return mu[0], mu[1]


# ---------------------------------------------------------------------------
# serialization (used by the `solve` subcommand)

def problem_to_json(problem: CrfProblem) -> dict:
    return {
        "n_videos": problem.n_videos,
        "window_length": problem.window_length,
        "state_counts": list(problem.state_counts),
        "edges": [{"a": e.a, "b": e.b, "costs": e.costs.tolist()} for e in problem.edges],
    }


def problem_from_json(obj: dict) -> CrfProblem:
    edges = [
        Edge(int(e["a"]), int(e["b"]), np.asarray(e["costs"], dtype=np.float64))
        for e in obj["edges"]
    ]
    problem = CrfProblem(
        n_videos=int(obj["n_videos"]),
        window_length=int(obj["window_length"]),
        state_counts=[int(s) for s in obj["state_counts"]],
        edges=edges,
    )
    return problem.validate()


def save_problem(problem: CrfProblem, path: Path | str) -> None:
    with open(path, "w") as f:
        json.dump(problem_to_json(problem), f)
        f.write("\n")


def load_problem(path: Path | str) -> CrfProblem:
    with open(path) as f:
        return problem_from_json(json.load(f))
