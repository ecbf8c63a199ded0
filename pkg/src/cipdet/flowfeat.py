"""Frame-based motion features for one candidate box.

The descriptor of a candidate is built from its *relative* optical flow
(in-box flow minus the mean flow of the surrounding ring, which removes
camera ego-motion), summarized over a 4-scale vertical pyramid of the
bounding box: a 5-direction flow histogram per pyramid box (75 values)
and per-box magnitude statistics (60 values).

Directions are quantized so that horizontally mirrored motion maps to
the same bin: the 8 compass sectors are merged pairwise (W into E, NW
into NE, SW into SE), leaving {E, NE, N, SE, S}.  A person walking left
and the same person seen walking right from the opposite side therefore
produce identical histograms, while vertical motion keeps its sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import BBox, FlowRaster, pixel_bounds, round_px

PYRAMID_BOXES = 15  # 1 + 2 + 4 + 8 vertical bands over 4 scales
HOF_DIM = 5 * PYRAMID_BOXES
MAG_DIM = 4 * PYRAMID_BOXES

# output bin order: E, NE, N, SE, S
_BIN_LUT = np.array([4, 3, 0, 1, 2])  # from digitize order S, SE, E, NE, N
_BIN_EDGES = np.array([-67.5, -22.5, 22.5, 67.5])


@dataclass
class FrameFeature:
    """75-dim direction histogram plus 60-dim magnitude statistics.

    ``mag_norm`` caches the standardized magnitude vector for fast
    correlation; it is None when the vector has zero variance.
    """

    hof: np.ndarray
    mag: np.ndarray
    mag_norm: np.ndarray | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        std = self.mag.std()
        if std > 0.0:
            self.mag_norm = (self.mag - self.mag.mean()) / std


def merged_direction_bins(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Map motion vectors to the 5 merged direction bins (E, NE, N, SE, S).

    Screen-up motion (negative v) is North.  Computed from (|u|, -v) so
    the mapping is exactly invariant to flipping the sign of u.
    """
    ang = np.degrees(np.arctan2(-v, np.abs(u)))
    return _BIN_LUT[np.digitize(ang, _BIN_EDGES)]


def hof5(flow_patch: np.ndarray) -> np.ndarray:
    """Magnitude-weighted 5-bin direction histogram, L1-normalized.

    An all-zero patch yields the all-zero vector (not uniform), so static
    regions match static regions at zero cost.
    """
    vec = np.asarray(flow_patch, dtype=np.float64).reshape(-1, 2)
    if vec.size == 0:
        return np.zeros(5)
    u, v = vec[:, 0], vec[:, 1]
    mag = np.hypot(u, v)
    hist = np.bincount(merged_direction_bins(u, v), weights=mag, minlength=5)
    total = hist.sum()
    if total > 0:
        hist /= total
    return hist


def relative_flow(flow: FlowRaster, box: BBox) -> np.ndarray:
    """Flow inside the box minus the mean flow of the surrounding ring.

    The ring lies between the box and the box dilated by 50% per side,
    clipped to the frame.  An empty clipped ring subtracts nothing.
    """
    x0, x1, y0, y1 = pixel_bounds(box, flow.width, flow.height)
    if x0 >= x1 or y0 >= y1:
        if not box.intersects_frame(flow.width, flow.height):
            raise ValueError("box does not intersect the flow raster")
        # sub-pixel sliver: fall back to the single pixel it touches
        if x0 >= x1:
            x0 = min(max(int(box.x), 0), flow.width - 1)
            x1 = x0 + 1
        if y0 >= y1:
            y0 = min(max(int(box.y), 0), flow.height - 1)
            y1 = y0 + 1
    inside = flow.data[y0:y1, x0:x1].astype(np.float64)

    dilated = BBox(box.x - 0.5 * box.w, box.y - 0.5 * box.h, 2.0 * box.w, 2.0 * box.h)
    dx0, dx1, dy0, dy1 = pixel_bounds(dilated, flow.width, flow.height)
    outer = flow.data[dy0:dy1, dx0:dx1].astype(np.float64)
    ring_count = outer.shape[0] * outer.shape[1] - inside.shape[0] * inside.shape[1]
    if ring_count > 0:
        ring_sum = outer.sum(axis=(0, 1)) - inside.sum(axis=(0, 1))
        return inside - ring_sum / ring_count
    return inside


def _split_heights(h: int) -> tuple[int, int]:
    top = (h + 1) // 2  # odd heights: upper band gets the extra pixel
    return top, h - top


def pyramid_boxes(box: BBox) -> list[BBox]:
    """The box plus 3 rounds of vertical halving: 15 boxes, scale-major,
    top-to-bottom within each scale, on the integer pixel grid."""
    y0 = round_px(box.y)
    h = round_px(box.y + box.h) - y0
    bands = [(y0, h)]
    out = [(y0, h)]
    for _ in range(3):
        nxt = []
        for (y, bh) in bands:
            top, bot = _split_heights(bh)
            nxt.append((y, top))
            nxt.append((y + top, bot))
        out.extend(nxt)
        bands = nxt
    return [BBox(box.x, float(y), box.w, float(bh)) for y, bh in out]


def _band_rows(h: int) -> list[tuple[int, int]]:
    """Row ranges of the 15 pyramid bands for a patch of height h."""
    bands = [(0, h)]
    out = [(0, h)]
    for _ in range(3):
        nxt = []
        for (y, bh) in bands:
            top, bot = _split_heights(bh)
            nxt.append((y, top))
            nxt.append((y + top, bot))
        out.extend(nxt)
        bands = nxt
    return [(y, y + bh) for y, bh in out]


def frame_feature(flow: FlowRaster, box: BBox) -> FrameFeature:
    """Compute the (75, 60) frame descriptor of a candidate box.

    Band statistics come from row-wise cumulative sums, so the cost does
    not grow with the number of pyramid boxes.
    """
    rel = relative_flow(flow, box)
    h, w = rel.shape[:2]
    u, v = rel[:, :, 0], rel[:, :, 1]
    weight = np.hypot(u, v)
    bins = merged_direction_bins(u, v)

    rows = np.repeat(np.arange(h), w)
    row_hist = np.bincount(rows * 5 + bins.ravel(), weights=weight.ravel(), minlength=h * 5)
    cs_hist = np.zeros((h + 1, 5))
    np.cumsum(row_hist.reshape(h, 5), axis=0, out=cs_hist[1:])

    au, av = np.abs(u), np.abs(v)
    row_stats = np.column_stack(
        [au.sum(axis=1), av.sum(axis=1), (au * au).sum(axis=1), (av * av).sum(axis=1)]
    )
    cs_stats = np.zeros((h + 1, 4))
    np.cumsum(row_stats, axis=0, out=cs_stats[1:])

    hof = np.zeros(HOF_DIM)
    mag = np.zeros(MAG_DIM)
    for i, (r0, r1) in enumerate(_band_rows(h)):
        count = (r1 - r0) * w
        if count <= 0:
            continue
        hist = cs_hist[r1] - cs_hist[r0]
        total = hist.sum()
        if total > 0:
            hof[5 * i : 5 * i + 5] = hist / total
        su, sv, suu, svv = cs_stats[r1] - cs_stats[r0]
        mu, mv = su / count, sv / count
        mag[4 * i + 0] = mu
        mag[4 * i + 1] = mv
        mag[4 * i + 2] = math.sqrt(max(suu / count - mu * mu, 0.0))
        mag[4 * i + 3] = math.sqrt(max(svv / count - mv * mv, 0.0))
    return FrameFeature(hof=hof, mag=mag)


def psi_frame(a: FrameFeature, b: FrameFeature) -> float:
    """Frame-based matching energy between two candidates, in [0, 2).

    L1 distance on the direction histograms plus a correlation-based
    dissimilarity of the magnitude statistics (correlation rather than a
    plain distance, because viewing angle rescales flow magnitudes).
    A zero-variance magnitude vector correlates 1 with an identical one
    and 0 with anything else.
    """
    l1 = np.abs(a.hof - b.hof).sum()
    if a.mag_norm is None or b.mag_norm is None:
        corr = 1.0 if np.array_equal(a.mag, b.mag) else 0.0
    else:
        corr = min(max(float(a.mag_norm @ b.mag_norm) / a.mag.size, -1.0), 1.0)
    return float((1.0 - math.exp(-l1)) + (1.0 - corr) / 2.0)
