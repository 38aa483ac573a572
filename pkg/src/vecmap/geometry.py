"""Map-element geometry: instances, resampling, equivalent orderings, Chamfer distance, masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("ped_crossing", "divider", "boundary")
PED_CROSSING, DIVIDER, BOUNDARY = 0, 1, 2
N_CLASSES = len(CLASS_NAMES)


class DegenerateGeometry(ValueError):
    pass


@dataclass(frozen=True)
class PerceptionRange:
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"invalid perception range {self}")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.x_max - self.x_min, self.y_max - self.y_min])


@dataclass
class MapInstance:
    class_id: int
    points: np.ndarray  # N_p x 2, metres
    closed: bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.class_id not in range(N_CLASSES):
            raise ValueError(f"unknown class id {self.class_id}")
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be N x 2, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("instance has non-finite coordinates")

    def __eq__(self, other):
        if not isinstance(other, MapInstance):
            return NotImplemented
        return (self.class_id == other.class_id and self.closed == other.closed
                and np.array_equal(self.points, other.points))


def normalize_points(pts, rng: PerceptionRange):
    return (np.asarray(pts, dtype=np.float64) - rng.lo) / rng.size


def denormalize_points(pts, rng: PerceptionRange):
    return np.asarray(pts, dtype=np.float64) * rng.size + rng.lo


def resample_polyline(raw, n: int, closed: bool = False) -> np.ndarray:
    """Place ``n`` points at equal arclength along ``raw``.

    Open curves keep both endpoints. Closed curves walk the whole perimeter
    starting at ``raw[0]`` and stop one spacing short of returning to it.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if len(raw) < 2:
        raise DegenerateGeometry("need at least 2 points to resample")
    if closed:
        raw = np.vstack([raw, raw[:1]])
    seg = np.linalg.norm(np.diff(raw, axis=0), axis=1)
    total = seg.sum()
    if not total > 0:
        raise DegenerateGeometry("polyline has zero arclength")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if closed:
        targets = np.arange(n) * (total / n)
    else:
        targets = np.linspace(0.0, total, n)
    keep = np.concatenate([[True], seg > 0])  # drop zero-length segments for interp
    cum_k, raw_k = cum[keep], raw[keep]
    x = np.interp(targets, cum_k, raw_k[:, 0])
    y = np.interp(targets, cum_k, raw_k[:, 1])
    return np.stack([x, y], axis=1)


def equivalent_permutations(inst: MapInstance) -> np.ndarray:
    """All orderings of the instance's points that describe the same element.

    Returns ``V x N_p x 2`` with the identity ordering first: 2 variants for
    open polylines, ``2 * N_p`` (every cyclic shift, both directions) for closed ones.
    """
    return permutation_variants(inst.points, inst.closed)


def permutation_variants(pts: np.ndarray, closed: bool) -> np.ndarray:
    pts = np.asarray(pts)
    if not closed:
        return np.stack([pts, pts[::-1]])
    n = len(pts)
    fwd = [np.roll(pts, -s, axis=0) for s in range(n)]
    rev = [np.roll(pts[::-1], -s, axis=0) for s in range(n)]
    return np.stack(fwd + rev)


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs nonempty point sets")
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def point_to_polyline_distance(query: np.ndarray, poly: np.ndarray, closed: bool) -> np.ndarray:
    """Distance from each query point (``... x 2``) to the nearest segment of ``poly``."""
    poly = np.asarray(poly, dtype=np.float64)
    if closed:
        poly = np.vstack([poly, poly[:1]])
    q = np.asarray(query, dtype=np.float64)[..., None, :]
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = (ab * ab).sum(-1)
    t = np.where(denom > 0, ((q - a) * ab).sum(-1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(q - proj, axis=-1).min(axis=-1)


def cell_centers(h: int, w: int, rng: PerceptionRange) -> np.ndarray:
    """Metric centers of an ``h x w`` grid; row index runs along y, column along x."""
    xs = rng.x_min + (np.arange(w) + 0.5) * (rng.x_max - rng.x_min) / w
    ys = rng.y_min + (np.arange(h) + 0.5) * (rng.y_max - rng.y_min) / h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def rasterize_instance_mask(inst: MapInstance, h: int, w: int, rng: PerceptionRange,
                            stroke_width: float = 1.0) -> np.ndarray:
    """Binary ``h x w`` mask of cells whose centers lie within half a stroke of the instance."""
    if stroke_width <= 0:
        raise ValueError("stroke width must be positive")
    d = point_to_polyline_distance(cell_centers(h, w, rng), inst.points, inst.closed)
    return (d <= stroke_width / 2).astype(np.uint8)
