"""Procedural road scenes and the multi-scale BEV feature grids rendered from them."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .geometry import (BOUNDARY, DIVIDER, N_CLASSES, PED_CROSSING, DegenerateGeometry, MapInstance,
                       PerceptionRange, cell_centers, point_to_polyline_distance, resample_polyline)
from .numerics import ConfigError

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox-4x64 counter generator keyed by SplitMix64 outputs of (seed, stream)."""
    state = (int(seed) ^ ((int(stream) * 0xD1B54A32D192ED03) & _MASK64)) & _MASK64
    state, k0 = splitmix64(state)
    _, k1 = splitmix64(state)
    return np.random.Generator(np.random.Philox(key=np.array([k0, k1], dtype=np.uint64)))


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 10
    range: PerceptionRange = field(default_factory=PerceptionRange)
    max_instances: int = 8
    crossings: bool = True
    dividers: bool = True
    boundaries: bool = True
    lanes_min: int = 2
    lanes_max: int = 3
    lane_width_min: float = 3.0
    lane_width_max: float = 3.75
    center_offset_max: float = 3.0
    heading_max: float = 0.08  # rad
    curvature_max: float = 0.004  # 1/m
    crossings_max: int = 2
    sidewalk_prob: float = 0.5
    min_length: float = 6.0  # metres; shorter clipped pieces are dropped

    def validate(self):
        if not (self.crossings or self.dividers or self.boundaries):
            raise ConfigError("scene config enables no map classes")
        if self.n_points < 2:
            raise ConfigError("instances need at least 2 points")
        if self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")
        if not 1 <= self.lanes_min <= self.lanes_max:
            raise ConfigError("need 1 <= lanes_min <= lanes_max")
        if self.dividers and not self.boundaries and self.lanes_max < 2:
            raise ConfigError("dividers need at least 2 lanes")


@dataclass
class Scene:
    seed: int
    instances: list[MapInstance]
    range: PerceptionRange = field(default_factory=PerceptionRange)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.seed == other.seed and self.range == other.range
                and len(self.instances) == len(other.instances)
                and all(a == b for a, b in zip(self.instances, other.instances)))


@dataclass
class FeatureGrid:
    full: torch.Tensor  # C x H x W
    half: torch.Tensor  # C x H/2 x W/2
    range: PerceptionRange

    @property
    def scales(self) -> list[torch.Tensor]:
        return [self.full, self.half]

    def flatten(self) -> torch.Tensor:
        """Multi-scale tokens: ``C x (H*W + H/2*W/2)``, full grid first."""
        c = self.full.shape[0]
        return torch.cat([self.full.reshape(c, -1), self.half.reshape(c, -1)], dim=1)

    def to(self, dtype: torch.dtype) -> "FeatureGrid":
        return FeatureGrid(self.full.to(dtype), self.half.to(dtype), self.range)


def _clip_to_range(pts: np.ndarray, rng: PerceptionRange) -> np.ndarray | None:
    """Longest contiguous run of ``pts`` inside the range, or None."""
    inside = ((pts[:, 0] >= rng.x_min) & (pts[:, 0] <= rng.x_max)
              & (pts[:, 1] >= rng.y_min) & (pts[:, 1] <= rng.y_max))
    best, start = None, None
    for i, ok in enumerate(np.append(inside, False)):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            if best is None or i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    if best is None or best[1] - best[0] < 2:
        return None
    return pts[best[0]:best[1]]


def _open_instance(cls: int, dense: np.ndarray, cfg: SceneConfig) -> MapInstance | None:
    piece = _clip_to_range(dense, cfg.range)
    if piece is None:
        return None
    if np.linalg.norm(np.diff(piece, axis=0), axis=1).sum() < cfg.min_length:
        return None
    try:
        pts = resample_polyline(piece, cfg.n_points, closed=False)
    except DegenerateGeometry:
        return None
    return MapInstance(cls, pts, closed=False)


def generate_scene(seed: int, cfg: SceneConfig | None = None) -> Scene:
    """A straight-to-gently-curved road along y with dividers, edges and crossings.

    Dividers and boundaries are lateral offsets of one quadratic center curve;
    crossings are rectangles spanning the carriageway. Deterministic in ``seed``.
    """
    cfg = cfg or SceneConfig()
    cfg.validate()
    r = make_rng(seed, stream=0)
    rng = cfg.range

    x0 = r.uniform(-cfg.center_offset_max, cfg.center_offset_max)
    heading = r.uniform(-cfg.heading_max, cfg.heading_max)
    curv = r.uniform(-cfg.curvature_max, cfg.curvature_max)
    n_lanes = int(r.integers(cfg.lanes_min, cfg.lanes_max + 1))
    lane_w = r.uniform(cfg.lane_width_min, cfg.lane_width_max)
    half_w = 0.5 * n_lanes * lane_w
    sidewalk = r.uniform() < cfg.sidewalk_prob
    sidewalk_side = 1.0 if r.uniform() < 0.5 else -1.0
    sidewalk_w = r.uniform(2.0, 4.0)
    n_cross = int(r.integers(0, cfg.crossings_max + 1))
    cross_y = r.uniform(-22.0, 22.0, size=cfg.crossings_max)
    cross_d = r.uniform(3.0, 5.0, size=cfg.crossings_max)

    ys = np.linspace(rng.y_min, rng.y_max, 241)

    def center(y):
        return x0 + np.tan(heading) * y + 0.5 * curv * y * y

    def curve(offset):
        return np.stack([center(ys) + offset, ys], axis=1)

    instances: list[MapInstance] = []
    if cfg.boundaries:
        offsets = [-half_w, half_w]
        if sidewalk:
            offsets.append(sidewalk_side * (half_w + sidewalk_w))
        for off in offsets:
            inst = _open_instance(BOUNDARY, curve(off), cfg)
            if inst is not None:
                instances.append(inst)
    if cfg.dividers:
        for i in range(1, n_lanes):
            inst = _open_instance(DIVIDER, curve(-half_w + i * lane_w), cfg)
            if inst is not None:
                instances.append(inst)
    if cfg.crossings:
        placed: list[float] = []
        for yc, depth in zip(cross_y[:n_cross], cross_d[:n_cross]):
            if any(abs(yc - p) < 10.0 for p in placed):
                continue
            placed.append(yc)
            xc = center(yc)
            corners = np.array([[xc - half_w, yc - depth / 2], [xc + half_w, yc - depth / 2],
                                [xc + half_w, yc + depth / 2], [xc - half_w, yc + depth / 2]])
            corners[:, 0] = np.clip(corners[:, 0], rng.x_min, rng.x_max)
            pts = resample_polyline(corners, cfg.n_points, closed=True)
            instances.append(MapInstance(PED_CROSSING, pts, closed=True))

    if not instances:
        # every clipped piece was too short; fall back to a straight centre element
        if cfg.dividers or cfg.boundaries:
            straight = np.stack([np.zeros_like(ys), ys], axis=1)
            instances.append(_open_instance(DIVIDER if cfg.dividers else BOUNDARY, straight, cfg))
        else:
            box = [[-5.0, -2.0], [5.0, -2.0], [5.0, 2.0], [-5.0, 2.0]]
            instances.append(MapInstance(PED_CROSSING, resample_polyline(box, cfg.n_points, True), True))
    return Scene(seed=int(seed), instances=instances[: cfg.max_instances], range=rng)


def class_distance_fields(scene: Scene, h: int, w: int) -> np.ndarray:
    """Per-class distance (metres) from each cell center to the nearest instance; inf if none."""
    centers = cell_centers(h, w, scene.range)
    out = np.full((N_CLASSES, h, w), np.inf)
    for inst in scene.instances:
        d = point_to_polyline_distance(centers, inst.points, inst.closed)
        out[inst.class_id] = np.minimum(out[inst.class_id], d)
    return out


def render_bev_features(scene: Scene, c: int = 32, h: int = 100, w: int = 50,
                        noise_level: float = 0.1, stroke_width: float = 1.0,
                        blur_sigma: float = 1.0, distance_clip: float = 5.0) -> FeatureGrid:
    """Synthetic stand-in for an encoder's BEV output.

    Channels 0-2: blurred per-class stroke raster. Channels 3-5: per-class
    distance to the nearest element, clipped at ``distance_clip`` and scaled so
    the ceiling is 1. Channels 6+: Gaussian noise seeded from the scene seed.
    """
    if c < 6:
        raise ConfigError(f"need at least 6 feature channels, got {c}")
    if h % 2 or w % 2:
        raise ConfigError(f"grid dims must be even, got {h} x {w}")
    dist = class_distance_fields(scene, h, w)
    feats = np.zeros((c, h, w), dtype=np.float32)
    for k in range(N_CLASSES):
        stroke = (dist[k] <= stroke_width / 2).astype(np.float64)
        feats[k] = gaussian_filter(stroke, blur_sigma, mode="constant")
        feats[N_CLASSES + k] = np.minimum(dist[k], distance_clip) / distance_clip
    if c > 6 and noise_level > 0:
        noise = make_rng(scene.seed, stream=1).standard_normal((c - 6, h, w), dtype=np.float32)
        feats[6:] = np.float32(noise_level) * noise
    # 2x2 mean pool accumulated in float64 so the result does not depend on summation order
    f64 = feats.astype(np.float64)
    half = (f64[:, 0::2, 0::2] + f64[:, 1::2, 0::2] + f64[:, 0::2, 1::2] + f64[:, 1::2, 1::2]) / 4
    full = torch.from_numpy(feats)
    half = torch.from_numpy(half.astype(np.float32))
    return FeatureGrid(full, half, scene.range)


class SceneParseError(ValueError):
    pass


def _fmt(v) -> str:
    return str(np.float32(v))


def save_scene(scene: Scene, path: str | os.PathLike) -> None:
    r = scene.range
    n_pts = len(scene.instances[0].points) if scene.instances else 0
    lines = [f"seed {scene.seed} range {_fmt(r.x_min)} {_fmt(r.x_max)} {_fmt(r.y_min)} {_fmt(r.y_max)}"
             f" points {n_pts}"]
    for inst in scene.instances:
        coords = " ".join(_fmt(v) for v in inst.points.reshape(-1))
        lines.append(f"{inst.class_id} {int(inst.closed)} {coords}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_scene(path: str | os.PathLike) -> Scene:
    with open(path) as f:
        text = f.read()
    return parse_scene(text, source=str(path))


def parse_scene(text: str, source: str = "<string>") -> Scene:
    lines = text.splitlines()
    if not lines:
        raise SceneParseError(f"{source}:1: empty scene file")

    def fail(lineno, msg):
        raise SceneParseError(f"{source}:{lineno}: {msg}")

    head = lines[0].split()
    if len(head) != 9 or head[0] != "seed" or head[2] != "range" or head[7] != "points":
        fail(1, "expected header 'seed <int> range <xmin> <xmax> <ymin> <ymax> points <n>'")
    try:
        seed = int(head[1])
        rng = PerceptionRange(*(float(np.float32(v)) for v in head[3:7]))
        n_pts = int(head[8])
    except ValueError as e:
        fail(1, f"bad header: {e}")
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if len(tok) < 2:
            fail(lineno, "truncated record")
        try:
            cls, closed = int(tok[0]), int(tok[1])
        except ValueError:
            fail(lineno, f"bad class/closed fields {tok[:2]}")
        if cls not in range(N_CLASSES):
            fail(lineno, f"unknown class id {cls}")
        if closed not in (0, 1):
            fail(lineno, f"closed flag must be 0 or 1, got {closed}")
        vals = tok[2:]
        if len(vals) != 2 * n_pts:
            fail(lineno, f"truncated record: expected {2 * n_pts} coordinates, got {len(vals)}")
        try:
            pts = np.array([np.float32(v) for v in vals], dtype=np.float32).reshape(n_pts, 2)
        except ValueError as e:
            fail(lineno, f"bad coordinate: {e}")
        if not np.isfinite(pts).all():
            fail(lineno, "non-finite coordinate")
        instances.append(MapInstance(cls, pts, bool(closed)))
    return Scene(seed=seed, instances=instances, range=rng)
