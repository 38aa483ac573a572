"""Chamfer-distance average precision over map classes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CLASS_NAMES, N_CLASSES, MapInstance, PerceptionRange, chamfer_distance, denormalize_points
from .scene import Scene

THRESHOLDS = (0.5, 1.0, 1.5)


@dataclass
class Detection:
    class_id: int
    points: np.ndarray  # Np x 2, metres
    score: float
    scene: int = 0  # index into the evaluated scene list

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass
class ApReport:
    ap: dict[int, dict[float, float | None]]  # class -> threshold -> AP (None: undefined)
    class_ap: dict[int, float | None]
    mAP: float
    thresholds: tuple[float, ...] = THRESHOLDS

    def table(self) -> str:
        head = f"{'class':<14}" + "".join(('AP@%.1f' % t).rjust(9) for t in self.thresholds) + f"{'AP':>9}"
        rows = [head]
        for c in range(N_CLASSES):
            cells = "".join(f"{_fmt(self.ap[c][t]):>9}" for t in self.thresholds)
            rows.append(f"{CLASS_NAMES[c]:<14}{cells}{_fmt(self.class_ap[c]):>9}")
        rows.append(f"{'mAP':<14}{'':>{9 * len(self.thresholds)}}{_fmt(self.mAP):>9}")
        return "\n".join(rows) + "\n"

    def key_values(self) -> str:
        lines = []
        for c in range(N_CLASSES):
            for t in self.thresholds:
                lines.append(f"AP_{CLASS_NAMES[c]}@{t:.1f} = {_fmt(self.ap[c][t])}")
            lines.append(f"AP_{CLASS_NAMES[c]} = {_fmt(self.class_ap[c])}")
        lines.append(f"mAP = {_fmt(self.mAP)}")
        return "\n".join(lines) + "\n"


def _fmt(v: float | None) -> str:
    return "nan" if v is None else f"{v:.4f}"


def greedy_threshold_match(dets: list[np.ndarray], gts: list[np.ndarray], tau: float) -> list[bool]:
    """TP flags for detections already sorted by descending score.

    Each detection claims the nearest still-unclaimed GT when their Chamfer
    distance is below ``tau``.
    """
    if tau <= 0:
        raise ValueError("threshold must be positive")
    dist = np.array([[chamfer_distance(d, g) for g in gts] for d in dets]).reshape(len(dets), len(gts))
    return _greedy_flags(dist, tau)


def _greedy_flags(dist: np.ndarray, tau: float) -> list[bool]:
    claimed = np.zeros(dist.shape[1], dtype=bool)
    flags = []
    for row in dist:
        free = np.where(claimed, np.inf, row)
        if free.size and free.min() < tau:
            claimed[int(free.argmin())] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags, n_gt: int) -> float | None:
    """All-point interpolated area under the precision/recall curve.

    ``flags`` are TP booleans in descending score order. Returns None when
    there is nothing to evaluate (no GT, no detections).
    """
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[flags].sum() / n_gt)


def evaluate(dets: list[Detection], scenes: list[Scene] | list[list[MapInstance]],
             thresholds: tuple[float, ...] = THRESHOLDS) -> ApReport:
    """Per-class AP at each threshold, pooled over scenes; mAP over classes."""
    gt_lists = [s.instances if isinstance(s, Scene) else s for s in scenes]
    for d in dets:
        if d.class_id not in range(N_CLASSES):
            raise ValueError(f"unknown class id {d.class_id}")
        if not 0 <= d.scene < len(gt_lists):
            raise ValueError(f"detection refers to scene {d.scene}, only {len(gt_lists)} given")

    ap: dict[int, dict[float, float | None]] = {}
    class_ap: dict[int, float | None] = {}
    for c in range(N_CLASSES):
        cdets = [d for d in dets if d.class_id == c]
        order = sorted(range(len(cdets)), key=lambda i: -cdets[i].score)
        cdets = [cdets[i] for i in order]
        gts = [[g.points for g in gl if g.class_id == c] for gl in gt_lists]
        n_gt = sum(len(g) for g in gts)
        by_scene: dict[int, list[int]] = {}
        for i, d in enumerate(cdets):
            by_scene.setdefault(d.scene, []).append(i)
        dist = {s: np.array([[chamfer_distance(cdets[i].points, g) for g in gts[s]] for i in idx])
                .reshape(len(idx), len(gts[s])) for s, idx in by_scene.items()}
        ap[c] = {}
        for tau in thresholds:
            # greedy claiming only interacts within a scene, so match scene by scene
            flags = [False] * len(cdets)
            for s, idx in by_scene.items():
                for i, f in zip(idx, _greedy_flags(dist[s], tau)):
                    flags[i] = f
            ap[c][tau] = average_precision(flags, n_gt)
        vals = [v for v in ap[c].values() if v is not None]
        class_ap[c] = float(np.mean(vals)) if vals else None
    defined = [v for v in class_ap.values() if v is not None]
    return ApReport(ap=ap, class_ap=class_ap, mAP=float(np.mean(defined)) if defined else 0.0,
                    thresholds=tuple(thresholds))


def detections_from_prediction(logits: torch.Tensor, points: torch.Tensor, rng: PerceptionRange,
                               scene: int = 0, score_threshold: float = 0.0) -> list[Detection]:
    """One detection per slot: class = argmax, score = max foreground sigmoid probability."""
    with torch.no_grad():
        prob = torch.sigmoid(logits.double())
        score, cls = prob.max(dim=-1)
        pts = denormalize_points(points.double().numpy(), rng)
    return [Detection(int(c), pts[i].astype(np.float32), float(s), scene)
            for i, (s, c) in enumerate(zip(score.tolist(), cls.tolist())) if s >= score_threshold]


def detections_from_ground_truth(scenes: list[Scene]) -> list[Detection]:
    return [Detection(g.class_id, g.points, 1.0, si) for si, s in enumerate(scenes) for g in s.instances]
