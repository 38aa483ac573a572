"""Set matching between decoder slots and ground truth, and the training loss.

The loss per decoder layer is

    5 * L_pts + 2 * L_cls + 0.005 * L_dir + 3 * L_dense + 3 * (L_ins_seg + L_ref)

with ``L_dense`` carried as a zero term (it needs perspective-view supervision
that the synthetic pipeline does not have). Layers are matched independently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .decoder import LayerPrediction
from .geometry import (MapInstance, PerceptionRange, normalize_points, permutation_variants,
                       rasterize_instance_mask)
from .scene import Scene

TERMS = ("L_pts", "L_cls", "L_dir", "L_dense", "L_ref", "L_ins_seg")


_BIG_COST = 1e30


class CapacityError(ValueError):
    pass


class NoMatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    pts: float = 5.0
    cls: float = 2.0
    dir: float = 0.005
    dense: float = 3.0
    aux: float = 3.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    # matching cost weights mirror the point and class loss weights
    match_cls: float = 2.0
    match_pts: float = 5.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, int]]  # (slot, gt index, permutation variant)
    unmatched: list[int]

    @property
    def slots(self) -> list[int]:
        return [p[0] for p in self.pairs]

    @property
    def gts(self) -> list[int]:
        return [p[1] for p in self.pairs]

    @property
    def variants(self) -> list[int]:
        return [p[2] for p in self.pairs]


@dataclass
class Targets:
    """Ground truth of one scene in the decoder's normalized frame."""
    classes: torch.Tensor  # G (long)
    variants: list[torch.Tensor]  # per GT: V_g x Np x 2, identity first
    masks: torch.Tensor | None  # G x Hm x Wm
    range: PerceptionRange = field(default_factory=PerceptionRange)

    def __len__(self):
        return len(self.variants)


def build_targets(instances: list[MapInstance] | Scene, rng: PerceptionRange | None = None,
                  grid_hw: tuple[int, int] | None = None, stroke_width: float = 1.0,
                  dtype: torch.dtype = torch.float32) -> Targets:
    if isinstance(instances, Scene):
        rng = instances.range if rng is None else rng
        instances = instances.instances
    rng = rng or PerceptionRange()
    variants = [torch.as_tensor(permutation_variants(normalize_points(i.points, rng), i.closed),
                                dtype=dtype) for i in instances]
    classes = torch.tensor([i.class_id for i in instances], dtype=torch.long)
    masks = None
    if grid_hw is not None:
        h, w = grid_hw
        hm, wm = max(h // 4, 1), max(w // 4, 1)
        if instances:
            full = np.stack([rasterize_instance_mask(i, h, w, rng, stroke_width) for i in instances])
            masks = F.adaptive_max_pool2d(torch.as_tensor(full, dtype=dtype), (hm, wm))
        else:
            masks = torch.zeros((0, hm, wm), dtype=dtype)
    return Targets(classes=classes, variants=variants, masks=masks, range=rng)


def point_cost(points: torch.Tensor, variants: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean L1 (over points and coordinates) to every variant; min and argmin over variants.

    ``points``: Nq x Np x 2, ``variants``: V x Np x 2 -> (Nq,), (Nq,).
    """
    d = (points[:, None] - variants[None]).abs().mean(dim=(2, 3))
    best = d.min(dim=1)
    return best.values, best.indices


def matching_cost(logits: torch.Tensor, points: torch.Tensor, gt_class: int, variants: torch.Tensor,
                  weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, torch.Tensor]:
    """Cost of assigning each slot to one GT instance, plus the best permutation per slot."""
    prob = torch.softmax(logits, dim=-1)[..., gt_class]
    pts, idx = point_cost(points, variants)
    return weights.match_cls * -prob + weights.match_pts * pts, idx


def cost_matrix(pred: LayerPrediction, targets: Targets,
                weights: LossWeights = LossWeights()) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        nq = pred.logits.shape[0]
        cost = np.zeros((nq, len(targets)))
        best = np.zeros((nq, len(targets)), dtype=np.int64)
        for g, (cls, var) in enumerate(zip(targets.classes.tolist(), targets.variants)):
            c, idx = matching_cost(pred.logits, pred.points, cls, var.to(pred.points.dtype), weights)
            cost[:, g] = c.double().numpy()
            best[:, g] = idx.numpy()
    return cost, best


def hungarian_match(cost: np.ndarray, variants: np.ndarray | None = None) -> MatchResult:
    """Minimum-cost assignment covering every GT column.

    Non-finite costs (from diverged predictions) are treated as prohibitively
    expensive so the assignment still completes and the loss can report them.
    """
    cost = np.nan_to_num(np.asarray(cost, dtype=np.float64), nan=_BIG_COST, posinf=_BIG_COST, neginf=-_BIG_COST)
    nq, g = cost.shape
    if g > nq:
        raise CapacityError(f"{g} ground-truth instances exceed {nq} prediction slots")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    rows, cols = rows[order], cols[order]
    pairs = [(int(r), int(c), int(variants[r, c]) if variants is not None else 0)
             for r, c in zip(rows, cols)]
    matched = set(int(r) for r in rows)
    return MatchResult(pairs=pairs, unmatched=[i for i in range(nq) if i not in matched])


def match_layer(pred: LayerPrediction, targets: Targets,
                weights: LossWeights = LossWeights()) -> MatchResult:
    if len(targets) == 0:
        return MatchResult(pairs=[], unmatched=list(range(pred.logits.shape[0])))
    cost, best = cost_matrix(pred, targets, weights)
    return hungarian_match(cost, best)


def matched_targets(match: MatchResult, targets: Targets, dtype=torch.float32) -> torch.Tensor:
    """Point targets (K x Np x 2) in the permutation chosen during matching."""
    if not match.pairs:
        n_pts = targets.variants[0].shape[1] if targets.variants else 0
        return torch.zeros((0, n_pts, 2), dtype=dtype)
    return torch.stack([targets.variants[g][v] for _, g, v in match.pairs]).to(dtype)


def _no_match(name: str, like: torch.Tensor) -> torch.Tensor:
    warnings.warn(f"{name}: no matched instances, returning 0", NoMatchWarning, stacklevel=3)
    return like.sum() * 0.0


def point_loss(points: torch.Tensor, match: MatchResult, targets: Targets) -> torch.Tensor:
    if not match.pairs:
        return _no_match("point_loss", points)
    tgt = matched_targets(match, targets, points.dtype)
    return (points[match.slots] - tgt).abs().mean()


def reference_point_loss(ref_in: torch.Tensor, match: MatchResult, targets: Targets) -> torch.Tensor:
    """L1 between the reference points a layer sampled around and its matched GT."""
    if not match.pairs:
        return _no_match("reference_point_loss", ref_in)
    tgt = matched_targets(match, targets, ref_in.dtype)
    return (ref_in[match.slots] - tgt).abs().mean()


def direction_loss(points: torch.Tensor, match: MatchResult, targets: Targets) -> torch.Tensor:
    """Mean ``1 - cos`` between predicted and GT edge vectors, measured in metres."""
    if not match.pairs:
        return _no_match("direction_loss", points)
    scale = torch.as_tensor(targets.range.size, dtype=points.dtype)
    pred_e = torch.diff(points[match.slots], dim=1) * scale
    gt_e = torch.diff(matched_targets(match, targets, points.dtype), dim=1) * scale
    pn, gn = pred_e.norm(dim=-1), gt_e.norm(dim=-1)
    valid = (pn > 0) & (gn > 0)
    cos = (pred_e * gt_e).sum(-1) / (pn * gn).clamp_min(1e-12)
    return torch.where(valid, 1.0 - cos, torch.zeros_like(cos)).mean()


def focal_loss(logits: torch.Tensor, target: torch.Tensor, alpha: float = 0.25,
               gamma: float = 2.0) -> torch.Tensor:
    """Elementwise sigmoid focal loss against a {0,1} target of the same shape."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = alpha * target + (1 - alpha) * (1 - target)
    return alpha_t * (1 - p_t) ** gamma * ce


def classification_loss(logits: torch.Tensor, match: MatchResult, targets: Targets,
                        weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Focal loss over every slot; unmatched slots target background (all zeros)."""
    target = torch.zeros_like(logits)
    if match.pairs:
        target[match.slots, targets.classes[match.gts]] = 1.0
    loss = focal_loss(logits, target, weights.focal_alpha, weights.focal_gamma).sum()
    return loss / max(1, len(match.pairs))


def dice_loss(prob: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Per-mask ``1 - (2|P.T| + s) / (|P| + |T| + s)`` over the trailing two axes."""
    inter = (prob * target).sum(dim=(-2, -1))
    denom = prob.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def instance_seg_loss(mask_logits: torch.Tensor, match: MatchResult, targets: Targets,
                      weights: LossWeights = LossWeights()) -> torch.Tensor:
    """BCE (mean per cell) plus dice, averaged over matched slots only."""
    if not match.pairs:
        return _no_match("instance_seg_loss", mask_logits)
    logit = mask_logits[match.slots]
    tgt = targets.masks[match.gts].to(logit.dtype)
    bce = F.binary_cross_entropy_with_logits(logit, tgt, reduction="none").mean(dim=(-2, -1))
    dice = dice_loss(torch.sigmoid(logit), tgt, weights.dice_smooth)
    return (bce + dice).mean()


@dataclass
class LossBreakdown:
    per_layer: list[dict[str, float]]
    matches: list[MatchResult]

    def summed(self) -> dict[str, float]:
        return {t: sum(layer[t] for layer in self.per_layer) for t in TERMS}


def combine(terms: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    return (weights.pts * terms["L_pts"] + weights.cls * terms["L_cls"] + weights.dir * terms["L_dir"]
            + weights.dense * terms["L_dense"] + weights.aux * (terms["L_ins_seg"] + terms["L_ref"]))


def layer_terms(pred: LayerPrediction, match: MatchResult, targets: Targets,
                weights: LossWeights) -> dict[str, torch.Tensor]:
    zero = pred.points.sum() * 0.0
    if not match.pairs:
        terms = {t: zero for t in TERMS}
        terms["L_cls"] = classification_loss(pred.logits, match, targets, weights)
        return terms
    return {
        "L_pts": point_loss(pred.points, match, targets),
        "L_cls": classification_loss(pred.logits, match, targets, weights),
        "L_dir": direction_loss(pred.points, match, targets),
        "L_dense": zero,
        "L_ref": reference_point_loss(pred.ref_in, match, targets),
        "L_ins_seg": (instance_seg_loss(pred.mask_logits, match, targets, weights)
                      if pred.mask_logits is not None and targets.masks is not None else zero),
    }


def total_loss(preds: list[LayerPrediction], targets: Targets, weights: LossWeights = LossWeights(),
               matches: list[MatchResult] | None = None) -> tuple[torch.Tensor, LossBreakdown]:
    """Deeply supervised loss: every layer is matched and weighted independently, then summed.

    Pass ``matches`` to hold the assignment fixed (gradient checks do this).
    """
    if matches is None:
        matches = [match_layer(p, targets, weights) for p in preds]
    total = preds[0].points.sum() * 0.0
    per_layer = []
    for pred, match in zip(preds, matches):
        terms = layer_terms(pred, match, targets, weights)
        total = total + combine(terms, weights)
        per_layer.append({k: float(v.detach()) for k, v in terms.items()})
    return total, LossBreakdown(per_layer=per_layer, matches=matches)
