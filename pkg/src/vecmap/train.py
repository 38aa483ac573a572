"""Training and inference loops."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .assignment import TERMS, Targets, build_targets, total_loss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .decoder import Decoder, LayerPrediction
from .evaluate import ApReport, Detection, detections_from_prediction, evaluate
from .numerics import AdamW
from .scene import FeatureGrid, Scene, make_rng, render_bev_features

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "total", "L_pts", "L_cls", "L_dir", "L_ref", "L_ins_seg")


class TrainingDiverged(FloatingPointError):
    pass


def build_model(cfg: RunConfig) -> Decoder:
    torch.manual_seed(cfg.seed)
    return Decoder(cfg.decoder_config())


def features_for(scene: Scene, cfg: RunConfig) -> FeatureGrid:
    return render_bev_features(scene, cfg.feat_channels, cfg.grid_h, cfg.grid_w, cfg.noise_level,
                               stroke_width=cfg.stroke_width)


def learning_rate(cfg: RunConfig, it: int) -> float:
    """Linear warmup, then constant or cosine decay to 1% of the base rate."""
    if cfg.warmup and it < cfg.warmup:
        return cfg.lr * (it + 1) / cfg.warmup
    if cfg.lr_schedule == "constant" or cfg.iterations <= cfg.warmup:
        return cfg.lr
    t = (it - cfg.warmup) / max(1, cfg.iterations - cfg.warmup)
    return cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0))))


def scene_order(n_scenes: int, seed: int, epoch: int) -> list[int]:
    return [int(i) for i in make_rng(seed, stream=1000 + epoch).permutation(n_scenes)]


@dataclass
class SceneCache:
    cfg: RunConfig
    scenes: list[Scene]
    _items: dict[int, tuple[FeatureGrid, Targets]] = field(default_factory=dict)

    def __getitem__(self, i: int) -> tuple[FeatureGrid, Targets]:
        if i not in self._items:
            s = self.scenes[i]
            self._items[i] = (features_for(s, self.cfg),
                              build_targets(s, grid_hw=(self.cfg.grid_h, self.cfg.grid_w),
                                            stroke_width=self.cfg.stroke_width))
        return self._items[i]


@dataclass
class TrainResult:
    model: Decoder
    optimizer: AdamW
    log_lines: list[str]
    iteration: int


def format_log_line(it: int, total: float, terms: dict[str, float]) -> str:
    return " ".join([str(it), f"{total:.9g}"] + [f"{terms[k]:.9g}" for k in LOG_COLUMNS[2:]])


def train(cfg: RunConfig, scenes: list[Scene], out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | None = None, iterations: int | None = None) -> TrainResult:
    """Optimize the decoder on ``scenes``; writes ``train.log`` and checkpoints into ``out_dir``."""
    torch.set_num_threads(1)
    if not scenes:
        raise ValueError("no training scenes")
    iterations = cfg.iterations if iterations is None else iterations
    model = build_model(cfg)
    params = dict(model.named_parameters())
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume, expect=cfg)
        restore(model, opt, ck)
        start = ck.iteration

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log" if out is not None else None
    log_file = open(log_path, "a" if resume else "w") if log_path is not None else None

    cache = SceneCache(cfg, scenes)
    weights = cfg.loss_weights()
    n = len(scenes)
    lines: list[str] = []
    try:
        for it in range(start, iterations):
            first = it * cfg.batch_size
            batch = [scene_order(n, cfg.seed, (first + b) // n)[(first + b) % n] for b in range(cfg.batch_size)]
            opt.zero_grad()
            loss_sum = 0.0
            terms = {k: 0.0 for k in TERMS}
            for idx in batch:
                feats, targets = cache[idx]
                preds, _ = model(feats)
                loss, breakdown = total_loss(preds, targets, weights)
                lval = float(loss.detach())
                if not math.isfinite(lval):
                    raise TrainingDiverged(f"non-finite loss at iteration {it + 1}: "
                                           f"{breakdown.summed()}")
                (loss / len(batch)).backward()
                loss_sum += lval / len(batch)
                for k, v in breakdown.summed().items():
                    terms[k] += v / len(batch)
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.grad_clip)
            opt.step(lr=learning_rate(cfg, it))
            line = format_log_line(it + 1, loss_sum, terms)
            lines.append(line)
            if log_file is not None:
                log_file.write(line + "\n")
            if (it + 1) % 100 == 0:
                log.info("iter %d loss %.4f", it + 1, loss_sum)
            if out is not None and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{it + 1:06d}.bin", cfg, params, opt.exp_avg, opt.exp_avg_sq,
                                it + 1, opt.step_count)
    finally:
        if log_file is not None:
            log_file.close()
    final_it = max(start, iterations)
    if out is not None:
        save_checkpoint(out / "final.bin", cfg, params, opt.exp_avg, opt.exp_avg_sq, final_it, opt.step_count)
    return TrainResult(model=model, optimizer=opt, log_lines=lines, iteration=final_it)


def restore(model: Decoder, opt: AdamW | None, ck: Checkpoint) -> None:
    params = dict(model.named_parameters())
    missing = set(params) ^ set(ck.params)
    if missing:
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(ck.params[k])
    if opt is not None:
        for k in params:
            opt.exp_avg[k].copy_(ck.exp_avg[k])
            opt.exp_avg_sq[k].copy_(ck.exp_avg_sq[k])
        opt.step_count = ck.adam_step


def model_from_checkpoint(ck: Checkpoint) -> Decoder:
    model = build_model(ck.config)
    restore(model, None, ck)
    return model


@torch.no_grad()
def predict(model: Decoder, scene: Scene, cfg: RunConfig) -> LayerPrediction:
    preds, _ = model(features_for(scene, cfg), with_masks=False)
    return preds[-1]


def detect(model: Decoder, scenes: list[Scene], cfg: RunConfig, score_threshold: float = 0.0) -> list[Detection]:
    dets = []
    for i, s in enumerate(scenes):
        p = predict(model, s, cfg)
        dets += detections_from_prediction(p.logits, p.points, s.range, scene=i, score_threshold=score_threshold)
    return dets


def evaluate_model(model: Decoder, scenes: list[Scene], cfg: RunConfig, score_threshold: float = 0.0) -> ApReport:
    torch.set_num_threads(1)
    return evaluate(detect(model, scenes, cfg, score_threshold), scenes)
