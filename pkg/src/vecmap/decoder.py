"""Multi-granularity query decoder.

Each layer runs instance self-attention, the multi-granularity aggregator
(deformable sampling around every reference point, normalized two ways to
produce one instance query and ``N_p`` point queries), point/instance
interaction (P2P and P2I attention), instance aggregation and a shared FFN.
Points are regressed as logit-space offsets of the incoming reference points;
classes come from the instance queries.

Shapes use ``Nq`` instance slots, ``Np`` points, ``M`` heads and ``Nr``
sampling points per reference point. Sampling locations and weights carry an
explicit head axis: reference points are shared across heads, offsets and
weights are per head.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .numerics import (ConfigError, Mlp, MultiHeadAttention, bilinear_sample, inverse_sigmoid,
                       softmax)
from .scene import FeatureGrid


class DecoderStateError(RuntimeError):
    pass


REF_EPS = 1e-5
_LOGIT_MAX = math.log((1.0 - REF_EPS) / REF_EPS)


def bounded_sigmoid(x: torch.Tensor) -> torch.Tensor:
    """Sigmoid with the logit clamped so results stay in [REF_EPS, 1 - REF_EPS].

    Keeps reference points strictly inside the unit square in float32 and makes
    ``bounded_sigmoid(inverse_sigmoid(rf)) == rf`` for every point it produced.
    """
    return torch.sigmoid(x.clamp(-_LOGIT_MAX, _LOGIT_MAX))


@dataclass(frozen=True)
class DecoderConfig:
    n_queries: int = 30
    n_points: int = 10
    n_rep: int = 8
    n_layers: int = 4
    dim: int = 64
    n_heads: int = 4
    n_classes: int = 3
    feat_channels: int = 32
    multi_scale: bool = True
    use_p2p: bool = True
    use_p2i: bool = True

    def __post_init__(self):
        for name in ("n_queries", "n_points", "n_rep", "n_layers", "dim", "n_heads", "n_classes",
                     "feat_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if self.n_rep % 2:
            raise ConfigError(f"n_rep {self.n_rep} must split evenly across 2 feature scales")

    @property
    def n_scales(self) -> int:
        return 2 if self.multi_scale else 1


@dataclass
class Aggregation:
    ins: torch.Tensor  # Nq x C, after output projection
    pts: torch.Tensor  # Nq x Np x C
    ins_heads: torch.Tensor  # M x Nq x C/M, before projection
    pts_heads: torch.Tensor  # M x Nq x Np x C/M
    offsets: torch.Tensor  # Nq x Np x M x Nr x 2 (normalized units)
    locations: torch.Tensor  # Nq x Np x M x Nr x 2
    logits: torch.Tensor  # Nq x Np x M x Nr, unnormalized weights
    w_ins: torch.Tensor  # Nq x M x (Np*Nr)
    w_pts: torch.Tensor  # Nq x Np x M x Nr


@dataclass
class QueryState:
    q_ins: torch.Tensor
    q_pts: torch.Tensor
    rf: torch.Tensor
    locations: torch.Tensor | None = None
    w_ins: torch.Tensor | None = None
    w_pts: torch.Tensor | None = None
    pe_ins: torch.Tensor | None = None
    pe_pts: torch.Tensor | None = None


@dataclass
class LayerPrediction:
    logits: torch.Tensor  # Nq x n_classes
    points: torch.Tensor  # Nq x Np x 2, normalized; equals the layer's refined RF
    ref_in: torch.Tensor  # Nq x Np x 2, the reference points this layer sampled around
    mask_logits: torch.Tensor | None = None  # Nq x Hm x Wm


@dataclass
class Values:
    """Per-scale value maps split into heads: each ``M x C/M x H_s x W_s``."""
    maps: list[torch.Tensor]
    pixels: torch.Tensor  # C x Hm x Wm, for the mask head
    sizes: list[tuple[int, int]] = field(default_factory=list)  # (W_s, H_s)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        c, m, nr, npts = cfg.dim, cfg.n_heads, cfg.n_rep, cfg.n_points
        self.cfg = cfg
        self.norm_sa = nn.LayerNorm(c)
        self.self_attn = MultiHeadAttention(c, m)
        self.norm_agg = nn.LayerNorm(c)
        self.mlp_ref = Mlp([2, c, c])
        self.sampling_offset = nn.Linear(c, m * nr * 2)
        self.weight_embed = nn.Linear(c, m * nr)
        self.out_proj = nn.Linear(c, c)
        self.mlp_pe_ins = Mlp([npts * m * nr * 3, c, c])
        self.mlp_pe_pts = Mlp([m * nr * 3, c, c])
        self.norm_p2p = nn.LayerNorm(c)
        self.p2p = MultiHeadAttention(c, m)
        self.norm_p2i_q = nn.LayerNorm(c)
        self.norm_p2i_kv = nn.LayerNorm(c)
        self.p2i = MultiHeadAttention(c, m)
        self.mlp_agg = Mlp([c, c, c])
        self.norm_ffn = nn.LayerNorm(c)
        self.ffn = Mlp([c, 2 * c, c])
        self._reset_offsets()

    def _reset_offsets(self):
        cfg = self.cfg
        nn.init.zeros_(self.sampling_offset.weight)
        nn.init.zeros_(self.weight_embed.weight)
        nn.init.zeros_(self.weight_embed.bias)
        per_scale = cfg.n_rep // cfg.n_scales
        theta = torch.arange(cfg.n_heads, dtype=torch.float32) * (2.0 * math.pi / cfg.n_heads)
        direction = torch.stack([theta.cos(), theta.sin()], -1)
        direction = direction / direction.abs().max(-1, keepdim=True).values
        radius = (torch.arange(cfg.n_rep) % per_scale + 1).float()
        bias = direction[:, None, :] * radius[None, :, None]  # M x Nr x 2, in pixels
        with torch.no_grad():
            self.sampling_offset.bias.copy_(bias.reshape(-1))

    def instance_self_attention(self, q_ins: torch.Tensor) -> torch.Tensor:
        x = self.norm_sa(q_ins)
        return q_ins + self.self_attn(x, x, x)

    def aggregate(self, q_ins: torch.Tensor, rf: torch.Tensor, values: Values) -> Aggregation:
        cfg = self.cfg
        nq, npts = rf.shape[:2]
        m, nr = cfg.n_heads, cfg.n_rep
        pe_ref = self.mlp_ref(rf)
        x = self.norm_agg(q_ins)[:, None, :] + pe_ref
        raw = self.sampling_offset(x).reshape(nq, npts, m, nr, 2)
        logits = self.weight_embed(x).reshape(nq, npts, m, nr)

        # offsets are in pixels of the scale each sampling point reads from
        per_scale = nr // len(values.maps)
        scale_of = torch.arange(nr) // per_scale
        sizes = torch.tensor(values.sizes, dtype=rf.dtype)[scale_of]  # Nr x 2
        offsets = raw / sizes
        locations = rf[:, :, None, None, :] + offsets

        sampled = []
        for s, vmap in enumerate(values.maps):
            loc = locations[:, :, :, s * per_scale:(s + 1) * per_scale]  # Nq x Np x M x k x 2
            sampled.append(bilinear_sample(vmap, loc.permute(2, 0, 1, 3, 4)))
        sampled = torch.cat(sampled, dim=3)  # M x Nq x Np x Nr x d

        w = logits.permute(2, 0, 1, 3)  # M x Nq x Np x Nr
        w_ins = softmax(w, (2, 3))
        w_pts = softmax(w, 3)
        ins_heads = (w_ins[..., None] * sampled).sum(dim=(2, 3))
        pts_heads = (w_pts[..., None] * sampled).sum(dim=3)
        ins = self.out_proj(ins_heads.permute(1, 0, 2).reshape(nq, cfg.dim))
        pts = self.out_proj(pts_heads.permute(1, 2, 0, 3).reshape(nq, npts, cfg.dim))
        return Aggregation(
            ins=ins, pts=pts, ins_heads=ins_heads, pts_heads=pts_heads, offsets=offsets,
            locations=locations, logits=logits,
            w_ins=w_ins.reshape(m, nq, npts * nr).permute(1, 0, 2),
            w_pts=w_pts.permute(1, 2, 0, 3),
        )

    def interaction_positional_encodings(self, locations, w_ins, w_pts):
        """Encode sampling geometry into instance and point positional encodings.

        Flattening order: point, then head, then sample, then (x, y, weight).
        """
        nq, npts, m, nr, _ = locations.shape
        w_ins_pp = w_ins.reshape(nq, m, npts, nr).permute(0, 2, 1, 3)
        ins_in = torch.cat([locations, w_ins_pp[..., None]], -1).reshape(nq, -1)
        pts_in = torch.cat([locations, w_pts[..., None]], -1).reshape(nq, npts, -1)
        return self.mlp_pe_ins(ins_in), self.mlp_pe_pts(pts_in)

    def p2p_attention(self, q_pts, pe_pts, prev_pts, prev_pe, layer_index: int):
        if layer_index == 0:
            x = self.norm_p2p(q_pts)
            return q_pts + self.p2p(x + pe_pts, x + pe_pts, x)
        if prev_pts is None or prev_pe is None:
            raise DecoderStateError(f"layer {layer_index} needs the previous layer's point queries")
        x = self.norm_p2p(q_pts)
        kv = self.norm_p2p(prev_pts)
        return q_pts + self.p2p(x + pe_pts, kv + prev_pe, kv)

    def p2i_attention(self, q_pts, pe_pts, q_ins, pe_ins):
        nq, npts, c = q_pts.shape
        q = (self.norm_p2i_q(q_pts) + pe_pts).reshape(nq * npts, c)
        kv = self.norm_p2i_kv(q_ins)
        out = self.p2i(q, kv + pe_ins, kv)
        return q_pts + out.reshape(nq, npts, c)

    def aggregate_instance(self, q_pts: torch.Tensor) -> torch.Tensor:
        return self.mlp_agg(q_pts.sum(dim=1))

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ffn(self.norm_ffn(x))


class Decoder(nn.Module):
    """Learned queries, ``L`` decoder layers, and the heads shared across layers."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.dim
        self.query_embed = nn.Parameter(torch.randn(cfg.n_queries, c))
        self.ref_init = Mlp([c, c, cfg.n_points * 2])
        self.value_proj = nn.Linear(cfg.feat_channels, c)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.norm_cls = nn.LayerNorm(c)
        self.cls_head = Mlp([c, c, cfg.n_classes])
        self.norm_reg = nn.LayerNorm(c)
        self.reg_head = Mlp([c, c, 2])
        self.mask_embed = Mlp([c, c, c])
        self.pixel_proj = nn.Linear(c, c)
        self.counters: Counter = Counter()

    # -- stage operations -------------------------------------------------

    def init_queries(self) -> torch.Tensor:
        return init_queries(self.cfg, self.query_embed)

    def initial_reference_points(self, q_ins: torch.Tensor) -> torch.Tensor:
        nq = q_ins.shape[0]
        return bounded_sigmoid(self.ref_init(q_ins)).reshape(nq, self.cfg.n_points, 2)

    def refine_reference_points(self, rf: torch.Tensor, q_pts: torch.Tensor) -> torch.Tensor:
        return refine_reference_points(rf, self.reg_head(self.norm_reg(q_pts)))

    def classification_head(self, q_ins: torch.Tensor) -> torch.Tensor:
        return self.cls_head(self.norm_cls(q_ins))

    def mask_head(self, q_ins: torch.Tensor, values: Values) -> torch.Tensor:
        emb = self.mask_embed(self.norm_cls(q_ins))
        return torch.einsum("qc,chw->qhw", emb, values.pixels) / math.sqrt(self.cfg.dim)

    def prepare_values(self, features: FeatureGrid) -> Values:
        cfg = self.cfg
        grids = features.scales if cfg.multi_scale else features.scales[:1]
        m, d = cfg.n_heads, cfg.dim // cfg.n_heads
        maps, sizes = [], []
        for g in grids:
            _, h, w = g.shape
            v = self.value_proj(g.permute(1, 2, 0))  # H x W x C
            maps.append(v.permute(2, 0, 1).reshape(m, d, h, w))
            sizes.append((w, h))
        full = maps[0].reshape(cfg.dim, *maps[0].shape[2:])
        _, h, w = full.shape
        pooled = nn.functional.adaptive_avg_pool2d(full[None], (max(h // 4, 1), max(w // 4, 1)))[0]
        pixels = self.pixel_proj(pooled.permute(1, 2, 0)).permute(2, 0, 1)
        return Values(maps=maps, pixels=pixels, sizes=sizes)

    # -- full pass ----------------------------------------------------------

    def forward(self, features: FeatureGrid, with_masks: bool = True):
        return forward_decoder(features, self, self.cfg, with_masks=with_masks)


def init_queries(cfg: DecoderConfig, table: torch.Tensor) -> torch.Tensor:
    if tuple(table.shape) != (cfg.n_queries, cfg.dim):
        raise ConfigError(f"query table has shape {tuple(table.shape)}, "
                          f"expected ({cfg.n_queries}, {cfg.dim})")
    return table


def refine_reference_points(rf: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Shift reference points by ``delta`` in logit space; gradients flow through ``rf``."""
    return bounded_sigmoid(inverse_sigmoid(rf, REF_EPS) + delta)


def forward_decoder(features: FeatureGrid, model: Decoder, cfg: DecoderConfig,
                    with_masks: bool = True) -> tuple[list[LayerPrediction], QueryState]:
    if features.full.shape[0] != cfg.feat_channels:
        raise ConfigError(f"features have {features.full.shape[0]} channels, "
                          f"decoder expects {cfg.feat_channels}")
    values = model.prepare_values(features)
    q_ins = model.init_queries()
    rf = model.initial_reference_points(q_ins)
    prev_pts = prev_pe = None
    preds: list[LayerPrediction] = []
    state = None
    for li, layer in enumerate(model.layers):
        q_ins = layer.instance_self_attention(q_ins)
        agg = layer.aggregate(q_ins, rf, values)
        q_ins = q_ins + agg.ins
        q_pts = agg.pts
        pe_ins, pe_pts = layer.interaction_positional_encodings(agg.locations, agg.w_ins, agg.w_pts)
        if cfg.use_p2p:
            model.counters["p2p"] += 1
            q_pts = layer.p2p_attention(q_pts, pe_pts, prev_pts, prev_pe, li)
        if cfg.use_p2i:
            model.counters["p2i"] += 1
            q_pts = layer.p2i_attention(q_pts, pe_pts, q_ins, pe_ins)
        q_ins = q_ins + layer.aggregate_instance(q_pts)
        q_ins = layer.feed_forward(q_ins)
        q_pts = layer.feed_forward(q_pts)

        logits = model.classification_head(q_ins)
        new_rf = model.refine_reference_points(rf, q_pts)
        masks = model.mask_head(q_ins, values) if with_masks else None
        preds.append(LayerPrediction(logits=logits, points=new_rf, ref_in=rf, mask_logits=masks))
        state = QueryState(q_ins=q_ins, q_pts=q_pts, rf=new_rf, locations=agg.locations,
                           w_ins=agg.w_ins, w_pts=agg.w_pts, pe_ins=pe_ins, pe_pts=pe_pts)
        rf, prev_pts, prev_pe = new_rf, q_pts, pe_pts
    return preds, state
