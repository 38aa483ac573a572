"""Differentiable tensor primitives and the AdamW optimizer.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
pins down the conventions every other module relies on (sampling coordinates,
joint-axis softmax, clamped logit, MLP activation) and owns the optimizer so
its state can be checkpointed bit-exactly.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Raised for inconsistent sizes or hyperparameters."""


class Mlp(nn.Module):
    """Stack of linear layers with ReLU between them and identity at the output."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        widths = list(widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigError(f"MLP widths must be >= 2 positive integers, got {widths}")
        self.widths = widths
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_mlp(self, x)


def apply_mlp(m: Mlp, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != m.widths[0]:
        raise ConfigError(
            f"MLP input axis {x.dim() - 1} has size {x.shape[-1]}, expected {m.widths[0]}"
        )
    n = len(m.layers)
    for i, layer in enumerate(m.layers):
        x = layer(x)
        if i < n - 1:
            x = F.relu(x)
    return x


def softmax(x: torch.Tensor, axes: int | Iterable[int]) -> torch.Tensor:
    """Softmax normalized jointly over ``axes``.

    The axes are moved to the end, flattened, normalized with max-subtraction
    and restored, so ``softmax(x, (2, 3))`` sums to one over every 2-D slice.
    """
    if isinstance(axes, int):
        axes = (axes,)
    axes = sorted({a % x.dim() for a in axes})
    if not axes:
        raise ValueError("softmax needs at least one axis")
    rest = [a for a in range(x.dim()) if a not in axes]
    perm = rest + axes
    xp = x.permute(perm)
    lead = xp.shape[: len(rest)]
    flat = xp.reshape(*lead, -1)
    flat = flat - flat.max(dim=-1, keepdim=True).values.detach()
    e = flat.exp()
    out = (e / e.sum(dim=-1, keepdim=True)).reshape(xp.shape)
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return out.permute(inv)


def bilinear_sample(grid: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """Sample a ``C x H x W`` grid at normalized locations.

    ``locations[..., 0]`` runs along W (x) and ``locations[..., 1]`` along H (y);
    (0, 0) is the minimum corner and pixel ``i`` has its center at ``(i + 0.5) / W``.
    Outside the grid the field is zero. Returns ``locations.shape[:-1] + (C,)``.

    A leading batch axis is accepted as well: ``grid`` of shape ``B x C x H x W``
    with ``locations`` of shape ``B x ... x 2`` samples each batch entry separately.
    """
    if locations.shape[-1] != 2:
        raise ConfigError(f"locations must end in an axis of size 2, got {tuple(locations.shape)}")
    batched = grid.dim() == 4
    if not batched:
        if grid.dim() != 3:
            raise ConfigError(f"grid must be C x H x W, got {tuple(grid.shape)}")
        grid = grid.unsqueeze(0)
        locations = locations.unsqueeze(0)
    b = grid.shape[0]
    if locations.shape[0] != b:
        raise ConfigError(f"batch mismatch: grid {b} vs locations {locations.shape[0]}")
    lead = locations.shape[1:-1]
    g = locations.reshape(b, 1, -1, 2) * 2.0 - 1.0
    out = F.grid_sample(grid, g, mode="bilinear", padding_mode="zeros", align_corners=False)
    # out: B x C x 1 x P
    out = out[:, :, 0, :].transpose(1, 2).reshape(b, *lead, grid.shape[1])
    return out if batched else out[0]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head input and shared output projections.

    Inputs are ``... x T x C``; leading axes are treated as batch.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if n_heads <= 0 or dim % n_heads:
            raise ConfigError(f"width {dim} is not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        return multi_head_attention(self, queries, keys, values)


def multi_head_attention(
    attn: MultiHeadAttention, queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor
) -> torch.Tensor:
    if keys.shape[-2] != values.shape[-2]:
        raise ConfigError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    h, d = attn.n_heads, attn.dim // attn.n_heads

    def split(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(*t.shape[:-1], h, d).transpose(-2, -3)

    q = split(attn.q_proj(queries))
    k = split(attn.k_proj(keys))
    v = split(attn.v_proj(values))
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    w = softmax(scores, -1)
    out = (w @ v).transpose(-2, -3)
    out = out.reshape(*out.shape[:-2], attn.dim)
    return attn.out_proj(out)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x) - torch.log1p(-x)


class NonFiniteGradient(FloatingPointError):
    pass


class AdamW:
    """AdamW with decoupled, multiplicative weight decay and bias-corrected moments.

    Holds its moments keyed by parameter name so they can be written to and
    read from checkpoints.
    """

    def __init__(
        self,
        params: dict[str, torch.Tensor],
        lr: float = 4e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {weight_decay}")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {k: torch.zeros_like(p) for k, p in params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor] | None = None, lr: float | None = None) -> None:
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``.

        Every gradient is checked before any parameter moves, so a rejected
        step leaves the state untouched.
        """
        lr = self.lr if lr is None else lr
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for name, g in grads.items():
            if g.shape != self.params[name].shape:
                raise ConfigError(f"gradient for {name} has shape {tuple(g.shape)}, "
                                  f"parameter has {tuple(self.params[name].shape)}")
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if self.weight_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


def adamw_step(state: AdamW, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Functional front end: step ``state`` (bound to ``params``) and return the params."""
    if state.params is not params:
        raise ConfigError("optimizer state is bound to a different parameter set")
    state.step(grads)
    return params
