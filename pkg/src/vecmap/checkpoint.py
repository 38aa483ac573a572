"""Checkpoint files: a plain-text header followed by little-endian float32 data.

Header lines (UTF-8)::

    vecmap-checkpoint 1
    iteration <int>
    adam_step <int>
    fingerprint <hex>
    config <key> = <value>          (one per RunConfig field)
    tensor <name> <d0,d1,...> <byte offset>
    end

The binary section starts right after the ``end`` line; offsets are relative
to it. Optimizer moments are stored as tensors named ``adam.m.<param>`` and
``adam.v.<param>``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig

MAGIC = "vecmap-checkpoint 1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    iteration: int
    adam_step: int
    fingerprint: str


def save_checkpoint(path: str | os.PathLike, config: RunConfig, params: dict[str, torch.Tensor],
                    exp_avg: dict[str, torch.Tensor], exp_avg_sq: dict[str, torch.Tensor],
                    iteration: int, adam_step: int) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in params.items():
        arrays.append((name, p.detach().to(torch.float32).numpy()))
    for name in params:
        arrays.append((f"adam.m.{name}", exp_avg[name].detach().to(torch.float32).numpy()))
        arrays.append((f"adam.v.{name}", exp_avg_sq[name].detach().to(torch.float32).numpy()))
    lines = [MAGIC, f"iteration {iteration}", f"adam_step {adam_step}", f"fingerprint {config.fingerprint()}"]
    lines += [f"config {ln}" for ln in config.to_text().splitlines()]
    offset = 0
    blobs = []
    for name, a in arrays:
        shape = ",".join(str(d) for d in a.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset}")
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expect: RunConfig | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; refuse one whose model fingerprint differs from ``expect`` unless forced."""
    with open(path, "rb") as f:
        data = f.read()
    marker = b"\nend\n"
    cut = data.find(marker)
    if not data.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = data[:cut].decode().splitlines()
    body = data[cut + len(marker):]
    meta, cfg_lines, tensors = {}, [], []
    for ln in header[1:]:
        kind, _, rest = ln.partition(" ")
        if kind == "config":
            cfg_lines.append(rest)
        elif kind == "tensor":
            name, shape, off = rest.split(" ")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            tensors.append((name, dims, int(off)))
        else:
            meta[kind] = rest
    config = RunConfig.from_text("\n".join(cfg_lines), source=f"{path} header")
    fp = meta.get("fingerprint", "")
    if fp != config.fingerprint():
        raise CheckpointError(f"{path}: stored fingerprint {fp} does not match its own config")
    if expect is not None and expect.fingerprint() != fp and not force:
        raise CheckpointError(f"{path}: config fingerprint {fp} differs from expected "
                              f"{expect.fingerprint()} (use force to override)")
    params, m, v = {}, {}, {}
    for name, dims, off in tensors:
        n = int(np.prod(dims)) if dims else 1
        if off + 4 * n > len(body):
            raise CheckpointError(f"{path}: tensor {name} runs past end of file")
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        t = torch.from_numpy(arr.copy())
        if name.startswith("adam.m."):
            m[name[7:]] = t
        elif name.startswith("adam.v."):
            v[name[7:]] = t
        else:
            params[name] = t
    return Checkpoint(config=config, params=params, exp_avg=m, exp_avg_sq=v,
                      iteration=int(meta.get("iteration", 0)), adam_step=int(meta.get("adam_step", 0)),
                      fingerprint=fp)
