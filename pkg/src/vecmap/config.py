"""Run configuration: one flat ``key = value`` text file.

Every field of :class:`RunConfig` is a valid key; unknown keys are rejected.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace

from .assignment import LossWeights
from .decoder import DecoderConfig
from .geometry import PerceptionRange
from .numerics import ConfigError
from .scene import SceneConfig

# keys that determine parameter shapes and forward semantics
MODEL_KEYS = ("n_queries", "n_points", "n_rep", "n_layers", "dim", "n_heads", "feat_channels",
              "multi_scale", "use_p2p", "use_p2i", "grid_h", "grid_w")


@dataclass(frozen=True)
class RunConfig:
    # decoder
    n_queries: int = 30
    n_points: int = 10
    n_rep: int = 8
    n_layers: int = 4
    dim: int = 64
    n_heads: int = 4
    multi_scale: bool = True
    use_p2p: bool = True
    use_p2i: bool = True
    # BEV features
    feat_channels: int = 32
    grid_h: int = 100
    grid_w: int = 50
    noise_level: float = 0.1
    stroke_width: float = 1.0
    # perception range, metres
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0
    # scene generator
    crossings: bool = True
    dividers: bool = True
    boundaries: bool = True
    max_instances: int = 8
    lanes_min: int = 2
    lanes_max: int = 3
    curvature_max: float = 0.004
    heading_max: float = 0.08
    # loss
    beta_pts: float = 5.0
    beta_cls: float = 2.0
    beta_dir: float = 0.005
    beta_dense: float = 3.0
    beta_aux: float = 3.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # optimizer and schedule
    lr: float = 4e-4
    weight_decay: float = 0.01
    grad_clip: float = 35.0
    lr_schedule: str = "cosine"
    warmup: int = 50
    iterations: int = 2000
    batch_size: int = 1
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("iterations >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        self.decoder_config()  # validates shapes

    @property
    def range(self) -> PerceptionRange:
        return PerceptionRange(self.x_min, self.x_max, self.y_min, self.y_max)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(n_queries=self.n_queries, n_points=self.n_points, n_rep=self.n_rep,
                             n_layers=self.n_layers, dim=self.dim, n_heads=self.n_heads,
                             feat_channels=self.feat_channels, multi_scale=self.multi_scale,
                             use_p2p=self.use_p2p, use_p2i=self.use_p2i)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(n_points=self.n_points, range=self.range, max_instances=self.max_instances,
                           crossings=self.crossings, dividers=self.dividers, boundaries=self.boundaries,
                           lanes_min=self.lanes_min, lanes_max=self.lanes_max,
                           curvature_max=self.curvature_max, heading_max=self.heading_max)

    def loss_weights(self) -> LossWeights:
        return LossWeights(pts=self.beta_pts, cls=self.beta_cls, dir=self.beta_dir, dense=self.beta_dense,
                           aux=self.beta_aux, focal_alpha=self.focal_alpha, focal_gamma=self.focal_gamma)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())

    def fingerprint(self) -> str:
        d = asdict(self)
        blob = "\n".join(f"{k}={_format(d[k])}" for k in MODEL_KEYS)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                kw[key] = _parse(types[key], val)
            except ValueError as e:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_text(f.read(), source=str(path))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(typ: str, val: str):
    if typ == "bool":
        low = val.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val
