"""Multi-granularity query decoder for vectorized BEV map construction."""

from .config import RunConfig
from .decoder import Decoder, DecoderConfig, LayerPrediction, QueryState, forward_decoder
from .geometry import MapInstance, PerceptionRange
from .scene import FeatureGrid, Scene, generate_scene, load_scene, render_bev_features, save_scene

__all__ = [
    "Decoder", "DecoderConfig", "FeatureGrid", "LayerPrediction", "MapInstance", "PerceptionRange",
    "QueryState", "RunConfig", "Scene", "forward_decoder", "generate_scene", "load_scene",
    "render_bev_features", "save_scene",
]
