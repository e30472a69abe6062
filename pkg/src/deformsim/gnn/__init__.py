"""Graph-network dynamics: vertex graphs, the model, training, fine-tuning."""

from .finetune import FinetuneConfig, finetune_properties, lbs_track_points
from .graph import DynGraph, advance_graph, build_graph, fps, radius_edges, tune_vertex_radius
from .model import (
    GnnConfig,
    denormalize_properties,
    forward,
    forward_fast,
    init_params,
    load_model,
    normalize_properties,
    params_to_f32,
    params_to_f64,
    rollout,
    save_model,
)
from .train import TrainConfig, TrainResult, episode_view, train, window_loss

__all__ = [
    "DynGraph",
    "FinetuneConfig",
    "GnnConfig",
    "TrainConfig",
    "TrainResult",
    "advance_graph",
    "build_graph",
    "denormalize_properties",
    "episode_view",
    "finetune_properties",
    "forward",
    "forward_fast",
    "fps",
    "init_params",
    "lbs_track_points",
    "load_model",
    "normalize_properties",
    "params_to_f32",
    "params_to_f64",
    "radius_edges",
    "rollout",
    "save_model",
    "train",
    "tune_vertex_radius",
    "window_loss",
]
