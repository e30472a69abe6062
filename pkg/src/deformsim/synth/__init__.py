"""Demonstration synthesis: control trajectories, property perturbations,
and episode generation over a calibrated twin."""

from .bezier import (
    BezierTrajectory,
    VelocityProfile,
    arc_length,
    arc_param,
    bezier_derivative,
    bezier_eval,
    profile_speed,
    trajectory_actions,
)
from .episodes import (
    Demonstration,
    SynthConfig,
    load_dataset,
    run_episode,
    save_dataset,
    synthesize,
)
from .perturb import (
    PROPERTY_COLUMNS,
    PerturbationConfig,
    farthest_point_indices,
    kernel_matrix,
    nystrom_factor,
    nystrom_sample,
    part_features,
    perturb_properties,
)

__all__ = [
    "BezierTrajectory",
    "VelocityProfile",
    "arc_length",
    "arc_param",
    "bezier_derivative",
    "bezier_eval",
    "profile_speed",
    "trajectory_actions",
    "Demonstration",
    "SynthConfig",
    "load_dataset",
    "run_episode",
    "save_dataset",
    "synthesize",
    "PROPERTY_COLUMNS",
    "PerturbationConfig",
    "farthest_point_indices",
    "kernel_matrix",
    "nystrom_factor",
    "nystrom_sample",
    "part_features",
    "perturb_properties",
]
