"""Star-graph 3D multi-object tracking with object-centric windowed pose-graph optimization."""

from .geometry import Box3, Pose, compose, frobenius_deviation, giou3d, invert, iou3d, ngiou
from .graph import FrameGraph, Node, StarGraph, build_frame_graph
from .metrics import MotReport, TrajReport, clear_mot, trajectory_errors
from .msga import ConsistencyScore, MatchResult, StarGraphAssociator, associate, km_assign, pair_score
from .pipeline import GraphTracker, RunConfig, RunRecord, run
from .simulator import NoiseSpec, Scenario, SimConfig, congested_config, generate, inject_noise

__version__ = "0.1.0"

__all__ = [
    "Box3", "Pose", "compose", "invert", "frobenius_deviation", "iou3d", "giou3d", "ngiou",
    "Node", "StarGraph", "FrameGraph", "build_frame_graph",
    "ConsistencyScore", "MatchResult", "StarGraphAssociator", "associate", "km_assign", "pair_score",
    "MotReport", "TrajReport", "clear_mot", "trajectory_errors",
    "GraphTracker", "RunConfig", "RunRecord", "run",
    "NoiseSpec", "Scenario", "SimConfig", "congested_config", "generate", "inject_noise",
]
