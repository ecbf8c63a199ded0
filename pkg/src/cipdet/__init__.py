"""Co-interest person detection from synchronized multi-view video inputs.

Given per-frame candidate boxes, optical-flow rasters, and point
trajectories from several temporally synchronized wearable-camera
videos, the pipeline selects, per frame, the one person whose motion is
consistent across views and spatially coherent within each view, with an
idle fallback for frames where that person is not visible.
"""

from .config import Config
from .dataset import (
    BBox,
    Candidate,
    Dataset,
    Detection,
    FlowRaster,
    GroundTruth,
    RawTrajectory,
    VideoStream,
    iou,
    load_dataset,
    load_detections,
    write_detections,
)
from .pipeline import EvalReport, detect, evaluate, exclude_undetectable, make_windows, merge_windows
from .solver import SolveReport, solve_exhaustive, solve_trws
from .synth import Scene, generate, scenario_presets

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Candidate",
    "Config",
    "Dataset",
    "Detection",
    "EvalReport",
    "FlowRaster",
    "GroundTruth",
    "RawTrajectory",
    "Scene",
    "SolveReport",
    "VideoStream",
    "detect",
    "evaluate",
    "exclude_undetectable",
    "generate",
    "iou",
    "load_dataset",
    "load_detections",
    "make_windows",
    "merge_windows",
    "scenario_presets",
    "solve_exhaustive",
    "solve_trws",
    "write_detections",
    "__version__",
]
