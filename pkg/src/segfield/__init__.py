"""Multi-view consistent 3D instance segmentation with Gaussian splats and pointmaps."""

from __future__ import annotations

from segfield.assignment import PartialAssignment, solve_assignment
from segfield.association import associate_sequence, build_correspondence, matching_cost
from segfield.data import CorrespondenceMap, LabeledMaskSet, Pointmap, SegmentedPointCloud
from segfield.errors import (
    DegeneratePlaneError,
    EmptyTargetError,
    FormatError,
    GenerationError,
    InvalidInputError,
    SegfieldError,
    TrainingDiverged,
    UndefinedMetricError,
)
from segfield.field import GaussianField, GaussianSplat, delete_object, densify, init_from_cloud, move_object, prune
from segfield.metrics import chamfer, miou_3d, miou_multi, miou_single, psnr, ssim
from segfield.planes import Plane, PlaneSet, fit_plane, fit_planes, plane_loss, split_project
from segfield.render import Camera, render, render_backward
from segfield.train import TrainConfig, TrainResult, TrainView, train

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "CorrespondenceMap",
    "DegeneratePlaneError",
    "EmptyTargetError",
    "FormatError",
    "GaussianField",
    "GaussianSplat",
    "GenerationError",
    "InvalidInputError",
    "LabeledMaskSet",
    "PartialAssignment",
    "Plane",
    "PlaneSet",
    "Pointmap",
    "SegfieldError",
    "SegmentedPointCloud",
    "TrainConfig",
    "TrainResult",
    "TrainView",
    "TrainingDiverged",
    "UndefinedMetricError",
    "associate_sequence",
    "build_correspondence",
    "chamfer",
    "delete_object",
    "densify",
    "fit_plane",
    "fit_planes",
    "init_from_cloud",
    "matching_cost",
    "miou_3d",
    "miou_multi",
    "miou_single",
    "move_object",
    "plane_loss",
    "prune",
    "psnr",
    "render",
    "render_backward",
    "solve_assignment",
    "split_project",
    "ssim",
    "train",
]
