"""Procedural driving world: tracks, ground-truth rendering and pose noise."""

from .noise import DepthNoiseModel, PoseNoiseModel, corrupt_depth, perturb
from .raycast import RenderedFrame, Scene, render
from .track import (
    Arc,
    Box,
    Centerline,
    Pole,
    Straight,
    TrackSpec,
    camera_pose,
    ground_truth_offset,
    load_track,
    parse_track,
    planar,
    sample_reference,
)

__all__ = [
    "Arc", "Box", "Centerline", "DepthNoiseModel", "Pole", "PoseNoiseModel", "corrupt_depth", "RenderedFrame", "Scene", "Straight",
    "TrackSpec", "camera_pose", "ground_truth_offset", "load_track", "parse_track", "perturb",
    "planar", "render", "sample_reference",
]
