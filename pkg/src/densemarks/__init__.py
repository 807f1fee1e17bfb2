"""Canonical-coordinate embeddings for dense head correspondence.

A small MLP maps pixels to points of the unit cube; a smoothed latent grid
over the cube turns those points into features for contrastive training.
The predicted coordinates drive nearest-neighbor warping, point and region
queries, multi-view triangulation and rigid pose fitting.
"""
from .geometry import Camera, UVWMap
from .grid import LatentGrid, new_grid, query, query_points
from .embedder import EmbedderParams, TrainConfig, embed_image, train
from .matcher import find_point, nn_warp
from .pose import RigidPose, fit_pose
from .stereo import StereoConfig, build_tracks, reconstruct, triangulate_dlt
from .synthetic import generate_sequence, make_template, render_uvw

__version__ = "0.1.0"

__all__ = [
    "Camera", "UVWMap", "LatentGrid", "new_grid", "query", "query_points", "EmbedderParams", "TrainConfig",
    "embed_image", "train", "find_point", "nn_warp", "RigidPose", "fit_pose", "StereoConfig", "build_tracks",
    "reconstruct", "triangulate_dlt", "generate_sequence", "make_template", "render_uvw",
]
