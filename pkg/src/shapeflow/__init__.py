"""Coarse-to-fine 3D shape refinement via rectified flow on latent token sets.

Submodules:
    tensor    dense arrays with tape-based reverse-mode differentiation
    optim     Adam over parameter lists
    nn        linear / attention / feedforward building blocks
    geometry  procedural SDF shape oracles, sampling, degradation
    sampling  point-cloud downsampling and token matching
    vae       set-latent shape autoencoder (encode / decode SDF)
    dit       adaLN transformer velocity network
    flow      rectified-flow training and Euler sampling
    meshing   SDF grids, marching cubes, OBJ export, metrics
    pipeline  dataset generation, training, refinement, evaluation
"""

from .tensor import Tensor, Tape, backward
from .geometry import ShapeSpec, PointCloud, eval_sdf, sample_surface
from .sampling import two_stage_downsample, match_tokens
from .meshing import build_sdf_grid, marching_cubes, export_obj, chamfer_distance

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "backward",
    "ShapeSpec", "PointCloud", "eval_sdf", "sample_surface",
    "two_stage_downsample", "match_tokens",
    "build_sdf_grid", "marching_cubes", "export_obj", "chamfer_distance",
    "__version__",
]
