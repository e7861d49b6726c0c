from .generate import ShapeParams, ShapeRecord, generate_mask, sample_center
from .mesh import TriMesh, icosphere, perturb_mesh, place_mesh, quaternion_to_matrix, random_quaternion
from .noise import NoiseParams, simplex_noise
from .voxelize import voxelize, voxelize_ray_parity

__all__ = [
    "NoiseParams", "ShapeParams", "ShapeRecord", "TriMesh",
    "generate_mask", "icosphere", "perturb_mesh", "place_mesh", "quaternion_to_matrix",
    "random_quaternion", "sample_center", "simplex_noise", "voxelize", "voxelize_ray_parity",
]
