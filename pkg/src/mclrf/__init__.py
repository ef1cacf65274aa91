"""Monte Carlo localization of a camera inside a radiance field map."""

from .field import SceneSpec, VoxelField, generate_scene, load_field, save_field
from .geometry import Camera, Pose
from .renderer import QuadratureConfig, render_image, render_pixels, render_ray

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Pose",
    "QuadratureConfig",
    "SceneSpec",
    "VoxelField",
    "generate_scene",
    "load_field",
    "render_image",
    "render_pixels",
    "render_ray",
    "save_field",
]
