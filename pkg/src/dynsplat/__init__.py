"""dynsplat: deformable Gaussian splatting for dynamic volume-visualization scenes."""

__version__ = "0.1.0"

from .scene import Camera, GaussianSet, covariance, eval_sh, gaussian_value
from .render import RenderOutput, pick, project, render

__all__ = [
    "Camera",
    "GaussianSet",
    "RenderOutput",
    "covariance",
    "eval_sh",
    "gaussian_value",
    "pick",
    "project",
    "render",
]
