"""Gaussian splatting with a Beer-Lambert opacity model and material-aware cross sections."""

__version__ = "0.1.0"

from .compositing import OpacityActivation, OpacityMode, alpha_baseline, alpha_omg, composite_pixel, nerf_alpha
from .errors import (DivergenceError, InvalidInputError, InvalidStateError, NumericDegeneracyError, OmgError,
                     SceneParseError)
from .geometry import Camera, GaussianPrimitive, Material
from .images import ImageBuffer, read_image, write_image
from .render import RenderRequest, render, render_reference
from .scene import Scene, SceneSpec, generate_synthetic_scene, load_scene, save_scene

__all__ = [
    "Camera", "DivergenceError", "GaussianPrimitive", "ImageBuffer", "InvalidInputError", "InvalidStateError",
    "Material", "NumericDegeneracyError", "OmgError", "OpacityActivation", "OpacityMode", "RenderRequest",
    "Scene", "SceneParseError", "SceneSpec", "alpha_baseline", "alpha_omg", "composite_pixel",
    "generate_synthetic_scene", "load_scene", "nerf_alpha", "read_image", "render", "render_reference",
    "save_scene", "write_image",
]
