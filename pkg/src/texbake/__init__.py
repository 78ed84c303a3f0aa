"""Texture restoration for simplified meshes.

Posed target images are projected into UV space by gradient descent on a
high-resolution texture, with a jointly optimized low-resolution texture
acting as a self-supervised reference that fills point gaps.
"""

from texbake.geometry import Mesh, load_mesh, save_mesh, normalize_unit
from texbake.raster import Camera, ViewPlan, GBuffer, make_view_plan, rasterize
from texbake.texopt import Texture, BakeConfig, bake

__all__ = [
    "Mesh",
    "load_mesh",
    "save_mesh",
    "normalize_unit",
    "Camera",
    "ViewPlan",
    "GBuffer",
    "make_view_plan",
    "rasterize",
    "Texture",
    "BakeConfig",
    "bake",
]

__version__ = "0.1.0"
