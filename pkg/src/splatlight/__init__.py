"""Global illumination for scenes mixing 3D Gaussian primitives and triangle meshes.

The package is organized around a per-frame pipeline: splatting rasterization
into a weighted-mean G-buffer, stochastic ray tracing against a BVH of Gaussian
proxies and triangles, grid-sampled direct lighting, a two-level radiance cache
for indirect diffuse, and split-sum glossy reflections.
"""

import os

import numba

_threads = os.environ.get("SPLATLIGHT_THREADS")
if _threads:
    numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))

from .camera import CameraModel
from .gsmath import GaussianPrimitive, Ray

__all__ = ["CameraModel", "GaussianPrimitive", "Ray"]
