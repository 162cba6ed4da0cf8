"""Pinhole camera with a y-down pixel frame.

Camera space is right-handed with +z forward and +y pointing down the image,
so pixel row 0 is the top of the frame.  Depths throughout the renderer are
linear camera-space z values.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CameraModel:
    position: np.ndarray
    rotation: np.ndarray  # 3x3, columns = camera x/y/z axes in world space
    width: int
    height: int
    fov_deg: float
    near: float = 1e-2

    fx: float = field(init=False)
    fy: float = field(init=False)
    cx: float = field(init=False)
    cy: float = field(init=False)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        if not 1.0 < self.fov_deg < 179.0:
            raise ValueError("vertical FOV must lie in (1, 179) degrees")
        self.fy = (self.height / 2.0) / np.tan(np.radians(self.fov_deg) / 2.0)
        self.fx = self.fy
        self.cx = self.width / 2.0
        self.cy = self.height / 2.0

    @classmethod
    def look_at(cls, position, target, up, width, height, fov_deg, near=1e-2):
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("camera position and look-at target coincide")
        forward = forward / norm
        x_axis = np.cross(up, forward)
        xn = np.linalg.norm(x_axis)
        if xn < 1e-9:
            # Up parallel to forward: pick any perpendicular axis.
            fallback = np.array([1.0, 0.0, 0.0])
            if abs(forward[0]) > 0.9:
                fallback = np.array([0.0, 0.0, 1.0])
            x_axis = np.cross(fallback, forward)
            xn = np.linalg.norm(x_axis)
        x_axis = x_axis / xn
        y_axis = np.cross(x_axis, forward)  # points down the image
        rotation = np.stack([x_axis, y_axis, forward], axis=1)
        return cls(position, rotation, width, height, fov_deg, near)

    def world_to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.position) @ self.rotation

    def camera_to_world_dir(self, dirs):
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def project(self, points):
        """Project world points; returns (pixel xy, camera z)."""
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[..., 0] / z + self.cx
            v = self.fy * cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def pixel_rays(self, pixels=None):
        """Unit world-space directions through pixel centers.

        With no argument, returns an (H, W, 3) array for the full frame;
        otherwise ``pixels`` is an (N, 2) array of (col, row) indices.
        """
        if pixels is None:
            jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
            px = np.stack([jj, ii], axis=-1).reshape(-1, 2)
            d = self._dirs_for(px).reshape(self.height, self.width, 3)
            return d
        return self._dirs_for(np.asarray(pixels))

    def _dirs_for(self, px):
        x = (px[:, 0] + 0.5 - self.cx) / self.fx
        y = (px[:, 1] + 0.5 - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        return d_cam @ self.rotation.T

    def ray_direction(self, col, row):
        return self._dirs_for(np.array([[col, row]], dtype=np.float64))[0]
