"""Closed-form math for anisotropic 3D Gaussian primitives.

A primitive is an unnormalized Gaussian density ``exp(-0.5 (x-c)^T S^-1 (x-c))``
scaled by an opacity, where ``S = R diag(s^2) R^T``.  Its effective opacity
along a ray (the particle response) is the orthographic splat value, which by
the Schur complement equals the line maximum of the density times opacity.
"""

from dataclasses import dataclass, field

import numpy as np

# Response floor mirroring 8-bit blending: hits dimmer than this are ignored
# by every tracer and the rasterizer.
ALPHA_MIN = 1.0 / 255.0

# Floor (world units squared) applied to covariance eigenvalues before
# inversion, bounding condition numbers for pancake Gaussians.
EIGEN_FLOOR = 1e-7


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0.0 <= self.t_min < self.t_max:
            raise ValueError("require 0 <= t_min < t_max")

    def at(self, t):
        return self.origin + t * self.direction


@dataclass
class GaussianPrimitive:
    center: np.ndarray
    scale: np.ndarray  # per-axis standard deviations, > 0
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity: float
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    roughness: float = 0.8
    normal: np.ndarray | None = None
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be strictly positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must be normalized")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError("opacity must lie in (0, 1]")
        if self.normal is None:
            self.normal = default_normal(self.scale, self.rotation)
        else:
            self.normal = np.asarray(self.normal, dtype=np.float64)
            if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
                raise ValueError("normal must be unit length")


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def default_normal(scale, rotation):
    """Rotation-frame axis of the smallest scale, oriented toward +z."""
    axis = int(np.argmin(scale))
    n = quat_to_matrix(rotation)[:, axis]
    if n[2] < 0 or (n[2] == 0 and (n[0] < 0 or (n[0] == 0 and n[1] < 0))):
        n = -n
    return n


def covariance(g: GaussianPrimitive):
    """World-space covariance ``R diag(scale^2) R^T``."""
    r = quat_to_matrix(g.rotation)
    return r @ np.diag(g.scale**2) @ r.T


def inverse_covariance(g: GaussianPrimitive):
    """Inverse covariance with the eigenvalue floor applied."""
    r = quat_to_matrix(g.rotation)
    ev = np.maximum(g.scale**2, EIGEN_FLOOR)
    return r @ np.diag(1.0 / ev) @ r.T


def max_response_depth(g: GaussianPrimitive, r: Ray):
    """Ray parameter at which the Gaussian density along the ray is maximal."""
    a = inverse_covariance(g)
    d = g.center - r.origin
    v = r.direction
    return float((d @ a @ v) / (v @ a @ v))


def particle_response(g: GaussianPrimitive, r: Ray):
    """Effective opacity of the Gaussian along the ray line.

    Evaluates the orthographic splat: the 2D marginal of the density on the
    plane orthogonal to the ray direction, at the ray's footprint.  Equal to
    opacity times the line maximum of the density (Schur complement), which
    is the form used here.
    """
    a = inverse_covariance(g)
    d = r.origin - g.center
    v = r.direction
    vav = float(v @ a @ v)
    dad = float(d @ a @ d)
    vad = float(v @ a @ d)
    q = dad - vad * vad / vav
    return g.opacity * np.exp(-0.5 * max(q, 0.0))


def project_covariance(g: GaussianPrimitive, camera):
    """EWA perspective projection of the primitive to the image plane.

    Returns ``(mean2d, cov2d)`` in pixel units, or ``None`` when the center
    lies behind the near plane (the primitive is culled).  The projected
    covariance is floored to stay symmetric positive-definite.
    """
    cam = camera.world_to_camera(g.center[None, :])[0]
    z = cam[2]
    if z <= camera.near:
        return None
    mean = np.array(
        [camera.fx * cam[0] / z + camera.cx, camera.fy * cam[1] / z + camera.cy]
    )
    # Jacobian of the perspective map at the center, in camera space.
    j = np.array(
        [
            [camera.fx / z, 0.0, -camera.fx * cam[0] / (z * z)],
            [0.0, camera.fy / z, -camera.fy * cam[1] / (z * z)],
        ]
    )
    w = camera.rotation.T  # world -> camera
    m = j @ w
    cov2d = m @ covariance(g) @ m.T
    cov2d = floor_cov2d(cov2d)
    return mean, cov2d


def floor_cov2d(cov2d, floor=EIGEN_FLOOR):
    """Clamp the eigenvalues of a symmetric 2x2 matrix from below."""
    c = 0.5 * (cov2d + cov2d.T)
    evals, evecs = np.linalg.eigh(c)
    evals = np.maximum(evals, floor)
    return (evecs * evals) @ evecs.T


def eig2d(cov2d):
    """Eigenvalues (descending) and unit eigenvectors of a symmetric 2x2."""
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    l1, l2 = mid + rad, mid - rad
    if abs(b) > 1e-30:
        e1 = np.array([l1 - c, b])
    elif a >= c:
        e1 = np.array([1.0, 0.0])
    else:
        e1 = np.array([0.0, 1.0])
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.array([-e1[1], e1[0]])
    return (l1, l2), (e1, e2)
