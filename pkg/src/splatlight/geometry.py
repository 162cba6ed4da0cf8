"""Structure-of-arrays containers for scene geometry.

The per-primitive dataclasses in :mod:`splatlight.gsmath` are the unit-level
contract; rendering at scene scale runs on these flat arrays instead so the
numba kernels and the rasterizer can stay allocation-free.
"""

from dataclasses import dataclass, field

import numpy as np

from .gsmath import EIGEN_FLOOR, GaussianPrimitive, quat_to_matrix


def _as3(a, n, name):
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (n, 3):
        raise ValueError(f"{name} must have shape ({n}, 3)")
    return a


@dataclass
class GaussianSet:
    center: np.ndarray  # (G, 3)
    scale: np.ndarray  # (G, 3)
    quat: np.ndarray  # (G, 4), unit (w, x, y, z)
    opacity: np.ndarray  # (G,)
    albedo: np.ndarray  # (G, 3)
    roughness: np.ndarray  # (G,)
    normal: np.ndarray  # (G, 3)
    emission: np.ndarray  # (G, 3)

    rot: np.ndarray = field(init=False)  # (G, 3, 3)
    cov: np.ndarray = field(init=False)  # (G, 3, 3)
    inv_cov: np.ndarray = field(init=False)  # (G, 3, 3), eigenvalue-floored

    def __post_init__(self):
        g = len(self.center)
        self.center = _as3(self.center, g, "center")
        self.scale = _as3(self.scale, g, "scale")
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(g, 4)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(g)
        self.albedo = _as3(self.albedo, g, "albedo")
        self.roughness = np.asarray(self.roughness, dtype=np.float64).reshape(g)
        self.normal = _as3(self.normal, g, "normal")
        self.emission = _as3(self.emission, g, "emission")
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be strictly positive")
        if np.any(self.opacity <= 0) or np.any(self.opacity > 1):
            raise ValueError("opacity must lie in (0, 1]")
        self.rot = np.empty((g, 3, 3))
        for i in range(g):
            self.rot[i] = quat_to_matrix(self.quat[i])
        s2 = self.scale**2
        self.cov = np.einsum("gij,gj,gkj->gik", self.rot, s2, self.rot)
        inv = 1.0 / np.maximum(s2, EIGEN_FLOOR)
        self.inv_cov = np.einsum("gij,gj,gkj->gik", self.rot, inv, self.rot)

    def __len__(self):
        return len(self.center)

    @classmethod
    def from_primitives(cls, prims):
        prims = list(prims)
        if not prims:
            return cls.empty()
        return cls(
            center=np.array([p.center for p in prims]),
            scale=np.array([p.scale for p in prims]),
            quat=np.array([p.rotation for p in prims]),
            opacity=np.array([p.opacity for p in prims]),
            albedo=np.array([p.albedo for p in prims]),
            roughness=np.array([p.roughness for p in prims]),
            normal=np.array([p.normal for p in prims]),
            emission=np.array([p.emission for p in prims]),
        )

    @classmethod
    def empty(cls):
        z = np.zeros((0, 3))
        return cls(z, np.ones((0, 3)), np.zeros((0, 4)), np.zeros(0), z,
                   np.zeros(0), z, z)

    def primitive(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.center[i],
            scale=self.scale[i],
            rotation=self.quat[i],
            opacity=float(self.opacity[i]),
            albedo=self.albedo[i],
            roughness=float(self.roughness[i]),
            normal=self.normal[i] / np.linalg.norm(self.normal[i]),
            emission=self.emission[i],
        )


@dataclass
class TriangleSet:
    v0: np.ndarray  # (T, 3)
    v1: np.ndarray
    v2: np.ndarray
    albedo: np.ndarray  # (T, 3)
    roughness: np.ndarray  # (T,)
    emission: np.ndarray  # (T, 3)

    normal: np.ndarray = field(init=False)  # (T, 3) face normals

    def __post_init__(self):
        t = len(self.v0)
        self.v0 = _as3(self.v0, t, "v0")
        self.v1 = _as3(self.v1, t, "v1")
        self.v2 = _as3(self.v2, t, "v2")
        self.albedo = _as3(self.albedo, t, "albedo")
        self.roughness = np.asarray(self.roughness, dtype=np.float64).reshape(t)
        self.emission = _as3(self.emission, t, "emission")
        n = np.cross(self.v1 - self.v0, self.v2 - self.v0)
        lens = np.linalg.norm(n, axis=1)
        if np.any(lens < 1e-15):
            raise ValueError("degenerate triangle")
        self.normal = n / lens[:, None]

    def __len__(self):
        return len(self.v0)

    @classmethod
    def empty(cls):
        z = np.zeros((0, 3))
        return cls(z, z, z, z, np.zeros(0), z)

    @classmethod
    def concat(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            v0=np.concatenate([s.v0 for s in sets]),
            v1=np.concatenate([s.v1 for s in sets]),
            v2=np.concatenate([s.v2 for s in sets]),
            albedo=np.concatenate([s.albedo for s in sets]),
            roughness=np.concatenate([s.roughness for s in sets]),
            emission=np.concatenate([s.emission for s in sets]),
        )


def make_quad(corner, edge_u, edge_v, albedo, roughness=1.0, emission=(0, 0, 0)):
    """Two triangles spanning corner + [0,1]^2 * (edge_u, edge_v)."""
    corner = np.asarray(corner, dtype=np.float64)
    eu = np.asarray(edge_u, dtype=np.float64)
    ev = np.asarray(edge_v, dtype=np.float64)
    verts = [corner, corner + eu, corner + eu + ev, corner + ev]
    v0 = np.array([verts[0], verts[0]])
    v1 = np.array([verts[1], verts[2]])
    v2 = np.array([verts[2], verts[3]])
    al = np.tile(np.asarray(albedo, dtype=np.float64), (2, 1))
    em = np.tile(np.asarray(emission, dtype=np.float64), (2, 1))
    return TriangleSet(v0, v1, v2, al, np.full(2, float(roughness)), em)
