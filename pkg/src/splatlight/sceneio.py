"""Scene files and Gaussian point-cloud assets.

Scenes are JSON documents (schema below) referencing binary little-endian
point-cloud files in the 3DGS PLY convention.  Parsing reports line/column
positions for syntax errors and full key paths for schema violations;
unknown keys are rejected.

Scene schema::

    {
      "camera":   {"position": [x,y,z], "look_at": [x,y,z], "up": [x,y,z],
                   "fov_deg": 60.0, "resolution": [width, height]},
      "gaussians": [{"id": "...", "path": "cloud.ply",
                     "translate": [x,y,z], "rotate": [w,x,y,z], "scale": 1.0,
                     "material": {"albedo": [r,g,b], "roughness": 0.5,
                                   "emission": [r,g,b]}}],
      "meshes":   [{"id": "...", "vertices": [[x,y,z], ...],
                    "triangles": [[i,j,k], ...], "albedo": [r,g,b],
                    "roughness": 1.0, "emission": [r,g,b],
                    "translate": ..., "rotate": ..., "scale": ...}],
      "lights":   [{"id": "...", "type": "directional", "direction": [..],
                    "radiance": [..]} |
                   {"type": "area", "corner": [..], "edge_u": [..],
                    "edge_v": [..], "radiance": [..], "two_sided": false} |
                   {"type": "environment", "color": [..]} |
                   {"type": "environment", "map": "env.pfm"}],
      "render":   {"seed": 1, "frames": 8, "bias_scale": 1.0,
                   "probe_spacing": 16, "rays_per_probe": 16,
                   "output_prefix": "out/frame", "converge_frames": 16,
                   "passes": {"direct": true, "indirect": true,
                               "glossy": true, "emission": true}}
    }
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .geometry import GaussianSet, TriangleSet
from .gsmath import quat_multiply, quat_to_matrix
from .imagefiles import read_pfm
from .lights import AreaLight, DirectionalLight, EnvironmentLight
from .pipeline import RenderScene

SH_DC = 0.2820948  # first spherical-harmonic basis constant


class SceneError(ValueError):
    pass


class PlyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Point-cloud assets (binary little-endian PLY)
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}

_REQUIRED = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]
_MATERIAL = ["albedo_0", "albedo_1", "albedo_2", "roughness",
             "normal_0", "normal_1", "normal_2"]
_SH_COLOR = ["f_dc_0", "f_dc_1", "f_dc_2"]


def load_gaussians(path) -> GaussianSet:
    """Load a 3DGS-convention point cloud into a GaussianSet.

    Per-vertex scales are stored in log space, the quaternion unnormalized,
    the opacity as a logit.  Material properties are taken verbatim when
    present; otherwise the albedo comes from the spherical-harmonic DC color
    and roughness/normals fall back to defaults.
    """
    with open(path, "rb") as f:
        data = f.read()

    offset = 0

    def next_line():
        nonlocal offset
        end = data.find(b"\n", offset)
        if end < 0:
            raise PlyError(f"{path}: header truncated at byte offset {offset}")
        line = data[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        return line

    if next_line() != "ply":
        raise PlyError(f"{path}: missing 'ply' magic at byte offset 0")
    fmt = next_line()
    if fmt != "format binary_little_endian 1.0":
        raise PlyError(
            f"{path}: unsupported format {fmt!r} at byte offset {offset - len(fmt) - 1}"
        )
    n_vertices = None
    props = []
    while True:
        at = offset
        line = next_line()
        if line == "end_header":
            break
        if line.startswith("comment"):
            continue
        parts = line.split()
        if parts[0] == "element":
            if parts[1] == "vertex":
                n_vertices = int(parts[2])
            elif n_vertices is not None:
                break  # only the vertex element is read
        elif parts[0] == "property":
            if n_vertices is None:
                continue
            if parts[1] == "list":
                raise PlyError(f"{path}: list property unsupported at byte offset {at}")
            if parts[1] not in _PLY_TYPES:
                raise PlyError(
                    f"{path}: unknown property type {parts[1]!r} at byte offset {at}"
                )
            props.append((parts[2], parts[1]))
        else:
            raise PlyError(f"{path}: malformed header line {line!r} at byte offset {at}")
    if n_vertices is None:
        raise PlyError(f"{path}: no vertex element in header")

    names = [p[0] for p in props]
    for req in _REQUIRED:
        if req not in names:
            raise PlyError(f"{path}: missing required property '{req}'")
    has_material = all(m in names for m in _MATERIAL)
    has_sh = all(s in names for s in _SH_COLOR)
    if not has_material and not has_sh:
        raise PlyError(
            f"{path}: missing required property 'albedo_0' (or 'f_dc_0' fallback)"
        )

    dtype = np.dtype([(n, _PLY_TYPES[t][0]) for n, t in props])
    need = n_vertices * dtype.itemsize
    if len(data) - offset < need:
        raise PlyError(
            f"{path}: payload truncated at byte offset {len(data)} "
            f"(need {offset + need})"
        )
    rec = np.frombuffer(data, dtype=dtype, count=n_vertices, offset=offset)

    def col(name):
        return rec[name].astype(np.float64)

    center = np.stack([col("x"), col("y"), col("z")], axis=1)
    scale = np.exp(np.stack([col("scale_0"), col("scale_1"), col("scale_2")], axis=1))
    quat = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    norms = np.linalg.norm(quat, axis=1, keepdims=True)
    quat = np.where(norms > 1e-12, quat / np.maximum(norms, 1e-12),
                    np.array([1.0, 0, 0, 0]))
    opacity = 1.0 / (1.0 + np.exp(-col("opacity")))
    opacity = np.clip(opacity, 1e-6, 1.0)

    if has_material:
        albedo = np.clip(np.stack([col(f"albedo_{i}") for i in range(3)], axis=1), 0, 1)
        roughness = np.clip(col("roughness"), 0.0, 1.0)
        normal = np.stack([col(f"normal_{i}") for i in range(3)], axis=1)
        lens = np.linalg.norm(normal, axis=1, keepdims=True)
        bad = lens[:, 0] < 1e-9
        normal = np.where(lens > 1e-9, normal / np.maximum(lens, 1e-9), 0.0)
        if bad.any():
            normal[bad] = _shortest_axis_normals(scale[bad], quat[bad])
    else:
        f_dc = np.stack([col(f)for f in _SH_COLOR], axis=1)
        albedo = np.clip(0.5 + SH_DC * f_dc, 0.0, 1.0)
        roughness = np.full(n_vertices, 0.8)
        normal = _shortest_axis_normals(scale, quat)

    return GaussianSet(
        center=center, scale=scale, quat=quat, opacity=opacity,
        albedo=albedo, roughness=roughness, normal=normal,
        emission=np.zeros((n_vertices, 3)),
    )


def _shortest_axis_normals(scale, quat):
    n = np.empty((len(scale), 3))
    for i in range(len(scale)):
        axis = int(np.argmin(scale[i]))
        v = quat_to_matrix(quat[i])[:, axis]
        if v[2] < 0 or (v[2] == 0 and (v[0] < 0 or (v[0] == 0 and v[1] < 0))):
            v = -v
        n[i] = v
    return n


def write_gaussians(path, gaussians: GaussianSet, with_material=True):
    """Write a GaussianSet back to the binary PLY convention."""
    n = len(gaussians)
    props = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]
    if with_material:
        props += _MATERIAL
    else:
        props += _SH_COLOR
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {n}\n"
    header += "".join(f"property float {p}\n" for p in props)
    header += "end_header\n"

    op = np.clip(gaussians.opacity, 1e-6, 1 - 1e-6)
    cols = [gaussians.center[:, 0], gaussians.center[:, 1], gaussians.center[:, 2]]
    cols += [np.log(gaussians.scale[:, i]) for i in range(3)]
    cols += [gaussians.quat[:, i] for i in range(4)]
    cols += [np.log(op / (1.0 - op))]
    if with_material:
        cols += [gaussians.albedo[:, i] for i in range(3)]
        cols += [gaussians.roughness]
        cols += [gaussians.normal[:, i] for i in range(3)]
    else:
        cols += [(gaussians.albedo[:, i] - 0.5) / SH_DC for i in range(3)]
    payload = np.stack(cols, axis=1).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------


@dataclass
class Transform:
    translate: np.ndarray
    rotate: np.ndarray  # unit quaternion (w, x, y, z)
    scale: float  # uniform only

    @classmethod
    def parse(cls, obj, where):
        t = np.asarray(obj.get("translate", [0.0, 0.0, 0.0]), dtype=np.float64)
        q = np.asarray(obj.get("rotate", [1.0, 0.0, 0.0, 0.0]), dtype=np.float64)
        s = obj.get("scale", 1.0)
        if isinstance(s, (list, tuple)):
            raise SceneError(
                f"{where}.scale: non-uniform model scaling is not supported"
            )
        s = float(s)
        if s <= 0:
            raise SceneError(f"{where}.scale: must be positive")
        nq = np.linalg.norm(q)
        if nq < 1e-9:
            raise SceneError(f"{where}.rotate: degenerate quaternion")
        return cls(t, q / nq, s)

    def apply_points(self, pts):
        r = quat_to_matrix(self.rotate)
        return self.scale * (pts @ r.T) + self.translate

    def apply_gaussians(self, g: GaussianSet) -> GaussianSet:
        r = quat_to_matrix(self.rotate)
        quat = np.array([quat_multiply(self.rotate, q) for q in g.quat])
        return GaussianSet(
            center=self.apply_points(g.center),
            scale=g.scale * self.scale,
            quat=quat,
            opacity=g.opacity.copy(),
            albedo=g.albedo.copy(),
            roughness=g.roughness.copy(),
            normal=g.normal @ r.T,
            emission=g.emission.copy(),
        )


@dataclass
class GaussianModelRef:
    ident: str
    path: str
    transform: Transform
    material: dict  # optional overrides: albedo / roughness / emission


@dataclass
class MeshObject:
    ident: str
    vertices: np.ndarray
    triangles: np.ndarray
    albedo: np.ndarray
    roughness: float
    emission: np.ndarray
    transform: Transform


@dataclass
class LightDecl:
    ident: str
    kind: str
    params: dict


@dataclass
class RenderSettings:
    seed: int = 1
    frames: int = 8
    bias_scale: float = 1.0
    probe_spacing: int = 16
    rays_per_probe: int = 16
    output_prefix: str = "out/frame"
    converge_frames: int = 16
    passes: dict = field(default_factory=lambda: {
        "direct": True, "indirect": True, "glossy": True, "emission": True,
    })


@dataclass
class SceneDescription:
    camera: dict
    gaussian_models: list
    meshes: list
    lights: list
    settings: RenderSettings
    base_dir: str = "."

    def make_camera(self, width=None, height=None) -> CameraModel:
        res = self.camera["resolution"]
        return CameraModel.look_at(
            self.camera["position"], self.camera["look_at"],
            self.camera.get("up", [0, 1, 0]),
            width or res[0], height or res[1], self.camera["fov_deg"],
        )

    def build_runtime(self) -> RenderScene:
        """Load referenced assets and assemble the runtime scene."""
        sets = []
        for ref in self.gaussian_models:
            g = load_gaussians(os.path.join(self.base_dir, ref.path))
            g = ref.transform.apply_gaussians(g)
            mat = ref.material
            if "albedo" in mat:
                g.albedo[:] = np.asarray(mat["albedo"], dtype=np.float64)
            if "roughness" in mat:
                g.roughness[:] = float(mat["roughness"])
            if "emission" in mat:
                g.emission[:] = np.asarray(mat["emission"], dtype=np.float64)
            sets.append(g)
        gaussians = _concat_gaussians(sets)

        tri_sets = []
        for mesh in self.meshes:
            verts = mesh.transform.apply_points(mesh.vertices)
            tri = mesh.triangles
            t = len(tri)
            tri_sets.append(TriangleSet(
                v0=verts[tri[:, 0]], v1=verts[tri[:, 1]], v2=verts[tri[:, 2]],
                albedo=np.tile(mesh.albedo, (t, 1)),
                roughness=np.full(t, mesh.roughness),
                emission=np.tile(mesh.emission, (t, 1)),
            ))
        triangles = TriangleSet.concat(tri_sets) if tri_sets else TriangleSet.empty()

        lights = []
        environment = None
        for decl in self.lights:
            p = decl.params
            if decl.kind == "directional":
                lights.append(DirectionalLight(p["direction"], p["radiance"]))
            elif decl.kind == "area":
                lights.append(AreaLight(p["corner"], p["edge_u"], p["edge_v"],
                                        p["radiance"], p.get("two_sided", False)))
            elif decl.kind == "environment":
                if "map" in p:
                    img = read_pfm(os.path.join(self.base_dir, p["map"]))
                    environment = EnvironmentLight(image=img)
                else:
                    environment = EnvironmentLight(color=p["color"])
        return RenderScene(gaussians, triangles, lights, environment)


def _concat_gaussians(sets):
    sets = [s for s in sets if len(s)]
    if not sets:
        return GaussianSet.empty()
    return GaussianSet(
        center=np.concatenate([s.center for s in sets]),
        scale=np.concatenate([s.scale for s in sets]),
        quat=np.concatenate([s.quat for s in sets]),
        opacity=np.concatenate([s.opacity for s in sets]),
        albedo=np.concatenate([s.albedo for s in sets]),
        roughness=np.concatenate([s.roughness for s in sets]),
        normal=np.concatenate([s.normal for s in sets]),
        emission=np.concatenate([s.emission for s in sets]),
    )


_TOP_KEYS = {"camera", "gaussians", "meshes", "lights", "render"}
_CAMERA_KEYS = {"position", "look_at", "up", "fov_deg", "resolution"}
_GAUSS_KEYS = {"id", "path", "translate", "rotate", "scale", "material"}
_MATERIAL_KEYS = {"albedo", "roughness", "emission"}
_MESH_KEYS = {"id", "vertices", "triangles", "albedo", "roughness", "emission",
              "translate", "rotate", "scale"}
_LIGHT_KEYS = {"id", "type", "direction", "radiance", "corner", "edge_u",
               "edge_v", "two_sided", "color", "map"}
_RENDER_KEYS = {"seed", "frames", "bias_scale", "probe_spacing",
                "rays_per_probe", "output_prefix", "converge_frames", "passes"}
_PASS_KEYS = {"direct", "indirect", "glossy", "emission"}


def _check_keys(obj, allowed, where):
    for k in obj:
        if k not in allowed:
            raise SceneError(f"{where}: unknown key '{k}'")


def load_scene(path) -> SceneDescription:
    """Parse a scene file; raises SceneError with location context."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return parse_scene(doc, base_dir=os.path.dirname(os.path.abspath(path)),
                       name=os.path.basename(path))


def parse_scene(doc, base_dir=".", name="<scene>") -> SceneDescription:
    if not isinstance(doc, dict):
        raise SceneError(f"{name}: top level must be an object")
    _check_keys(doc, _TOP_KEYS, name)
    if "camera" not in doc:
        raise SceneError(f"{name}: missing required section 'camera'")
    cam = doc["camera"]
    _check_keys(cam, _CAMERA_KEYS, f"{name}.camera")
    for req in ("position", "look_at", "fov_deg", "resolution"):
        if req not in cam:
            raise SceneError(f"{name}.camera: missing required key '{req}'")
    fov = float(cam["fov_deg"])
    if not 1.0 < fov < 179.0:
        raise SceneError(f"{name}.camera.fov_deg: must lie in (1, 179)")
    res = cam["resolution"]
    if len(res) != 2 or res[0] <= 0 or res[1] <= 0:
        raise SceneError(f"{name}.camera.resolution: must be [width, height] > 0")

    seen_ids = set()

    def claim(ident, where):
        if ident in seen_ids:
            raise SceneError(f"{where}: duplicate id '{ident}'")
        seen_ids.add(ident)
        return ident

    models = []
    for i, entry in enumerate(doc.get("gaussians", [])):
        where = f"{name}.gaussians[{i}]"
        _check_keys(entry, _GAUSS_KEYS, where)
        if "path" not in entry:
            raise SceneError(f"{where}: missing required key 'path'")
        full = os.path.join(base_dir, entry["path"])
        if not os.path.exists(full):
            raise SceneError(f"{where}: referenced file not found: {entry['path']}")
        mat = entry.get("material", {})
        _check_keys(mat, _MATERIAL_KEYS, f"{where}.material")
        models.append(GaussianModelRef(
            claim(entry.get("id", f"gauss{i}"), where), entry["path"],
            Transform.parse(entry, where), dict(mat),
        ))

    meshes = []
    for i, entry in enumerate(doc.get("meshes", [])):
        where = f"{name}.meshes[{i}]"
        _check_keys(entry, _MESH_KEYS, where)
        for req in ("vertices", "triangles"):
            if req not in entry:
                raise SceneError(f"{where}: missing required key '{req}'")
        verts = np.asarray(entry["vertices"], dtype=np.float64)
        tris = np.asarray(entry["triangles"], dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise SceneError(f"{where}.vertices: expected a list of [x, y, z]")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise SceneError(f"{where}.triangles: expected a list of [i, j, k]")
        if tris.min(initial=0) < 0 or tris.max(initial=-1) >= len(verts):
            raise SceneError(f"{where}.triangles: vertex index out of range")
        meshes.append(MeshObject(
            claim(entry.get("id", f"mesh{i}"), where), verts, tris,
            np.asarray(entry.get("albedo", [0.5, 0.5, 0.5]), dtype=np.float64),
            float(entry.get("roughness", 1.0)),
            np.asarray(entry.get("emission", [0.0, 0.0, 0.0]), dtype=np.float64),
            Transform.parse(entry, where),
        ))

    lights = []
    for i, entry in enumerate(doc.get("lights", [])):
        where = f"{name}.lights[{i}]"
        _check_keys(entry, _LIGHT_KEYS, where)
        kind = entry.get("type")
        if kind not in ("directional", "area", "environment"):
            raise SceneError(f"{where}.type: expected directional/area/environment")
        params = {k: v for k, v in entry.items() if k not in ("id", "type")}
        if kind == "directional" and ("direction" not in params or "radiance" not in params):
            raise SceneError(f"{where}: directional light needs direction and radiance")
        if kind == "area":
            for req in ("corner", "edge_u", "edge_v", "radiance"):
                if req not in params:
                    raise SceneError(f"{where}: area light needs '{req}'")
        if kind == "environment" and ("color" not in params) == ("map" not in params):
            raise SceneError(f"{where}: environment light needs color or map")
        lights.append(LightDecl(claim(entry.get("id", f"light{i}"), where),
                                kind, params))

    ropts = doc.get("render", {})
    _check_keys(ropts, _RENDER_KEYS, f"{name}.render")
    passes = dict(RenderSettings().passes)
    if "passes" in ropts:
        _check_keys(ropts["passes"], _PASS_KEYS, f"{name}.render.passes")
        passes.update(ropts["passes"])
    settings = RenderSettings(
        seed=int(ropts.get("seed", 1)),
        frames=int(ropts.get("frames", 8)),
        bias_scale=float(ropts.get("bias_scale", 1.0)),
        probe_spacing=int(ropts.get("probe_spacing", 16)),
        rays_per_probe=int(ropts.get("rays_per_probe", 16)),
        output_prefix=ropts.get("output_prefix", "out/frame"),
        converge_frames=int(ropts.get("converge_frames", 16)),
        passes=passes,
    )
    if settings.frames <= 0:
        raise SceneError(f"{name}.render.frames: must be positive")
    if not 0.0 < settings.bias_scale <= 1.0:
        raise SceneError(f"{name}.render.bias_scale: must lie in (0, 1]")

    return SceneDescription(
        camera=dict(cam), gaussian_models=models, meshes=meshes,
        lights=lights, settings=settings, base_dir=base_dir,
    )
