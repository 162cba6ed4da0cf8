"""HTTP control plane for interactive scene editing and frame retrieval.

A single render loop owns the frame state; request handlers mutate a guarded
editable scene, and each frame snapshots the current state before rendering,
so no frame ever sees a half-applied edit.  Frames are served as binary
portable pixmaps with the frame index in the ``X-Frame-Index`` header.

Endpoints
---------
``GET /scene``
    Current scene document (JSON): camera, lights, objects, materials.
``PATCH /scene/camera``
    Body: any of position / look_at / up / fov_deg.
``PATCH /scene/lights/{id}``
    Body: light parameters (radiance, direction, corner, edges, color, ...).
``PATCH /scene/objects/{id}``
    Body: {"transform": {"translate": ..., "rotate": ..., "scale": ...}}.
``PATCH /scene/materials/{id}``
    Body: any of albedo / roughness / emission for the object's material.
``POST /frame``
    Body: {"quality": "preview"|"converged"}; returns the rendered PPM.
    With {"decompose": true} returns JSON instead: the four lighting layers
    plus the composite as base64 float32 PFM blobs (linear radiance, so the
    layers sum to the composite exactly).
"""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .camera import CameraModel
from .geometry import TriangleSet
from .imagefiles import pfm_bytes, ppm_bytes


def pfm_blob(image):
    """Base64 float32 PFM for JSON transport of linear layers."""
    return base64.b64encode(pfm_bytes(image)).decode("ascii")
from .lights import AreaLight, DirectionalLight, EnvironmentLight
from .pipeline import FrameState, RenderConfig, render_frame
from .sceneio import SceneDescription, Transform, load_gaussians, _concat_gaussians
import os


class ApiError(Exception):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = status


class EditableScene:
    """Mutable scene assembled from a SceneDescription.

    Object/material/transform edits mark the geometry dirty; the runtime
    scene is recomposed (and its acceleration structure rebuilt) at the next
    frame snapshot.
    """

    def __init__(self, desc: SceneDescription, runtime, camera):
        self.camera_spec = dict(desc.camera)
        self.resolution = tuple(desc.camera["resolution"])
        self.models = {}
        for ref in desc.gaussian_models:
            base = load_gaussians(os.path.join(desc.base_dir, ref.path))
            self.models[ref.ident] = {
                "base": base,
                "transform": ref.transform,
                "material": dict(ref.material),
            }
        self.meshes = {}
        for mesh in desc.meshes:
            self.meshes[mesh.ident] = {
                "vertices": mesh.vertices,
                "triangles": mesh.triangles,
                "albedo": np.asarray(mesh.albedo, dtype=np.float64),
                "roughness": float(mesh.roughness),
                "emission": np.asarray(mesh.emission, dtype=np.float64),
                "transform": mesh.transform,
            }
        self.lights = {}
        self.light_order = []
        for decl in desc.lights:
            self.lights[decl.ident] = {"type": decl.kind, **decl.params}
            self.light_order.append(decl.ident)
        self.runtime = runtime
        self.camera = camera
        self.geometry_dirty = False
        self.lights_dirty = False

    # -- JSON views ---------------------------------------------------------

    def to_json(self):
        def arr(x):
            return np.asarray(x, dtype=np.float64).tolist()

        objects = {}
        materials = {}
        for ident, m in self.models.items():
            t = m["transform"]
            objects[ident] = {
                "kind": "gaussians",
                "count": len(m["base"]),
                "transform": {"translate": arr(t.translate), "rotate": arr(t.rotate),
                               "scale": t.scale},
            }
            materials[ident] = {k: (arr(v) if not np.isscalar(v) else v)
                                for k, v in m["material"].items()}
        for ident, m in self.meshes.items():
            t = m["transform"]
            objects[ident] = {
                "kind": "mesh",
                "triangles": int(len(m["triangles"])),
                "transform": {"translate": arr(t.translate), "rotate": arr(t.rotate),
                               "scale": t.scale},
            }
            materials[ident] = {
                "albedo": arr(m["albedo"]),
                "roughness": m["roughness"],
                "emission": arr(m["emission"]),
            }
        lights = {}
        for ident in self.light_order:
            entry = self.lights[ident]
            lights[ident] = {
                k: (np.asarray(v, dtype=np.float64).tolist()
                    if isinstance(v, (list, tuple, np.ndarray)) else v)
                for k, v in entry.items()
            }
        return {
            "camera": {
                "position": arr(self.camera_spec["position"]),
                "look_at": arr(self.camera_spec["look_at"]),
                "up": arr(self.camera_spec.get("up", [0, 1, 0])),
                "fov_deg": float(self.camera_spec["fov_deg"]),
                "resolution": list(self.resolution),
            },
            "lights": lights,
            "objects": objects,
            "materials": materials,
        }

    # -- edits --------------------------------------------------------------

    @staticmethod
    def _vec(body, key, n=3):
        v = np.asarray(body[key], dtype=np.float64)
        if v.shape != (n,):
            raise ApiError(400, f"field '{key}' must be a {n}-vector")
        return v

    def patch_light(self, ident, body):
        if ident not in self.lights:
            raise ApiError(404, f"no light with id '{ident}'")
        entry = self.lights[ident]
        allowed = {"radiance", "direction", "corner", "edge_u", "edge_v",
                   "two_sided", "color"}
        for key, value in body.items():
            if key not in allowed:
                raise ApiError(400, f"unknown light field '{key}'")
            if key == "two_sided":
                entry[key] = bool(value)
            else:
                v = self._vec(body, key)
                if key in ("radiance", "color") and np.any(v < 0):
                    raise ApiError(400, f"field '{key}' must be non-negative")
                entry[key] = v.tolist()
        self.lights_dirty = True
        return {ident: self.lights[ident]}

    def patch_object(self, ident, body):
        target = self.models.get(ident) or self.meshes.get(ident)
        if target is None:
            raise ApiError(404, f"no object with id '{ident}'")
        for key in body:
            if key != "transform":
                raise ApiError(400, f"unknown object field '{key}'")
        t = body.get("transform", {})
        for key in t:
            if key not in ("translate", "rotate", "scale"):
                raise ApiError(400, f"unknown transform field '{key}'")
        old = target["transform"]
        translate = (self._vec(t, "translate") if "translate" in t
                     else old.translate)
        rotate = (self._vec(t, "rotate", 4) if "rotate" in t else old.rotate)
        nq = np.linalg.norm(rotate)
        if nq < 1e-9:
            raise ApiError(400, "field 'rotate' must be a nonzero quaternion")
        scale = float(t.get("scale", old.scale))
        if isinstance(t.get("scale"), (list, tuple)):
            raise ApiError(400, "field 'scale' must be a uniform scalar")
        if scale <= 0:
            raise ApiError(400, "field 'scale' must be positive")
        target["transform"] = Transform(translate, rotate / nq, scale)
        self.geometry_dirty = True
        return {"id": ident, "transform": {
            "translate": translate.tolist(), "rotate": (rotate / nq).tolist(),
            "scale": scale}}

    def patch_material(self, ident, body):
        allowed = {"albedo", "roughness", "emission"}
        for key in body:
            if key not in allowed:
                raise ApiError(400, f"unknown material field '{key}'")
        if ident in self.models:
            mat = self.models[ident]["material"]
            if "albedo" in body:
                mat["albedo"] = self._vec(body, "albedo").tolist()
            if "emission" in body:
                mat["emission"] = self._vec(body, "emission").tolist()
            if "roughness" in body:
                r = float(body["roughness"])
                if not 0.0 <= r <= 1.0:
                    raise ApiError(400, "field 'roughness' must lie in [0, 1]")
                mat["roughness"] = r
            self.geometry_dirty = True
            return {"id": ident, "material": mat}
        if ident in self.meshes:
            m = self.meshes[ident]
            if "albedo" in body:
                m["albedo"] = self._vec(body, "albedo")
            if "emission" in body:
                m["emission"] = self._vec(body, "emission")
            if "roughness" in body:
                r = float(body["roughness"])
                if not 0.0 <= r <= 1.0:
                    raise ApiError(400, "field 'roughness' must lie in [0, 1]")
                m["roughness"] = r
            self.geometry_dirty = True
            return {"id": ident, "material": {
                "albedo": np.asarray(m["albedo"]).tolist(),
                "roughness": m["roughness"],
                "emission": np.asarray(m["emission"]).tolist()}}
        raise ApiError(404, f"no object with id '{ident}'")

    def patch_camera(self, body):
        allowed = {"position", "look_at", "up", "fov_deg"}
        for key in body:
            if key not in allowed:
                raise ApiError(400, f"unknown camera field '{key}'")
        spec = dict(self.camera_spec)
        for key in ("position", "look_at", "up"):
            if key in body:
                spec[key] = self._vec(body, key).tolist()
        if "fov_deg" in body:
            fov = float(body["fov_deg"])
            if not 1.0 < fov < 179.0:
                raise ApiError(400, "field 'fov_deg' must lie in (1, 179)")
            spec["fov_deg"] = fov
        try:
            self.camera = CameraModel.look_at(
                spec["position"], spec["look_at"], spec.get("up", [0, 1, 0]),
                self.resolution[0], self.resolution[1], spec["fov_deg"],
            )
        except ValueError as e:
            raise ApiError(400, str(e)) from None
        self.camera_spec = spec
        return {"camera": self.to_json()["camera"]}

    # -- runtime snapshot -----------------------------------------------------

    def refresh_runtime(self):
        if self.geometry_dirty:
            sets = []
            for m in self.models.values():
                g = m["transform"].apply_gaussians(m["base"])
                mat = m["material"]
                if "albedo" in mat:
                    g.albedo[:] = np.asarray(mat["albedo"], dtype=np.float64)
                if "roughness" in mat:
                    g.roughness[:] = float(mat["roughness"])
                if "emission" in mat:
                    g.emission[:] = np.asarray(mat["emission"], dtype=np.float64)
                sets.append(g)
            self.runtime.gaussians = _concat_gaussians(sets)
            tri_sets = []
            for m in self.meshes.values():
                verts = m["transform"].apply_points(m["vertices"])
                tri = m["triangles"]
                t = len(tri)
                tri_sets.append(TriangleSet(
                    v0=verts[tri[:, 0]], v1=verts[tri[:, 1]], v2=verts[tri[:, 2]],
                    albedo=np.tile(m["albedo"], (t, 1)),
                    roughness=np.full(t, m["roughness"]),
                    emission=np.tile(m["emission"], (t, 1)),
                ))
            self.runtime.triangles = (TriangleSet.concat(tri_sets)
                                      if tri_sets else TriangleSet.empty())
            self.runtime.bump_version()
            self.geometry_dirty = False
        if self.lights_dirty:
            lights = []
            environment = self.runtime.environment
            for ident in self.light_order:
                entry = self.lights[ident]
                if entry["type"] == "directional":
                    lights.append(DirectionalLight(entry["direction"],
                                                   entry["radiance"]))
                elif entry["type"] == "area":
                    lights.append(AreaLight(entry["corner"], entry["edge_u"],
                                            entry["edge_v"], entry["radiance"],
                                            entry.get("two_sided", False)))
                elif entry["type"] == "environment":
                    if "color" in entry:
                        environment = EnvironmentLight(color=entry["color"])
            self.runtime.lights = lights
            self.runtime.environment = environment
            self.lights_dirty = False


class RenderService:
    """Owns the frame loop; handlers communicate through guarded state."""

    def __init__(self, desc, runtime, camera, config: RenderConfig, seed,
                 converge_frames=16):
        # light declarations double as runtime lights: rebuild once up front
        self.editable = EditableScene(desc, runtime, camera)
        self.editable.lights_dirty = True
        self.config = config
        self.state = FrameState(master_seed=seed)
        self.converge_frames = max(1, int(converge_frames))
        self.state_lock = threading.Lock()
        self.render_lock = threading.Lock()

    def scene_document(self):
        with self.state_lock:
            return self.editable.to_json()

    def apply_patch(self, section, ident, body):
        with self.state_lock:
            if section == "lights":
                return self.editable.patch_light(ident, body)
            if section == "objects":
                return self.editable.patch_object(ident, body)
            if section == "materials":
                return self.editable.patch_material(ident, body)
            if section == "camera":
                return self.editable.patch_camera(body)
            raise ApiError(404, f"unknown scene section '{section}'")

    def render_next(self, quality="preview", decompose=False):
        """Render the next frame (or a converged run).

        Returns (ppm, index) normally; with ``decompose`` returns
        (layers dict incl. composite as float32 PFM bytes, index) so the
        linear-space sum identity survives transport exactly.
        """
        if quality not in ("preview", "converged"):
            raise ApiError(400, "field 'quality' must be preview or converged")
        with self.render_lock:
            with self.state_lock:
                self.editable.refresh_runtime()
                scene = self.editable.runtime
                camera = self.editable.camera
            n = 1 if quality == "preview" else self.converge_frames
            out = None
            for _ in range(n):
                out = render_frame(scene, camera, self.state, self.config)
            index = self.state.frame_index - 1
            if decompose:
                blobs = {name: pfm_blob(layer)
                         for name, layer in out.layers.items()}
                blobs["composite"] = pfm_blob(out.hdr)
                return blobs, index
            return ppm_bytes(out.ldr), index


def make_handler(service: RenderService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _send_json(self, obj, status=200):
            payload = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _send_error_json(self, e: ApiError):
            self._send_json({"error": str(e)}, status=e.status)

        def _read_body(self):
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw or b"{}")
            except json.JSONDecodeError as err:
                raise ApiError(400, f"body is not valid JSON: {err.msg}") from None
            if not isinstance(body, dict):
                raise ApiError(400, "body must be a JSON object")
            return body

        def do_GET(self):
            if self.path.rstrip("/") == "/scene":
                self._send_json(service.scene_document())
            else:
                self._send_json({"error": "not found"}, status=404)

        def do_PATCH(self):
            parts = [p for p in self.path.split("/") if p]
            try:
                body = self._read_body()
                if len(parts) == 2 and parts[0] == "scene" and parts[1] == "camera":
                    self._send_json(service.apply_patch("camera", None, body))
                elif len(parts) == 3 and parts[0] == "scene":
                    self._send_json(service.apply_patch(parts[1], parts[2], body))
                else:
                    raise ApiError(404, "not found")
            except ApiError as e:
                self._send_error_json(e)

        def do_POST(self):
            if self.path.rstrip("/") != "/frame":
                self._send_json({"error": "not found"}, status=404)
                return
            try:
                body = self._read_body()
                decompose = bool(body.get("decompose", False))
                result, index = service.render_next(
                    body.get("quality", "preview"), decompose)
            except ApiError as e:
                self._send_error_json(e)
                return
            if decompose:
                payload = json.dumps({"frame_index": index, "layers": result}
                                     ).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.send_header("X-Frame-Index", str(index))
                self.end_headers()
                self.wfile.write(payload)
                return
            self.send_response(200)
            self.send_header("Content-Type", "image/x-portable-pixmap")
            self.send_header("Content-Length", str(len(result)))
            self.send_header("X-Frame-Index", str(index))
            self.end_headers()
            self.wfile.write(result)

    return Handler


def start_server(desc, runtime, camera, config, seed, host="127.0.0.1", port=0,
                 converge_frames=16):
    """Start the service on a background thread; returns (server, service)."""
    service = RenderService(desc, runtime, camera, config, seed, converge_frames)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, service


def serve_forever(desc, runtime, camera, config, seed, host, port,
                  converge_frames=16):
    service = RenderService(desc, runtime, camera, config, seed, converge_frames)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    print(f"splatlight service listening on http://{host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0
