"""Forward-only software splatting rasterizer.

In-frustum Gaussians become screen-space hexagons circumscribing the k-sigma
ellipse of their projected covariance.  Each hexagon carries an affine depth
function fitted to the max-response depths along the camera rays through the
ellipse center and the two axis tangent points, so interpolated depth tracks
the max-response plane instead of a constant per splat.  Fragments are
blended far-to-near into a weighted-mean G-buffer and merged over the mesh
layer by opacity.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .camera import CameraModel
from .geometry import GaussianSet, TriangleSet
from .gsmath import ALPHA_MIN

TILE = 16
_HEX_RADIUS = 2.0 / math.sqrt(3.0)  # circumradius of a hexagon tangent to the unit circle
_HEX_ANGLES = np.radians(30.0 + 60.0 * np.arange(6))


@dataclass
class HexagonSplat:
    """One splat: vertices (px), per-vertex depths, and its source Gaussian."""

    vertices: np.ndarray  # (6, 2) CCW
    vertex_depths: np.ndarray  # (6,)
    depth_center: float
    source: int


@dataclass
class HexagonBatch:
    vertices: np.ndarray  # (N, 6, 2)
    depth_affine: np.ndarray  # (N, 3): depth(px, py) = a0 + a1*px + a2*py
    depth_center: np.ndarray  # (N,) depth at the projected mean
    mean2d: np.ndarray  # (N, 2)
    inv_cov2d: np.ndarray  # (N, 3) packed upper triangle of the inverse
    source: np.ndarray  # (N,) Gaussian indices

    def __len__(self):
        return len(self.source)

    def splat(self, i) -> HexagonSplat:
        v = self.vertices[i]
        depths = self.depth_affine[i, 0] + self.depth_affine[i, 1] * v[:, 0] \
            + self.depth_affine[i, 2] * v[:, 1]
        return HexagonSplat(v.copy(), depths, float(self.depth_center[i]),
                            int(self.source[i]))

    def depth_at(self, i, px, py):
        a = self.depth_affine[i]
        return a[0] + a[1] * px + a[2] * py


@dataclass
class GBuffer:
    opacity: np.ndarray  # (H, W)
    position: np.ndarray  # (H, W, 3) weighted-mean world positions
    normal: np.ndarray  # (H, W, 3)
    albedo: np.ndarray  # (H, W, 3)
    roughness: np.ndarray  # (H, W)
    emission: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) linear camera z, +inf where empty
    mesh_weight: np.ndarray  # (H, W) fraction of the pixel owned by meshes

    @property
    def shape(self):
        return self.opacity.shape

    @classmethod
    def empty(cls, height, width):
        return cls(
            opacity=np.zeros((height, width)),
            position=np.zeros((height, width, 3)),
            normal=np.zeros((height, width, 3)),
            albedo=np.zeros((height, width, 3)),
            roughness=np.zeros((height, width)),
            emission=np.zeros((height, width, 3)),
            depth=np.full((height, width), np.inf),
            mesh_weight=np.zeros((height, width)),
        )


def _eig2d_batch(cov):
    """Closed-form eigen pairs for (N, 2, 2) symmetric matrices."""
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    l1, l2 = mid + rad, np.maximum(mid - rad, 1e-12)
    e1 = np.stack([l1 - c, b], axis=1)
    small = np.linalg.norm(e1, axis=1) < 1e-12
    e1[small] = np.where(a[small, None] >= c[small, None], [1.0, 0.0], [0.0, 1.0])
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1)
    return l1, l2, e1, e2


def spawn_hexagons(gaussians: GaussianSet, camera: CameraModel, k_sigma=3.0,
                   min_extent_px=0.3) -> HexagonBatch:
    """Hexagons for in-frustum Gaussians with projected extent above cutoff."""
    n = len(gaussians)
    empty = HexagonBatch(
        np.zeros((0, 6, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2)),
        np.zeros((0, 3)), np.zeros(0, np.int32),
    )
    if n == 0:
        return empty
    cam = camera.world_to_camera(gaussians.center)
    z = cam[:, 2]
    alive = z > camera.near
    if not alive.any():
        return empty
    idx = np.nonzero(alive)[0]
    cam = cam[idx]
    z = z[idx]

    mean2d = np.stack(
        [camera.fx * cam[:, 0] / z + camera.cx,
         camera.fy * cam[:, 1] / z + camera.cy], axis=1
    )
    m = len(idx)
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * cam[:, 0] / (z * z)
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * cam[:, 1] / (z * z)
    w2c = camera.rotation.T
    mw = jac @ w2c[None, :, :]
    cov2d = np.einsum("nij,njk,nlk->nil", mw, gaussians.cov[idx], mw)
    l1, l2, e1, e2 = _eig2d_batch(cov2d)
    l1 = np.maximum(l1, 1e-12)

    extent = k_sigma * np.sqrt(l1)
    keep = extent >= min_extent_px
    if not keep.any():
        return empty
    idx, mean2d, cov2d = idx[keep], mean2d[keep], cov2d[keep]
    l1, l2, e1, e2 = l1[keep], l2[keep], e1[keep], e2[keep]
    m = len(idx)

    r1 = k_sigma * np.sqrt(l1)
    r2 = k_sigma * np.sqrt(l2)
    unit = np.stack([np.cos(_HEX_ANGLES), np.sin(_HEX_ANGLES)], axis=1) * _HEX_RADIUS
    verts = (
        mean2d[:, None, :]
        + unit[None, :, 0:1] * (r1[:, None] * e1)[:, None, :]
        + unit[None, :, 1:2] * (r2[:, None] * e2)[:, None, :]
    )

    # Max-response depths along the rays through the three probe points.
    probes = np.stack([mean2d, mean2d + r1[:, None] * e1, mean2d + r2[:, None] * e2],
                      axis=1)  # (m, 3, 2)
    dirs = camera._dirs_for(probes.reshape(-1, 2) - 0.5)  # undo center offset
    dirs = dirs.reshape(m, 3, 3)
    inv_cov = gaussians.inv_cov[idx]
    delta = gaussians.center[idx] - camera.position
    ad = np.einsum("mij,mpj->mpi", inv_cov, dirs)
    t_star = np.einsum("mi,mpi->mp", np.einsum("mij,mj->mi", inv_cov, delta), dirs)
    t_star = t_star / np.einsum("mpi,mpi->mp", dirs, ad)
    fwd = camera.rotation[:, 2]
    depths = t_star * (dirs @ fwd)
    depths = np.maximum(depths, camera.near)

    dc = depths[:, 0]
    gx = (depths[:, 1] - dc) / np.maximum(r1, 1e-12)
    gy = (depths[:, 2] - dc) / np.maximum(r2, 1e-12)
    a1 = gx * e1[:, 0] + gy * e2[:, 0]
    a2 = gx * e1[:, 1] + gy * e2[:, 1]
    a0 = dc - a1 * mean2d[:, 0] - a2 * mean2d[:, 1]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    det = np.maximum(det, 1e-24)
    inv2d = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )

    return HexagonBatch(
        vertices=verts,
        depth_affine=np.stack([a0, a1, a2], axis=1),
        depth_center=dc,
        mean2d=mean2d,
        inv_cov2d=inv2d,
        source=idx.astype(np.int32),
    )


@njit(cache=True, error_model="numpy", parallel=True)
def _raster_kernel(
    tile_start, tile_items, n_tiles_x, width, height,
    verts, affine, mean2d, inv2d, source,
    g_albedo, g_normal, g_emission, g_roughness, g_opacity,
    mesh_depth, cam_pos, c2w, fx, fy, cx, cy, near,
    out_alpha, out_albedo, out_normal, out_emission, out_rough, out_pos, out_depth,
):
    n_tiles = len(tile_start) - 1
    for tile in prange(n_tiles):
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        for it in range(tile_start[tile], tile_start[tile + 1]):
            h = tile_items[it]
            vx = verts[h]
            bx0 = max(x0, int(math.floor(min(vx[0, 0], vx[1, 0], vx[2, 0], vx[3, 0], vx[4, 0], vx[5, 0]))))
            bx1 = min(x1 - 1, int(math.ceil(max(vx[0, 0], vx[1, 0], vx[2, 0], vx[3, 0], vx[4, 0], vx[5, 0]))))
            by0 = max(y0, int(math.floor(min(vx[0, 1], vx[1, 1], vx[2, 1], vx[3, 1], vx[4, 1], vx[5, 1]))))
            by1 = min(y1 - 1, int(math.ceil(max(vx[0, 1], vx[1, 1], vx[2, 1], vx[3, 1], vx[4, 1], vx[5, 1]))))
            if bx1 < bx0 or by1 < by0:
                continue
            gid = source[h]
            ia = inv2d[h, 0]
            ib = inv2d[h, 1]
            ic = inv2d[h, 2]
            mx = mean2d[h, 0]
            my = mean2d[h, 1]
            for py in range(by0, by1 + 1):
                for px in range(bx0, bx1 + 1):
                    sx = px + 0.5
                    sy = py + 0.5
                    inside = True
                    for e in range(6):
                        e2 = (e + 1) % 6
                        ex = vx[e2, 0] - vx[e, 0]
                        ey = vx[e2, 1] - vx[e, 1]
                        if ex * (sy - vx[e, 1]) - ey * (sx - vx[e, 0]) < 0.0:
                            inside = False
                            break
                    if not inside:
                        continue
                    dx = sx - mx
                    dy = sy - my
                    q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                    resp = g_opacity[gid] * math.exp(-0.5 * q)
                    if resp < ALPHA_MIN:
                        continue
                    zf = affine[h, 0] + affine[h, 1] * sx + affine[h, 2] * sy
                    if zf <= near or zf >= mesh_depth[py, px]:
                        continue
                    # world position of the fragment at interpolated depth
                    xc = (sx - cx) / fx * zf
                    yc = (sy - cy) / fy * zf
                    wx = cam_pos[0] + c2w[0, 0] * xc + c2w[0, 1] * yc + c2w[0, 2] * zf
                    wy = cam_pos[1] + c2w[1, 0] * xc + c2w[1, 1] * yc + c2w[1, 2] * zf
                    wz = cam_pos[2] + c2w[2, 0] * xc + c2w[2, 1] * yc + c2w[2, 2] * zf
                    inv = 1.0 - resp
                    out_alpha[py, px] = resp + inv * out_alpha[py, px]
                    for c in range(3):
                        out_albedo[py, px, c] = resp * g_albedo[gid, c] + inv * out_albedo[py, px, c]
                        out_normal[py, px, c] = resp * g_normal[gid, c] + inv * out_normal[py, px, c]
                        out_emission[py, px, c] = resp * g_emission[gid, c] + inv * out_emission[py, px, c]
                    out_rough[py, px] = resp * g_roughness[gid] + inv * out_rough[py, px]
                    out_pos[py, px, 0] = resp * wx + inv * out_pos[py, px, 0]
                    out_pos[py, px, 1] = resp * wy + inv * out_pos[py, px, 1]
                    out_pos[py, px, 2] = resp * wz + inv * out_pos[py, px, 2]
                    out_depth[py, px] = resp * zf + inv * out_depth[py, px]


def rasterize_gaussians(hexagons: HexagonBatch, mesh_depth, camera: CameraModel,
                        gaussians: GaussianSet) -> GBuffer:
    """Blend hexagon fragments far-to-near into a Gaussian-layer G-buffer.

    Fragments behind the mesh depth are discarded; all attributes share the
    compositing weights, realizing the weighted-mean surface.
    """
    h, w = camera.height, camera.width
    gb = GBuffer.empty(h, w)
    gb.depth.fill(0.0)  # accumulates premultiplied; fixed up below
    n = len(hexagons)
    if n:
        order = np.argsort(-hexagons.depth_center, kind="stable")
        vmin = hexagons.vertices.min(axis=1)
        vmax = hexagons.vertices.max(axis=1)
        ntx = (w + TILE - 1) // TILE
        nty = (h + TILE - 1) // TILE
        tx0 = np.clip(np.floor(vmin[:, 0] / TILE).astype(np.int64), 0, ntx - 1)
        tx1 = np.clip(np.floor(vmax[:, 0] / TILE).astype(np.int64), 0, ntx - 1)
        ty0 = np.clip(np.floor(vmin[:, 1] / TILE).astype(np.int64), 0, nty - 1)
        ty1 = np.clip(np.floor(vmax[:, 1] / TILE).astype(np.int64), 0, nty - 1)
        onscreen = (vmax[:, 0] >= 0) & (vmin[:, 0] < w) & (vmax[:, 1] >= 0) & (vmin[:, 1] < h)

        items = [[] for _ in range(ntx * nty)]
        for j in order:
            if not onscreen[j]:
                continue
            for ty in range(ty0[j], ty1[j] + 1):
                base = ty * ntx
                for tx in range(tx0[j], tx1[j] + 1):
                    items[base + tx].append(j)
        tile_start = np.zeros(ntx * nty + 1, np.int64)
        for t, lst in enumerate(items):
            tile_start[t + 1] = tile_start[t] + len(lst)
        tile_items = np.fromiter(
            (j for lst in items for j in lst), np.int64, count=tile_start[-1]
        )

        _raster_kernel(
            tile_start, tile_items, ntx, w, h,
            hexagons.vertices, hexagons.depth_affine, hexagons.mean2d,
            hexagons.inv_cov2d, hexagons.source,
            gaussians.albedo, gaussians.normal, gaussians.emission,
            gaussians.roughness, gaussians.opacity,
            np.ascontiguousarray(mesh_depth, dtype=np.float64),
            camera.position, camera.rotation,
            camera.fx, camera.fy, camera.cx, camera.cy, camera.near,
            gb.opacity, gb.albedo, gb.normal, gb.emission, gb.roughness,
            gb.position, gb.depth,
        )

    covered = gb.opacity > 0
    alpha = np.where(covered, gb.opacity, 1.0)[..., None]
    gb.albedo /= alpha
    gb.normal /= alpha
    gb.emission /= alpha
    gb.position /= alpha
    gb.roughness /= alpha[..., 0]
    gb.depth = np.where(covered, gb.depth / alpha[..., 0], np.inf)
    norms = np.linalg.norm(gb.normal, axis=-1, keepdims=True)
    ok = norms[..., 0] > 1e-9
    gb.normal = np.where(ok[..., None], gb.normal / np.where(ok[..., None], norms, 1.0), 0.0)
    fix = covered & ~ok
    if fix.any():
        dirs = camera.pixel_rays()
        gb.normal[fix] = -dirs[fix]
    return gb


def _clip_near(v0, v1, v2, near_z, cam):
    """Clip one triangle (world verts) against the camera near plane."""
    verts = [v0, v1, v2]
    zs = [cam.world_to_camera(v[None])[0][2] for v in verts]
    inside = [z > near_z for z in zs]
    if all(inside):
        return [(v0, v1, v2)]
    if not any(inside):
        return []
    poly = []
    for i in range(3):
        j = (i + 1) % 3
        if inside[i]:
            poly.append(verts[i])
        if inside[i] != inside[j]:
            t = (near_z - zs[i]) / (zs[j] - zs[i])
            poly.append(verts[i] + t * (verts[j] - verts[i]))
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


@njit(cache=True, error_model="numpy")
def _mesh_kernel(
    su, sv, sz, world, tri_of, width, height,
    out_depth, out_tri, out_pos,
):
    for t in range(su.shape[0]):
        x0 = max(0, int(math.floor(min(su[t, 0], su[t, 1], su[t, 2]))))
        x1 = min(width - 1, int(math.ceil(max(su[t, 0], su[t, 1], su[t, 2]))))
        y0 = max(0, int(math.floor(min(sv[t, 0], sv[t, 1], sv[t, 2]))))
        y1 = min(height - 1, int(math.ceil(max(sv[t, 0], sv[t, 1], sv[t, 2]))))
        if x1 < x0 or y1 < y0:
            continue
        ax, ay = su[t, 0], sv[t, 0]
        bx, by = su[t, 1], sv[t, 1]
        cx_, cy_ = su[t, 2], sv[t, 2]
        area = (bx - ax) * (cy_ - ay) - (by - ay) * (cx_ - ax)
        if abs(area) < 1e-12:
            continue
        inv_area = 1.0 / area
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                sx = px + 0.5
                sy = py + 0.5
                w0 = ((bx - sx) * (cy_ - sy) - (by - sy) * (cx_ - sx)) * inv_area
                w1 = ((cx_ - sx) * (ay - sy) - (cy_ - sy) * (ax - sx)) * inv_area
                w2 = 1.0 - w0 - w1
                # slightly inclusive so shared-edge seams stay watertight
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                inv_z = w0 / sz[t, 0] + w1 / sz[t, 1] + w2 / sz[t, 2]
                z = 1.0 / inv_z
                if z < out_depth[py, px]:
                    out_depth[py, px] = z
                    out_tri[py, px] = tri_of[t]
                    for c in range(3):
                        out_pos[py, px, c] = z * (
                            w0 * world[t, 0, c] / sz[t, 0]
                            + w1 * world[t, 1, c] / sz[t, 1]
                            + w2 * world[t, 2, c] / sz[t, 2]
                        )


def rasterize_meshes(triangles: TriangleSet, camera: CameraModel):
    """Z-buffered triangle rasterization; returns (mesh GBuffer, depth)."""
    h, w = camera.height, camera.width
    gb = GBuffer.empty(h, w)
    depth = np.full((h, w), np.inf)
    if len(triangles) == 0:
        return gb, depth

    clipped = []
    tri_of = []
    for t in range(len(triangles)):
        for (a, b, c) in _clip_near(triangles.v0[t], triangles.v1[t],
                                    triangles.v2[t], camera.near, camera):
            clipped.append((a, b, c))
            tri_of.append(t)
    if not clipped:
        return gb, depth

    world = np.array(clipped)  # (n, 3 verts, 3)
    tri_of = np.array(tri_of, np.int32)
    flat = world.reshape(-1, 3)
    px, z = camera.project(flat)
    su = px[:, 0].reshape(-1, 3)
    sv = px[:, 1].reshape(-1, 3)
    sz = z.reshape(-1, 3)

    out_tri = np.full((h, w), -1, np.int32)
    _mesh_kernel(su, sv, sz, world, tri_of, w, h, depth, out_tri, gb.position)

    covered = out_tri >= 0
    if covered.any():
        tid = out_tri[covered]
        gb.opacity[covered] = 1.0
        gb.mesh_weight[covered] = 1.0
        gb.albedo[covered] = triangles.albedo[tid]
        gb.roughness[covered] = triangles.roughness[tid]
        gb.emission[covered] = triangles.emission[tid]
        gb.depth[covered] = depth[covered]
        n = triangles.normal[tid]
        to_cam = camera.position[None, :] - gb.position[covered]
        flip = np.sum(n * to_cam, axis=1) < 0
        gb.normal[covered] = np.where(flip[:, None], -n, n)
    return gb, depth


def merge_gbuffers(gaussian_layer: GBuffer, mesh_layer: GBuffer) -> GBuffer:
    """Gaussian layer over mesh layer; mesh counts as opacity 1 where covered."""
    ag = gaussian_layer.opacity
    am = mesh_layer.opacity
    a_out = ag + (1.0 - ag) * am
    w_mesh = (1.0 - ag) * am
    safe = np.where(a_out > 0, a_out, 1.0)

    def mix(a, b, dims3):
        if dims3:
            return (ag[..., None] * a + w_mesh[..., None] * b) / safe[..., None]
        return (ag * a + w_mesh * b) / safe

    out = GBuffer(
        opacity=a_out,
        position=mix(gaussian_layer.position, mesh_layer.position, True),
        normal=mix(gaussian_layer.normal, mesh_layer.normal, True),
        albedo=mix(gaussian_layer.albedo, mesh_layer.albedo, True),
        roughness=mix(gaussian_layer.roughness, mesh_layer.roughness, False),
        emission=mix(gaussian_layer.emission, mesh_layer.emission, True),
        depth=np.where(
            a_out > 0,
            mix(np.where(np.isfinite(gaussian_layer.depth), gaussian_layer.depth, 0.0),
                np.where(np.isfinite(mesh_layer.depth), mesh_layer.depth, 0.0), False),
            np.inf,
        ),
        mesh_weight=np.where(a_out > 0, w_mesh / safe, 0.0),
    )
    norms = np.linalg.norm(out.normal, axis=-1, keepdims=True)
    ok = norms[..., 0] > 1e-9
    out.normal = np.where(ok[..., None], out.normal / np.where(norms > 0, norms, 1.0), out.normal)
    return out


def reconstruct_normals(gbuffer: GBuffer, camera: CameraModel):
    """Screen-space normals from weighted-mean position gradients.

    Uses the one-sided difference with the smaller depth jump on each axis so
    depth discontinuities do not bleed across edges.  Returns (normals, valid).
    """
    pos = gbuffer.position
    depth = gbuffer.depth
    valid = gbuffer.opacity > 0

    def one_sided(axis):
        fwd = np.roll(pos, -1, axis=axis) - pos
        bwd = pos - np.roll(pos, 1, axis=axis)
        with np.errstate(invalid="ignore"):
            dz_f = np.abs(np.roll(depth, -1, axis=axis) - depth)
            dz_b = np.abs(depth - np.roll(depth, 1, axis=axis))
        dz_f = np.nan_to_num(dz_f, nan=np.inf)
        dz_b = np.nan_to_num(dz_b, nan=np.inf)
        ok_f = np.roll(valid, -1, axis=axis) & valid
        ok_b = np.roll(valid, 1, axis=axis) & valid
        dz_f = np.where(ok_f, dz_f, np.inf)
        dz_b = np.where(ok_b, dz_b, np.inf)
        use_f = dz_f <= dz_b
        grad = np.where(use_f[..., None], fwd, bwd)
        ok = ok_f | ok_b
        # Edge rows/cols where roll wrapped around: invalidate.
        if axis == 0:
            ok[0, :] &= False
            ok[-1, :] &= False
        else:
            ok[:, 0] &= False
            ok[:, -1] &= False
        return grad, ok

    gx, okx = one_sided(1)
    gy, oky = one_sided(0)
    n = np.cross(gx, gy)
    lens = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = valid & okx & oky & (lens[..., 0] > 1e-12)
    n = np.where(ok[..., None], n / np.where(lens > 0, lens, 1.0), 0.0)
    to_cam = camera.position[None, None, :] - pos
    flip = np.sum(n * to_cam, axis=-1) < 0
    n = np.where(flip[..., None], -n, n)
    return n, ok


def fallback_normals(gbuffer: GBuffer, camera: CameraModel, max_angle_deg=60.0) -> GBuffer:
    """Replace rasterized normals that disagree with the reconstructed ones.

    A pixel's normal is swapped for the screen-space reconstruction when it
    deviates by more than ``max_angle_deg`` or faces away from the camera.
    """
    recon, ok = reconstruct_normals(gbuffer, camera)
    stored = gbuffer.normal
    to_cam = camera.position[None, None, :] - gbuffer.position
    cos_lim = np.cos(np.radians(max_angle_deg))
    disagree = np.sum(stored * recon, axis=-1) < cos_lim
    backface = np.sum(stored * to_cam, axis=-1) < 0
    replace = ok & (disagree | backface)
    gbuffer.normal = np.where(replace[..., None], recon, stored)
    return gbuffer


def build_hiz(gbuffer: GBuffer):
    """Min-depth pyramid plus per-pixel thickness for screen-space marching.

    Returns (levels, thickness): ``levels[0]`` is the per-pixel depth with
    +inf in empty pixels; each coarser level is a 2x2 min.  Thickness is
    twice the local one-sided depth spacing plus a small depth-relative term.
    """
    base = np.where(gbuffer.opacity > 0, gbuffer.depth, np.inf)
    levels = [np.ascontiguousarray(base)]
    cur = base
    while cur.shape[0] > 1 or cur.shape[1] > 1:
        h, w = cur.shape
        ph, pw = (h + 1) // 2 * 2, (w + 1) // 2 * 2
        padded = np.full((ph, pw), np.inf)
        padded[:h, :w] = cur
        cur = np.minimum.reduce(
            [padded[0::2, 0::2], padded[0::2, 1::2], padded[1::2, 0::2], padded[1::2, 1::2]]
        )
        levels.append(np.ascontiguousarray(cur))

    d = base
    gaps = []
    with np.errstate(invalid="ignore"):
        for axis in (0, 1):
            fwd = np.abs(np.roll(d, -1, axis=axis) - d)
            bwd = np.abs(d - np.roll(d, 1, axis=axis))
            gap = np.minimum(np.where(np.isfinite(fwd), fwd, np.inf),
                             np.where(np.isfinite(bwd), bwd, np.inf))
            gaps.append(np.where(np.isfinite(gap), gap, 0.0))
    spacing = np.maximum(gaps[0], gaps[1])
    finite_d = np.where(np.isfinite(d), d, 0.0)
    thickness = 2.0 * spacing + 1e-4 * (1.0 + finite_d)
    return levels, thickness
