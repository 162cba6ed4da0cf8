"""BVH tracing over Gaussian proxy geometry and mesh triangles.

Three tracers share one acceleration structure:

* ``trace_reference`` enumerates every intersection along a ray in depth
  order with accumulated transparencies — the exhaustive oracle.
* ``trace_shadow_stochastic`` accepts each candidate hit with probability
  equal to its particle response and terminates on the first acceptance,
  so the occlusion bit has expectation ``1 - prod(1 - A_i)``.
* ``trace_shading_stochastic`` does the same but keeps searching for the
  nearest accepted hit; the returned hit follows the transparency-weighted
  selection law, making hit features unbiased estimators of the reference
  blend.

``trace_compound`` fast-forwards rays across the screen via a Hi-Z depth
march before falling back to the stochastic world trace.

Gaussian hits are located at the depth of maximum response along the ray.
Candidates are bounded by stretched icosahedral proxies covering the
1/255-response iso-ellipsoid; ray/proxy traversal therefore yields a
superset of all visible hits.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .geometry import GaussianSet, TriangleSet
from .gsmath import ALPHA_MIN, Ray
from .rng import next_u64, u64_to_unit

# Reference hit lists stop once the accumulated transparency falls below this.
TRANSPARENCY_CUTOFF = 1e-3

MAX_LEAF_PRIMS = 4
_SAH_BINS = 16
_STACK = 128

# ---------------------------------------------------------------------------
# Icosahedral proxy geometry
# ---------------------------------------------------------------------------


def _unit_icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    raw = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            raw.append((0.0, a, b))
            raw.append((a, b, 0.0))
            raw.append((b, 0.0, a))
    v = np.array(raw) / math.sqrt(1.0 + phi * phi)
    d = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)
    edge = d[d > 1e-9].min()
    faces = []
    for i in range(12):
        for j in range(i + 1, 12):
            for k in range(j + 1, 12):
                if (
                    abs(d[i, j] - edge) < 1e-9
                    and abs(d[i, k] - edge) < 1e-9
                    and abs(d[j, k] - edge) < 1e-9
                ):
                    faces.append((i, j, k))
    normals = np.array([(v[i] + v[j] + v[k]) / 3.0 for i, j, k in faces])
    inradius = np.linalg.norm(normals, axis=1)
    return v, normals / inradius[:, None], float(inradius.mean())


ICO_VERTS, ICO_FACE_NORMALS, ICO_INRADIUS = _unit_icosahedron()


def iso_radius(opacity, alpha_min=ALPHA_MIN):
    """Mahalanobis radius where response drops to ``alpha_min``."""
    ratio = np.maximum(np.asarray(opacity, dtype=np.float64) / alpha_min, 1.0)
    return np.sqrt(2.0 * np.log(ratio))


# ---------------------------------------------------------------------------
# Acceleration structure
# ---------------------------------------------------------------------------


@dataclass
class ProxyAccel:
    gaussians: GaussianSet
    triangles: TriangleSet
    node_min: np.ndarray
    node_max: np.ndarray
    node_child0: np.ndarray  # -1 for leaves
    node_child1: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    prim_ids: np.ndarray  # id < G: Gaussian; id >= G: triangle id - G
    proxy_k: np.ndarray = field(repr=False, default=None)  # (G,) iso radii

    @property
    def n_gaussians(self):
        return len(self.gaussians)

    @property
    def n_leaves(self):
        return int(np.sum(self.node_child0 < 0)) if len(self.node_child0) else 0

    def is_empty(self):
        return len(self.prim_ids) == 0

    def proxy_contains(self, gauss_index, points):
        """Whether world points lie inside the stretched icosahedral proxy."""
        g = self.gaussians
        u = (points - g.center[gauss_index]) @ g.rot[gauss_index] / g.scale[gauss_index]
        k = self.proxy_k[gauss_index]
        return np.all(u @ ICO_FACE_NORMALS.T <= k * (1.0 + 1e-9), axis=1)


def build_accel(gaussians, triangles=None) -> ProxyAccel:
    """Build the binned-SAH BVH over Gaussian proxies and triangles."""
    if isinstance(gaussians, (list, tuple)):
        gaussians = GaussianSet.from_primitives(gaussians)
    if gaussians is None:
        gaussians = GaussianSet.empty()
    if triangles is None:
        triangles = TriangleSet.empty()

    n_g, n_t = len(gaussians), len(triangles)
    ks = iso_radius(gaussians.opacity) if n_g else np.zeros(0)

    bmins, bmaxs, ids = [], [], []
    if n_g:
        # World-space icosahedron vertices: center + R diag(scale) (k/rho * V).
        scaled = ICO_VERTS / ICO_INRADIUS  # (12, 3)
        local = scaled[None, :, :] * (ks[:, None, None] * gaussians.scale[:, None, :])
        world = gaussians.center[:, None, :] + np.einsum(
            "gij,gvj->gvi", gaussians.rot, local
        )
        alive = ks > 0.0
        bmins.append(world.min(axis=1)[alive])
        bmaxs.append(world.max(axis=1)[alive])
        ids.append(np.nonzero(alive)[0].astype(np.int32))
    if n_t:
        tv = np.stack([triangles.v0, triangles.v1, triangles.v2], axis=1)
        bmins.append(tv.min(axis=1))
        bmaxs.append(tv.max(axis=1))
        ids.append((np.arange(n_t, dtype=np.int32) + n_g))

    if not ids or sum(len(i) for i in ids) == 0:
        return ProxyAccel(
            gaussians,
            triangles,
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.full(0, -1, np.int32),
            np.full(0, -1, np.int32),
            np.zeros(0, np.int32),
            np.zeros(0, np.int32),
            np.zeros(0, np.int32),
            ks,
        )

    pmin = np.concatenate(bmins)
    pmax = np.concatenate(bmaxs)
    pid = np.concatenate(ids)
    centroid = 0.5 * (pmin + pmax)

    order = np.arange(len(pid))
    nodes = []  # (min, max, child0, child1, start, count)
    out_order = []

    def add_node():
        nodes.append([np.zeros(3), np.zeros(3), -1, -1, 0, 0])
        return len(nodes) - 1

    stack = [(add_node(), order)]
    while stack:
        ni, idxs = stack.pop()
        nmin = pmin[idxs].min(axis=0)
        nmax = pmax[idxs].max(axis=0)
        nodes[ni][0], nodes[ni][1] = nmin, nmax
        if len(idxs) <= MAX_LEAF_PRIMS:
            nodes[ni][4] = len(out_order)
            nodes[ni][5] = len(idxs)
            out_order.extend(idxs.tolist())
            continue
        cen = centroid[idxs]
        ext = cen.max(axis=0) - cen.min(axis=0)
        axis = int(np.argmax(ext))
        if ext[axis] < 1e-12:
            half = len(idxs) // 2  # degenerate spread: median split
            left, right = idxs[:half], idxs[half:]
        else:
            lo = cen[:, axis].min()
            rel = (cen[:, axis] - lo) / ext[axis]
            bins = np.minimum((rel * _SAH_BINS).astype(np.int64), _SAH_BINS - 1)
            best_cost, best_split = np.inf, -1
            counts = np.bincount(bins, minlength=_SAH_BINS)
            for split in range(1, _SAH_BINS):
                mask = bins < split
                nl = counts[:split].sum()
                if nl == 0 or nl == len(idxs):
                    continue
                lmin = pmin[idxs[mask]].min(axis=0)
                lmax = pmax[idxs[mask]].max(axis=0)
                rmin = pmin[idxs[~mask]].min(axis=0)
                rmax = pmax[idxs[~mask]].max(axis=0)
                area_l = _half_area(lmax - lmin)
                area_r = _half_area(rmax - rmin)
                cost = area_l * nl + area_r * (len(idxs) - nl)
                if cost < best_cost:
                    best_cost, best_split = cost, split
            if best_split < 0:
                half = len(idxs) // 2
                srt = idxs[np.argsort(cen[:, axis], kind="stable")]
                left, right = srt[:half], srt[half:]
            else:
                mask = bins < best_split
                left, right = idxs[mask], idxs[~mask]
        c0, c1 = add_node(), add_node()
        nodes[ni][2], nodes[ni][3] = c0, c1
        stack.append((c1, right))
        stack.append((c0, left))

    n = len(nodes)
    return ProxyAccel(
        gaussians,
        triangles,
        np.array([nd[0] for nd in nodes]).reshape(n, 3),
        np.array([nd[1] for nd in nodes]).reshape(n, 3),
        np.array([nd[2] for nd in nodes], np.int32),
        np.array([nd[3] for nd in nodes], np.int32),
        np.array([nd[4] for nd in nodes], np.int32),
        np.array([nd[5] for nd in nodes], np.int32),
        pid[np.array(out_order, dtype=np.int64)].astype(np.int32),
        ks,
    )


def _half_area(ext):
    return ext[0] * ext[1] + ext[1] * ext[2] + ext[2] * ext[0]


# ---------------------------------------------------------------------------
# Hit records
# ---------------------------------------------------------------------------

KIND_MISS = 0
KIND_GAUSSIAN = 1
KIND_TRIANGLE = 2
KIND_SCREEN = 3


@dataclass
class HitRecord:
    t: float
    kind: int  # KIND_GAUSSIAN / KIND_TRIANGLE / KIND_SCREEN
    index: int
    response: float
    position: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    roughness: float
    emission: np.ndarray

    @property
    def is_triangle(self):
        return self.kind == KIND_TRIANGLE


@dataclass
class OrderedHitList:
    """Depth-sorted hits with accumulated transparency prefixes.

    ``prefix[i]`` is the transparency in front of hit ``i``; ``prefix[-1]``
    is the transparency after every listed hit.
    """

    records: list
    prefix: np.ndarray

    def __len__(self):
        return len(self.records)

    def transparency(self):
        return float(self.prefix[-1])


def _make_hit(accel: ProxyAccel, kind, index, t, response, ray_o, ray_d):
    pos = ray_o + t * ray_d
    if kind == KIND_GAUSSIAN:
        g = accel.gaussians
        n = g.normal[index].copy()
        if np.dot(n, ray_d) > 0:
            n = -n
        return HitRecord(float(t), kind, int(index), float(response), pos, n,
                         g.albedo[index].copy(), float(g.roughness[index]),
                         g.emission[index].copy())
    tr = accel.triangles
    n = tr.normal[index].copy()
    if np.dot(n, ray_d) > 0:
        n = -n
    return HitRecord(float(t), kind, int(index), 1.0, pos, n,
                     tr.albedo[index].copy(), float(tr.roughness[index]),
                     tr.emission[index].copy())


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@njit(cache=True, error_model="numpy", inline="always")
def _safe_inv(x):
    if abs(x) < 1e-300:
        return 1e300 if x >= 0 else -1e300
    return 1.0 / x


@njit(cache=True, error_model="numpy", inline="always")
def _aabb_entry(ox, oy, oz, ix, iy, iz, tmin, tmax, bmin, bmax):
    """Entry distance into the box, or inf when missed."""
    t1 = (bmin[0] - ox) * ix
    t2 = (bmax[0] - ox) * ix
    tn = min(t1, t2)
    tf = max(t1, t2)
    t1 = (bmin[1] - oy) * iy
    t2 = (bmax[1] - oy) * iy
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t1 = (bmin[2] - oz) * iz
    t2 = (bmax[2] - oz) * iz
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    if tn <= tf and tf >= tmin and tn <= tmax:
        return max(tn, tmin)
    return np.inf


@njit(cache=True, error_model="numpy", inline="always")
def _gauss_response(inv_cov, center, ox, oy, oz, dx, dy, dz, opacity):
    """(max-response depth, response) of a Gaussian along a ray line."""
    ex = ox - center[0]
    ey = oy - center[1]
    ez = oz - center[2]
    a00 = inv_cov[0, 0]
    a01 = inv_cov[0, 1]
    a02 = inv_cov[0, 2]
    a11 = inv_cov[1, 1]
    a12 = inv_cov[1, 2]
    a22 = inv_cov[2, 2]
    adx = a00 * dx + a01 * dy + a02 * dz
    ady = a01 * dx + a11 * dy + a12 * dz
    adz = a02 * dx + a12 * dy + a22 * dz
    vav = dx * adx + dy * ady + dz * adz
    vad = ex * adx + ey * ady + ez * adz
    dad = (
        ex * (a00 * ex + a01 * ey + a02 * ez)
        + ey * (a01 * ex + a11 * ey + a12 * ez)
        + ez * (a02 * ex + a12 * ey + a22 * ez)
    )
    t_star = -vad / vav
    q = dad - vad * vad / vav
    if q < 0.0:
        q = 0.0
    return t_star, opacity * math.exp(-0.5 * q)


@njit(cache=True, error_model="numpy", inline="always")
def _tri_intersect(v0, v1, v2, ox, oy, oz, dx, dy, dz):
    """Moller-Trumbore, two-sided; returns t or -1."""
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return -1.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@njit(cache=True, error_model="numpy")
def _collect_kernel(
    node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
    g_center, g_invcov, g_opacity, tv0, tv1, tv2,
    ox, oy, oz, dx, dy, dz, tmin, tmax,
    out_id, out_t, out_resp,
):
    """Enumerate every candidate hit in [tmin, tmax]; returns (count, evals).

    count is -1 when the output buffers overflow.
    """
    n = 0
    evals = 0
    if len(child0) == 0:
        return 0, 0
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    stack = np.empty(_STACK, np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        ni = stack[top]
        if np.isinf(
            _aabb_entry(ox, oy, oz, ix, iy, iz, tmin, tmax, node_min[ni], node_max[ni])
        ):
            continue
        c0 = child0[ni]
        if c0 >= 0:
            stack[top] = c0
            top += 1
            stack[top] = child1[ni]
            top += 1
            continue
        for k in range(nstart[ni], nstart[ni] + ncount[ni]):
            pid = prim_ids[k]
            if pid < n_gauss:
                evals += 1
                t, resp = _gauss_response(
                    g_invcov[pid], g_center[pid], ox, oy, oz, dx, dy, dz,
                    g_opacity[pid],
                )
                if resp >= ALPHA_MIN and tmin <= t <= tmax:
                    if n >= len(out_id):
                        return -1, evals
                    out_id[n] = pid
                    out_t[n] = t
                    out_resp[n] = resp
                    n += 1
            else:
                evals += 1
                ti = pid - n_gauss
                t = _tri_intersect(tv0[ti], tv1[ti], tv2[ti], ox, oy, oz, dx, dy, dz)
                if tmin <= t <= tmax:
                    if n >= len(out_id):
                        return -1, evals
                    out_id[n] = pid
                    out_t[n] = t
                    out_resp[n] = 1.0
                    n += 1
    return n, evals


@njit(cache=True, error_model="numpy")
def _shadow_kernel(
    node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
    g_center, g_invcov, g_opacity, tv0, tv1, tv2,
    ox, oy, oz, dx, dy, dz, tmin, tmax, scale, state,
):
    """Stochastic occlusion test; returns (b, evals, state)."""
    evals = 0
    if len(child0) == 0:
        return 0, 0, state
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    stack = np.empty(_STACK, np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        ni = stack[top]
        if np.isinf(
            _aabb_entry(ox, oy, oz, ix, iy, iz, tmin, tmax, node_min[ni], node_max[ni])
        ):
            continue
        c0 = child0[ni]
        if c0 >= 0:
            stack[top] = c0
            top += 1
            stack[top] = child1[ni]
            top += 1
            continue
        for k in range(nstart[ni], nstart[ni] + ncount[ni]):
            pid = prim_ids[k]
            if pid < n_gauss:
                evals += 1
                t, resp = _gauss_response(
                    g_invcov[pid], g_center[pid], ox, oy, oz, dx, dy, dz,
                    g_opacity[pid],
                )
                if resp >= ALPHA_MIN and tmin <= t <= tmax:
                    state = next_u64(state)
                    if resp >= scale * u64_to_unit(state):
                        return 1, evals, state
            else:
                evals += 1
                ti = pid - n_gauss
                t = _tri_intersect(tv0[ti], tv1[ti], tv2[ti], ox, oy, oz, dx, dy, dz)
                if tmin <= t <= tmax:
                    return 1, evals, state
    return 0, evals, state


@njit(cache=True, error_model="numpy")
def _shading_kernel(
    node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
    g_center, g_invcov, g_opacity, tv0, tv1, tv2,
    ox, oy, oz, dx, dy, dz, tmin, tmax, scale, state,
):
    """Nearest accepted hit; returns (kind, index, t, resp, evals, state).

    Accepted hits cull all farther candidates, so traversal visits near
    nodes first and shrinks the active interval as acceptances land.
    """
    evals = 0
    best_kind = KIND_MISS
    best_idx = -1
    best_t = tmax
    best_resp = 0.0
    if len(child0) == 0:
        return best_kind, best_idx, best_t, best_resp, evals, state
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    stack = np.empty(_STACK, np.int32)
    sdist = np.empty(_STACK, np.float64)
    top = 0
    stack[top] = 0
    sdist[top] = 0.0
    top += 1
    while top > 0:
        top -= 1
        ni = stack[top]
        if sdist[top] > best_t:
            continue
        entry = _aabb_entry(
            ox, oy, oz, ix, iy, iz, tmin, best_t, node_min[ni], node_max[ni]
        )
        if np.isinf(entry):
            continue
        c0 = child0[ni]
        if c0 >= 0:
            c1 = child1[ni]
            e0 = _aabb_entry(
                ox, oy, oz, ix, iy, iz, tmin, best_t, node_min[c0], node_max[c0]
            )
            e1 = _aabb_entry(
                ox, oy, oz, ix, iy, iz, tmin, best_t, node_min[c1], node_max[c1]
            )
            # Push the farther child first so the nearer child pops next.
            if e0 <= e1:
                if not np.isinf(e1):
                    stack[top] = c1
                    sdist[top] = e1
                    top += 1
                if not np.isinf(e0):
                    stack[top] = c0
                    sdist[top] = e0
                    top += 1
            else:
                if not np.isinf(e0):
                    stack[top] = c0
                    sdist[top] = e0
                    top += 1
                if not np.isinf(e1):
                    stack[top] = c1
                    sdist[top] = e1
                    top += 1
            continue
        for k in range(nstart[ni], nstart[ni] + ncount[ni]):
            pid = prim_ids[k]
            if pid < n_gauss:
                evals += 1
                t, resp = _gauss_response(
                    g_invcov[pid], g_center[pid], ox, oy, oz, dx, dy, dz,
                    g_opacity[pid],
                )
                if resp >= ALPHA_MIN and tmin <= t < best_t:
                    state = next_u64(state)
                    if resp >= scale * u64_to_unit(state):
                        best_kind = KIND_GAUSSIAN
                        best_idx = pid
                        best_t = t
                        best_resp = resp
            else:
                evals += 1
                ti = pid - n_gauss
                t = _tri_intersect(tv0[ti], tv1[ti], tv2[ti], ox, oy, oz, dx, dy, dz)
                if tmin <= t < best_t:
                    best_kind = KIND_TRIANGLE
                    best_idx = ti
                    best_t = t
                    best_resp = 1.0
    return best_kind, best_idx, best_t, best_resp, evals, state


@njit(cache=True, error_model="numpy", parallel=True)
def _shadow_batch_kernel(
    node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
    g_center, g_invcov, g_opacity, tv0, tv1, tv2,
    origins, dirs, tmins, tmaxs, scale, seeds, out_b, out_evals,
):
    for i in prange(origins.shape[0]):
        b, ev, _ = _shadow_kernel(
            node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
            g_center, g_invcov, g_opacity, tv0, tv1, tv2,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            tmins[i], tmaxs[i], scale, seeds[i],
        )
        out_b[i] = b
        out_evals[i] = ev


@njit(cache=True, error_model="numpy", parallel=True)
def _shading_batch_kernel(
    node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
    g_center, g_invcov, g_opacity, tv0, tv1, tv2,
    origins, dirs, tmins, tmaxs, scale, seeds,
    out_kind, out_idx, out_t, out_resp, out_evals,
):
    for i in prange(origins.shape[0]):
        kind, idx, t, resp, ev, _ = _shading_kernel(
            node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
            g_center, g_invcov, g_opacity, tv0, tv1, tv2,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            tmins[i], tmaxs[i], scale, seeds[i],
        )
        out_kind[i] = kind
        out_idx[i] = idx
        out_t[i] = t
        out_resp[i] = resp
        out_evals[i] = ev


def _accel_args(accel: ProxyAccel):
    g = accel.gaussians
    t = accel.triangles
    return (
        accel.node_min, accel.node_max, accel.node_child0, accel.node_child1,
        accel.node_start, accel.node_count, accel.prim_ids,
        np.int32(accel.n_gaussians),
        g.center, g.inv_cov, g.opacity, t.v0, t.v1, t.v2,
    )


# ---------------------------------------------------------------------------
# Python-level tracer API
# ---------------------------------------------------------------------------


def _resolve_seed(rng):
    if isinstance(rng, np.random.Generator):
        return np.uint64(rng.integers(0, 2**63))
    return np.uint64(rng)


def trace_reference(accel: ProxyAccel, ray: Ray, with_evals=False):
    """All hits in depth order with transparency prefixes (the oracle path).

    The list is truncated once accumulated transparency drops below
    ``TRANSPARENCY_CUTOFF`` or after an opaque triangle hit.
    """
    cap = 256
    while True:
        out_id = np.empty(cap, np.int32)
        out_t = np.empty(cap, np.float64)
        out_resp = np.empty(cap, np.float64)
        n, evals = _collect_kernel(
            *_accel_args(accel),
            ray.origin[0], ray.origin[1], ray.origin[2],
            ray.direction[0], ray.direction[1], ray.direction[2],
            ray.t_min, ray.t_max, out_id, out_t, out_resp,
        )
        if n >= 0:
            break
        cap *= 4

    order = np.lexsort((out_id[:n], out_t[:n]))
    records = []
    prefix = [1.0]
    for j in order:
        pid = int(out_id[j])
        if pid < accel.n_gaussians:
            rec = _make_hit(accel, KIND_GAUSSIAN, pid, out_t[j], out_resp[j],
                            ray.origin, ray.direction)
        else:
            rec = _make_hit(accel, KIND_TRIANGLE, pid - accel.n_gaussians,
                            out_t[j], 1.0, ray.origin, ray.direction)
        records.append(rec)
        prefix.append(prefix[-1] * (1.0 - rec.response))
        if prefix[-1] < TRANSPARENCY_CUTOFF or rec.is_triangle:
            break
    result = OrderedHitList(records, np.array(prefix))
    if with_evals:
        return result, evals
    return result


def trace_shadow_stochastic(accel, ray: Ray, rng, scale=1.0, with_evals=False):
    """Stochastic shadow test: True when the ray is (stochastically) occluded."""
    if not 0.0 < scale <= 1.0:
        raise ValueError("scale must lie in (0, 1]")
    b, evals, _ = _shadow_kernel(
        *_accel_args(accel),
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.t_min, ray.t_max, scale, _resolve_seed(rng),
    )
    if with_evals:
        return bool(b), evals
    return bool(b)


def trace_shading_stochastic(accel, ray: Ray, rng, scale=1.0, with_evals=False):
    """Nearest stochastically accepted hit, or None on miss."""
    if not 0.0 < scale <= 1.0:
        raise ValueError("scale must lie in (0, 1]")
    kind, idx, t, resp, evals, _ = _shading_kernel(
        *_accel_args(accel),
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.t_min, ray.t_max, scale, _resolve_seed(rng),
    )
    rec = None
    if kind != KIND_MISS:
        rec = _make_hit(accel, kind, idx, t, resp, ray.origin, ray.direction)
    if with_evals:
        return rec, evals
    return rec


def trace_shadow_batch(accel, origins, dirs, tmins, tmaxs, seeds, scale=1.0):
    n = len(origins)
    out_b = np.empty(n, np.uint8)
    out_evals = np.empty(n, np.int64)
    _shadow_batch_kernel(
        *_accel_args(accel),
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(tmins, dtype=np.float64),
        np.ascontiguousarray(tmaxs, dtype=np.float64),
        float(scale), np.ascontiguousarray(seeds, dtype=np.uint64),
        out_b, out_evals,
    )
    return out_b, out_evals


def trace_shading_batch(accel, origins, dirs, tmins, tmaxs, seeds, scale=1.0):
    n = len(origins)
    out_kind = np.empty(n, np.int8)
    out_idx = np.empty(n, np.int32)
    out_t = np.empty(n, np.float64)
    out_resp = np.empty(n, np.float64)
    out_evals = np.empty(n, np.int64)
    _shading_batch_kernel(
        *_accel_args(accel),
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(tmins, dtype=np.float64),
        np.ascontiguousarray(tmaxs, dtype=np.float64),
        float(scale), np.ascontiguousarray(seeds, dtype=np.uint64),
        out_kind, out_idx, out_t, out_resp, out_evals,
    )
    return out_kind, out_idx, out_t, out_resp, out_evals


# ---------------------------------------------------------------------------
# Compound tracing: Hi-Z screen march with stochastic world fallback
# ---------------------------------------------------------------------------


def pack_hiz(levels):
    """Flatten a min-depth pyramid into (flat, offsets, widths, heights)."""
    offs = np.zeros(len(levels) + 1, np.int64)
    ws = np.empty(len(levels), np.int64)
    hs = np.empty(len(levels), np.int64)
    for i, lvl in enumerate(levels):
        hs[i], ws[i] = lvl.shape
        offs[i + 1] = offs[i] + lvl.size
    flat = np.concatenate([lvl.ravel() for lvl in levels])
    return flat, offs, ws, hs


@njit(cache=True, error_model="numpy")
def _compound_kernel(
    hiz, lvl_off, lvl_w, lvl_h, depth0, thick,
    cam_pos, w2c, fx, fy, cx, cy, near, width, height,
    node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
    g_center, g_invcov, g_opacity, tv0, tv1, tv2,
    ox, oy, oz, dx, dy, dz, tmin, tmax, scale, state,
):
    """Hi-Z screen march, then a stochastic world trace.

    A certain screen crossing short-circuits the trace with the G-buffer
    pixel's attributes.  When the march leaves the screen or strips an
    uncertain hit, the full segment goes to the world tracer: re-covering
    the marched span costs a little traversal but keeps near-origin
    occluders exact, which matters for rays grazing silhouettes.

    Returns (kind, index, t, resp, px, py, evals, state); kind==KIND_SCREEN
    reports the hit pixel in (px, py).
    """
    n_lvls = len(lvl_w)
    rx = ox - cam_pos[0]
    ry = oy - cam_pos[1]
    rz = oz - cam_pos[2]
    ocx = w2c[0, 0] * rx + w2c[0, 1] * ry + w2c[0, 2] * rz
    ocy = w2c[1, 0] * rx + w2c[1, 1] * ry + w2c[1, 2] * rz
    ocz = w2c[2, 0] * rx + w2c[2, 1] * ry + w2c[2, 2] * rz
    dcx = w2c[0, 0] * dx + w2c[0, 1] * dy + w2c[0, 2] * dz
    dcy = w2c[1, 0] * dx + w2c[1, 1] * dy + w2c[1, 2] * dz
    dcz = w2c[2, 0] * dx + w2c[2, 1] * dy + w2c[2, 2] * dz

    t_world = tmin  # where the world trace will resume
    t0 = tmin
    t1 = tmax if tmax < 1e12 else 1e12
    screen_ok = True
    z0 = ocz + t0 * dcz
    if z0 <= near:
        screen_ok = False
    else:
        if dcz < 0.0:
            t_cross = (near - ocz) / dcz
            if t_cross < t1:
                t1 = t_cross * (1.0 - 1e-9)
        if t1 <= t0:
            screen_ok = False

    if screen_ok:
        z1 = ocz + t1 * dcz
        ax = fx * (ocx + t0 * dcx) / z0 + cx
        ay = fy * (ocy + t0 * dcy) / z0 + cy
        bx = fx * (ocx + t1 * dcx) / z1 + cx
        by = fy * (ocy + t1 * dcy) / z1 + cy
        qa = 1.0 / z0
        qb = 1.0 / z1
        ra = t0 / z0
        rb = t1 / z1

        # Liang-Barsky clip of the screen segment to the viewport.
        s_lo = 0.0
        s_hi = 1.0
        ex = bx - ax
        ey = by - ay
        for axis in range(4):
            if axis == 0:
                p, q = -ex, ax - 0.0
            elif axis == 1:
                p, q = ex, width - ax
            elif axis == 2:
                p, q = -ey, ay - 0.0
            else:
                p, q = ey, height - ay
            if abs(p) < 1e-30:
                if q < 0.0:
                    screen_ok = False
                    break
            else:
                r = q / p
                if p < 0.0:
                    if r > s_hi:
                        screen_ok = False
                        break
                    if r > s_lo:
                        s_lo = r
                else:
                    if r < s_lo:
                        screen_ok = False
                        break
                    if r < s_hi:
                        s_hi = r
        if screen_ok and s_hi <= s_lo:
            screen_ok = False

        if screen_ok:
            seg = math.sqrt(ex * ex + ey * ey)
            opx = int(math.floor(ax + ex * s_lo))
            opy = int(math.floor(ay + ey * s_lo))
            s = s_lo
            mip = 0
            max_iter = 8 * (width + height) + 64
            tiny = 1e-7
            it = 0
            while it < max_iter and s < s_hi:
                it += 1
                x = ax + ex * s
                y = ay + ey * s
                cell = 1 << mip
                txl = int(math.floor(x / cell))
                tyl = int(math.floor(y / cell))
                if txl < 0 or tyl < 0 or txl >= lvl_w[mip] or tyl >= lvl_h[mip]:
                    break
                # parameter where the segment leaves this texel
                s_exit = s_hi
                if ex > 1e-30:
                    cand = ((txl + 1) * cell - ax) / ex
                    if cand < s_exit:
                        s_exit = cand
                elif ex < -1e-30:
                    cand = (txl * cell - ax) / ex
                    if cand < s_exit:
                        s_exit = cand
                if ey > 1e-30:
                    cand = ((tyl + 1) * cell - ay) / ey
                    if cand < s_exit:
                        s_exit = cand
                elif ey < -1e-30:
                    cand = (tyl * cell - ay) / ey
                    if cand < s_exit:
                        s_exit = cand
                if s_exit <= s:
                    s_exit = s + tiny
                s_eval = min(s_exit, s_hi)

                z_in = 1.0 / (qa + (qb - qa) * s)
                z_out = 1.0 / (qa + (qb - qa) * s_eval)
                z_seg_max = max(z_in, z_out)
                hz = hiz[lvl_off[mip] + tyl * lvl_w[mip] + txl]
                if z_seg_max < hz:
                    s = s_exit + tiny * seg / max(seg, 1.0)
                    if mip + 1 < n_lvls:
                        mip += 1
                    continue
                if mip > 0:
                    mip -= 1
                    continue

                zbuf = depth0[tyl, txl]
                if np.isfinite(zbuf) and not (txl == opx and tyl == opy):
                    eps = thick[tyl, txl]
                    s_mid = 0.5 * (s + s_eval)
                    z_mid = 1.0 / (qa + (qb - qa) * s_mid)
                    if z_in > zbuf + eps:
                        # entered already far behind a silhouette: uncertain
                        # hit is stripped, the remainder goes to world tracing
                        break
                    if z_mid >= zbuf:
                        if z_mid > zbuf + eps or eps > 0.05 * zbuf:
                            # crossed more than a thickness in one texel, or
                            # the pixel sits on a depth discontinuity whose
                            # blended attributes are unreliable: uncertain,
                            # resume in world space
                            break
                        # certain crossing inside this pixel
                        s_cross = s_mid
                        denom = qb - qa
                        if abs(denom) > 1e-30:
                            s_cross = (1.0 / zbuf - qa) / denom
                        if s_cross < s:
                            s_cross = s
                        elif s_cross > s_eval:
                            s_cross = s_eval
                        t_hit = (ra + (rb - ra) * s_cross) / (qa + (qb - qa) * s_cross)
                        if t_hit > tmin:
                            return KIND_SCREEN, 0, t_hit, 1.0, txl, tyl, 0, state
                s = s_exit + tiny
                if mip + 1 < n_lvls:
                    mip += 1

    kind, idx, t, resp, evals, state = _shading_kernel(
        node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
        g_center, g_invcov, g_opacity, tv0, tv1, tv2,
        ox, oy, oz, dx, dy, dz, t_world, tmax, scale, state,
    )
    return kind, idx, t, resp, -1, -1, evals, state


@njit(cache=True, error_model="numpy", parallel=True)
def _compound_batch_kernel(
    hiz, lvl_off, lvl_w, lvl_h, depth0, thick,
    cam_pos, w2c, fx, fy, cx, cy, near, width, height,
    node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
    g_center, g_invcov, g_opacity, tv0, tv1, tv2,
    origins, dirs, tmins, tmaxs, scale, seeds,
    out_kind, out_idx, out_t, out_resp, out_px, out_py,
):
    for i in prange(origins.shape[0]):
        kind, idx, t, resp, px, py, _, _ = _compound_kernel(
            hiz, lvl_off, lvl_w, lvl_h, depth0, thick,
            cam_pos, w2c, fx, fy, cx, cy, near, width, height,
            node_min, node_max, child0, child1, nstart, ncount, prim_ids, n_gauss,
            g_center, g_invcov, g_opacity, tv0, tv1, tv2,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            tmins[i], tmaxs[i], scale, seeds[i],
        )
        out_kind[i] = kind
        out_idx[i] = idx
        out_t[i] = t
        out_resp[i] = resp
        out_px[i] = px
        out_py[i] = py


class ScreenTraceContext:
    """Frozen per-frame screen structures consumed by compound tracing."""

    def __init__(self, gbuffer, hiz_levels, thickness, camera):
        self.gbuffer = gbuffer
        self.camera = camera
        self.thickness = np.ascontiguousarray(thickness)
        flat, offs, ws, hs = pack_hiz(hiz_levels)
        self.hiz_flat = flat
        self.lvl_off = offs
        self.lvl_w = ws
        self.lvl_h = hs
        self.depth0 = np.ascontiguousarray(hiz_levels[0])
        self.w2c = np.ascontiguousarray(camera.rotation.T)

    def args(self):
        c = self.camera
        return (
            self.hiz_flat, self.lvl_off, self.lvl_w, self.lvl_h,
            self.depth0, self.thickness,
            c.position, self.w2c, c.fx, c.fy, c.cx, c.cy, c.near,
            np.int64(c.width), np.int64(c.height),
        )


def trace_compound(ctx: ScreenTraceContext, accel, ray: Ray, rng, scale=1.0):
    """Screen march then stochastic world trace; None on miss.

    Screen hits carry the G-buffer attributes of the hit pixel.
    """
    kind, idx, t, resp, px, py, _, _ = _compound_kernel(
        *ctx.args(), *_accel_args(accel),
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.t_min, ray.t_max, scale, _resolve_seed(rng),
    )
    if kind == KIND_MISS:
        return None
    if kind == KIND_SCREEN:
        return screen_hit_record(ctx, px, py, t)
    return _make_hit(accel, kind, idx, t, resp, ray.origin, ray.direction)


def screen_hit_record(ctx: ScreenTraceContext, px, py, t):
    gb = ctx.gbuffer
    return HitRecord(
        float(t), KIND_SCREEN, int(py) * ctx.camera.width + int(px), 1.0,
        gb.position[py, px].copy(), gb.normal[py, px].copy(),
        gb.albedo[py, px].copy(), float(gb.roughness[py, px]),
        gb.emission[py, px].copy(),
    )


def trace_compound_batch(ctx, accel, origins, dirs, tmins, tmaxs, seeds, scale=1.0):
    n = len(origins)
    out_kind = np.empty(n, np.int8)
    out_idx = np.empty(n, np.int32)
    out_t = np.empty(n, np.float64)
    out_resp = np.empty(n, np.float64)
    out_px = np.empty(n, np.int32)
    out_py = np.empty(n, np.int32)
    _compound_batch_kernel(
        *ctx.args(), *_accel_args(accel),
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(tmins, dtype=np.float64),
        np.ascontiguousarray(tmaxs, dtype=np.float64),
        float(scale), np.ascontiguousarray(seeds, dtype=np.uint64),
        out_kind, out_idx, out_t, out_resp, out_px, out_py,
    )
    return out_kind, out_idx, out_t, out_resp, out_px, out_py


def estimate_incoming_radiance(accel, ray: Ray, shade, env, rng, n_samples,
                               scale=1.0, deterministic_shade=False):
    """Average shading over stochastic shading-ray hits of one ray.

    The acceptance probability of a hit equals its transparency-weighted
    contribution, so averaging ``shade(hit)`` (and the environment on
    misses) is unbiased for the enumerated-intersection blend.

    With ``deterministic_shade=True`` each distinct hit is shaded once and
    weighted by its empirical frequency, which is identical in value for
    deterministic shade functions.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    seeds = gen.integers(0, 2**63, size=n_samples).astype(np.uint64)
    origins = np.tile(ray.origin, (n_samples, 1))
    dirs = np.tile(ray.direction, (n_samples, 1))
    tmins = np.full(n_samples, ray.t_min)
    tmaxs = np.full(n_samples, ray.t_max)
    kind, idx, t, resp, _ = trace_shading_batch(
        accel, origins, dirs, tmins, tmaxs, seeds, scale
    )

    total = np.zeros(3)
    miss = kind == KIND_MISS
    n_miss = int(miss.sum())
    if n_miss:
        total += n_miss * np.asarray(env(ray.direction), dtype=np.float64)
    hit_idx = np.nonzero(~miss)[0]
    if deterministic_shade:
        key = kind.astype(np.int64) * (accel.n_gaussians + len(accel.triangles) + 1)
        key = key + idx
        uniq, counts = np.unique(key[hit_idx], return_counts=True)
        for u, c in zip(uniq, counts):
            j = hit_idx[np.nonzero(key[hit_idx] == u)[0][0]]
            rec = _make_hit(accel, int(kind[j]), int(idx[j]), t[j], resp[j],
                            ray.origin, ray.direction)
            total += c * np.asarray(shade(rec), dtype=np.float64)
    else:
        for j in hit_idx:
            rec = _make_hit(accel, int(kind[j]), int(idx[j]), t[j], resp[j],
                            ray.origin, ray.direction)
            total += np.asarray(shade(rec), dtype=np.float64)
    return total / n_samples
