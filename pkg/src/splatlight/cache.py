"""Two-level radiance cache for indirect diffuse lighting.

Screen probes anchored on G-buffer surfaces store hemispherical incident
radiance in 8x8 hemi-octahedral tiles, updated by importance-sampled compound
rays and compressed to order-1 spherical harmonics for per-pixel irradiance.
Radiance at ray hits resolves from the previous frame's film when the hit
reprojects there (which is what lets light paths keep accumulating bounce
after bounce), falling back to a world-space hash grid keyed by quantized
position and view direction, and finally to a fresh one-sample direct-light
estimate that seeds the grid.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .lights import orthonormal_basis

TILE_RES = 8
SH_COUNT = 4
_Y00 = 0.28209479177387814  # 1 / (2 sqrt(pi))
_Y1 = 0.4886025119029199  # sqrt(3 / (4 pi))
_A0 = math.pi  # cosine-lobe convolution, band 0
_A1 = 2.0 * math.pi / 3.0  # band 1

RUNNING_MEAN_CAP = 64


def hemi_oct_decode(u, v):
    """[0,1]^2 -> unit vectors on the local upper hemisphere (z >= 0)."""
    e = 2.0 * np.asarray(u) - 1.0
    f = 2.0 * np.asarray(v) - 1.0
    x = 0.5 * (e + f)
    y = 0.5 * (f - e)
    z = 1.0 - np.abs(x) - np.abs(y)
    d = np.stack([x, y, np.maximum(z, 0.0)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def hemi_oct_encode(dirs):
    """Unit hemisphere vectors -> [0,1]^2 (inverse of the decode map)."""
    d = np.asarray(dirs, dtype=np.float64)
    s = np.abs(d[..., 0]) + np.abs(d[..., 1]) + np.maximum(d[..., 2], 0.0)
    x = d[..., 0] / s
    y = d[..., 1] / s
    e = x - y
    f = x + y
    return np.stack([(e + 1.0) / 2.0, (f + 1.0) / 2.0], axis=-1)


def _texel_grid():
    i = (np.arange(TILE_RES) + 0.5) / TILE_RES
    u, v = np.meshgrid(i, i, indexing="xy")
    return u.ravel(), v.ravel()


def _texel_measures(n=1 << 19):
    """Per-texel solid angle and mean cosine of the hemi-oct map.

    Deterministic Fibonacci supersampling of the hemisphere, binned through
    the encode map; the oct projection does not preserve area, so these
    weights matter for accurate irradiance.
    """
    i = np.arange(n)
    z = (i + 0.5) / n
    phi = i * 2.3999632297286533  # golden angle
    r = np.sqrt(1.0 - z * z)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    uv = hemi_oct_encode(d)
    ti = np.clip((uv[:, 0] * TILE_RES).astype(np.int64), 0, TILE_RES - 1)
    tj = np.clip((uv[:, 1] * TILE_RES).astype(np.int64), 0, TILE_RES - 1)
    bins = tj * TILE_RES + ti
    counts = np.bincount(bins, minlength=TILE_RES * TILE_RES)
    zsum = np.bincount(bins, weights=z, minlength=TILE_RES * TILE_RES)
    omega = 2.0 * np.pi * counts / n
    mean_z = np.where(counts > 0, zsum / np.maximum(counts, 1), 0.0)
    return omega, mean_z


def _projection_matrix():
    """Weighted least-squares solve matrix from tile texels to L1 SH.

    Weights are texel solid angle times mean cosine: the weighted residual is
    then orthogonal to constants, which pins the cosine-convolved irradiance
    of the fit to the tile's own quadrature.
    """
    u, v = _texel_grid()
    d = hemi_oct_decode(u, v)
    basis = np.stack([
        np.full(len(d), _Y00), _Y1 * d[:, 1], _Y1 * d[:, 2], _Y1 * d[:, 0],
    ], axis=1)  # columns: Y00, Y1y, Y1z, Y1x (local frame)
    omega, mean_z = _texel_measures()
    w = np.maximum(omega * np.maximum(mean_z, 1e-4), 1e-9)
    g = basis.T @ (basis * w[:, None])
    return np.linalg.solve(g, (basis * w[:, None]).T), d


_SOLVE, TEXEL_DIRS = _projection_matrix()  # (4, 64), (64, 3) local dirs


def project_tile_sh(tile):
    """L1 SH coefficients (local frame) of one 8x8x3 radiance tile."""
    flat = np.asarray(tile, dtype=np.float64).reshape(TILE_RES * TILE_RES, 3)
    return _SOLVE @ flat  # (4, 3): rows Y00, Y1y, Y1z, Y1x


def reconstruct_tile_sh(coeffs):
    """Evaluate L1 SH at every tile texel direction (local frame)."""
    d = TEXEL_DIRS
    basis = np.stack([
        np.full(len(d), _Y00), _Y1 * d[:, 1], _Y1 * d[:, 2], _Y1 * d[:, 0],
    ], axis=1)
    return (basis @ coeffs).reshape(TILE_RES, TILE_RES, 3)


def sh_irradiance(coeffs_world, normal):
    """Cosine-convolved irradiance from world-frame L1 coefficients.

    ``coeffs_world`` rows are (L00, Lx, Ly, Lz) per channel.
    """
    n = np.asarray(normal, dtype=np.float64)
    e = _A0 * _Y00 * coeffs_world[0]
    e = e + _A1 * _Y1 * (
        n[..., 0, None] * coeffs_world[1]
        + n[..., 1, None] * coeffs_world[2]
        + n[..., 2, None] * coeffs_world[3]
    )
    return np.maximum(e, 0.0)


def numeric_irradiance(tile, normal_local, samples=200_000, seed=0):
    """Quadrature oracle: integrate the piecewise-constant tile directly."""
    gen = np.random.default_rng(seed)
    d = gen.normal(size=(samples, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d[:, 2] = np.abs(d[:, 2])
    uv = hemi_oct_encode(d)
    ti = np.clip((uv[:, 0] * TILE_RES).astype(np.int64), 0, TILE_RES - 1)
    tj = np.clip((uv[:, 1] * TILE_RES).astype(np.int64), 0, TILE_RES - 1)
    tile = np.asarray(tile)
    lum = tile[tj, ti]
    cos = np.maximum(d @ np.asarray(normal_local, dtype=np.float64), 0.0)
    return 2.0 * np.pi * (lum * cos[:, None]).mean(axis=0)


# ---------------------------------------------------------------------------
# Screen probes
# ---------------------------------------------------------------------------


@dataclass
class ScreenProbeSet:
    spacing: int
    grid_h: int
    grid_w: int
    anchor: np.ndarray  # (P, 2) pixel (x, y)
    position: np.ndarray  # (P, 3)
    normal: np.ndarray  # (P, 3)
    tangent: np.ndarray
    bitangent: np.ndarray
    valid: np.ndarray  # (P,)
    tile: np.ndarray  # (P, 8, 8, 3) incident radiance, running mean
    count: np.ndarray  # (P, 8, 8)
    sh_world: np.ndarray  # (P, 4, 3): rows (L00, Lx, Ly, Lz)
    max_radiance: np.ndarray  # (P, 3) per-channel peak of the tile

    def __len__(self):
        return len(self.valid)

    def probe_index(self, by, bx):
        return by * self.grid_w + bx


def place_probes(gbuffer, spacing=16, previous: ScreenProbeSet | None = None,
                 min_opacity=0.05, depth_tol=0.05, normal_tol=0.9):
    """One probe per spacing x spacing block, anchored at the block's
    highest-opacity surface pixel; previous probe state is carried over when
    the new anchor still agrees with it (disocclusion rules)."""
    h, w = gbuffer.shape
    gh = (h + spacing - 1) // spacing
    gw = (w + spacing - 1) // spacing
    p = gh * gw
    probes = ScreenProbeSet(
        spacing=spacing, grid_h=gh, grid_w=gw,
        anchor=np.zeros((p, 2), np.int64),
        position=np.zeros((p, 3)),
        normal=np.tile([0.0, 0.0, 1.0], (p, 1)),
        tangent=np.zeros((p, 3)),
        bitangent=np.zeros((p, 3)),
        valid=np.zeros(p, bool),
        tile=np.zeros((p, TILE_RES, TILE_RES, 3)),
        count=np.zeros((p, TILE_RES, TILE_RES)),
        sh_world=np.zeros((p, SH_COUNT, 3)),
        max_radiance=np.zeros((p, 3)),
    )
    for by in range(gh):
        for bx in range(gw):
            i = probes.probe_index(by, bx)
            ys = slice(by * spacing, min((by + 1) * spacing, h))
            xs = slice(bx * spacing, min((bx + 1) * spacing, w))
            block = gbuffer.opacity[ys, xs]
            flat = int(np.argmax(block))
            py = ys.start + flat // block.shape[1]
            px = xs.start + flat % block.shape[1]
            if gbuffer.opacity[py, px] <= min_opacity:
                continue
            probes.anchor[i] = (px, py)
            probes.position[i] = gbuffer.position[py, px]
            probes.normal[i] = gbuffer.normal[py, px]
            t, b = orthonormal_basis(probes.normal[i])
            probes.tangent[i] = t
            probes.bitangent[i] = b
            probes.valid[i] = True
            if previous is not None and previous.spacing == spacing \
                    and previous.grid_h == gh and previous.grid_w == gw \
                    and previous.valid[i]:
                z_new = gbuffer.depth[py, px]
                z_old = np.nan_to_num(
                    np.linalg.norm(previous.position[i] - probes.position[i]),
                    nan=np.inf,
                )
                same_surface = (
                    z_old <= depth_tol * max(z_new, 1e-6)
                    and float(previous.normal[i] @ probes.normal[i]) >= normal_tol
                )
                if same_surface:
                    probes.tile[i] = previous.tile[i]
                    probes.count[i] = previous.count[i]
                    probes.sh_world[i] = previous.sh_world[i]
                    probes.max_radiance[i] = previous.max_radiance[i]
    return probes


def _local_to_world(probes, i, local_dirs):
    return (
        local_dirs[:, 0:1] * probes.tangent[i]
        + local_dirs[:, 1:2] * probes.bitangent[i]
        + local_dirs[:, 2:3] * probes.normal[i]
    )


def probe_ray_plan(probes, master_seed, frame, rays_per_probe):
    """Deterministic ray batch for this frame's probe update.

    Texels are chosen proportionally to their last-frame luminance (uniform
    when the tile is empty), jittered within the texel.  Returns
    (probe_idx, texel_j, texel_i, origins, dirs) for all valid probes.
    """
    valid_ids = np.nonzero(probes.valid)[0]
    n = len(valid_ids) * rays_per_probe
    probe_idx = np.repeat(valid_ids, rays_per_probe)
    texel_i = np.zeros(n, np.int64)
    texel_j = np.zeros(n, np.int64)
    dirs = np.zeros((n, 3))
    lum = probes.tile @ np.array([0.2126, 0.7152, 0.0722])
    for k, i in enumerate(valid_ids):
        seeds = rngmod.stream_seed(master_seed, frame, int(i), rngmod.STREAM_PROBE)
        u = rngmod.uniforms(seeds, 3 * rays_per_probe).reshape(rays_per_probe, 3)
        pmf = lum[i].ravel() + 1e-6
        cdf = np.cumsum(pmf / pmf.sum())
        texels = np.searchsorted(cdf, u[:, 0], side="right")
        texels = np.minimum(texels, TILE_RES * TILE_RES - 1)
        tj, ti = np.divmod(texels, TILE_RES)
        uu = (ti + u[:, 1]) / TILE_RES
        vv = (tj + u[:, 2]) / TILE_RES
        local = hemi_oct_decode(uu, vv)
        sl = slice(k * rays_per_probe, (k + 1) * rays_per_probe)
        texel_i[sl] = ti
        texel_j[sl] = tj
        dirs[sl] = _local_to_world(probes, i, local)
    origins = probes.position[probe_idx] + probes.normal[probe_idx] * 1e-3
    return probe_idx, texel_j, texel_i, origins, dirs


def update_probes(probes, trace_fn, resolve_fn, env_fn, master_seed, frame,
                  rays_per_probe=16):
    """Trace importance-sampled rays per probe and fold results into tiles.

    ``trace_fn(origin, direction, seed)`` returns a hit record or None;
    ``resolve_fn(hit, direction, seed)`` returns its incident radiance
    (excluding the hit's own emission); misses read the environment.
    """
    probe_idx, tj, ti, origins, dirs = probe_ray_plan(
        probes, master_seed, frame, rays_per_probe
    )
    for r in range(len(probe_idx)):
        i = int(probe_idx[r])
        seed = rngmod.stream_seed(master_seed, frame,
                                  (int(i) << 8) | (r % rays_per_probe),
                                  rngmod.STREAM_CACHE)
        hit = trace_fn(origins[r], dirs[r], seed)
        if hit is None:
            radiance = np.asarray(env_fn(dirs[r]), dtype=np.float64)
        else:
            radiance = np.asarray(resolve_fn(hit, dirs[r], seed), dtype=np.float64)
        c = probes.count[i, tj[r], ti[r]]
        c = min(c + 1.0, RUNNING_MEAN_CAP)
        probes.count[i, tj[r], ti[r]] = c
        probes.tile[i, tj[r], ti[r]] += (radiance - probes.tile[i, tj[r], ti[r]]) / c
    refresh_probe_sh(probes)
    return probes


def filtered_tile(tile):
    """3x3 edge-clamped box blur on one tile (the pre-projection filter)."""
    padded = np.pad(tile, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(tile)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + TILE_RES, dx:dx + TILE_RES]
    return out / 9.0


def refresh_probe_sh(probes):
    for i in np.nonzero(probes.valid)[0]:
        tile = filtered_tile(probes.tile[i])
        local = project_tile_sh(tile)  # rows Y00, Y1y, Y1z, Y1x
        vec_local = np.stack([local[3], local[1], local[2]])  # (x, y, z) rows
        frame_m = np.stack(
            [probes.tangent[i], probes.bitangent[i], probes.normal[i]], axis=1
        )
        vec_world = frame_m @ vec_local
        probes.sh_world[i, 0] = local[0]
        probes.sh_world[i, 1] = vec_world[0]
        probes.sh_world[i, 2] = vec_world[1]
        probes.sh_world[i, 3] = vec_world[2]
        probes.max_radiance[i] = tile.reshape(-1, 3).max(axis=0)
    return probes


def probe_texel_lookup(probes, i, world_dir):
    """Filtered tile radiance toward a world direction (coarse reflections)."""
    local = np.array([
        float(world_dir @ probes.tangent[i]),
        float(world_dir @ probes.bitangent[i]),
        float(world_dir @ probes.normal[i]),
    ])
    if local[2] < 0:
        local[2] = 0.0
        n = np.linalg.norm(local)
        if n < 1e-9:
            return probes.tile[i].reshape(-1, 3).mean(axis=0)
        local /= n
    uv = hemi_oct_encode(local[None])[0]
    ti = int(np.clip(uv[0] * TILE_RES, 0, TILE_RES - 1))
    tj = int(np.clip(uv[1] * TILE_RES, 0, TILE_RES - 1))
    return filtered_tile(probes.tile[i])[tj, ti]


# ---------------------------------------------------------------------------
# World-space hash grid cache
# ---------------------------------------------------------------------------

PROBE_CHAIN = 16
STALE_FRAMES = 60


@dataclass
class HashGridCache:
    capacity: int = 1 << 20
    base_voxel: float = 0.25
    band_distance: float = 4.0  # first distance band; voxels double per band
    face_cells: int = 4

    key: np.ndarray = field(init=False)
    occupied: np.ndarray = field(init=False)
    rgb_sum: np.ndarray = field(init=False)
    count: np.ndarray = field(init=False)
    last_frame: np.ndarray = field(init=False)

    def __post_init__(self):
        self.key = np.zeros(self.capacity, np.uint64)
        self.occupied = np.zeros(self.capacity, bool)
        self.rgb_sum = np.zeros((self.capacity, 3))
        self.count = np.zeros(self.capacity)
        self.last_frame = np.zeros(self.capacity, np.int64)

    # -- keying ------------------------------------------------------------

    def key_vector(self, position, direction, camera):
        """Quantized (voxel, band, face, cell) tuple for a query."""
        p = np.asarray(position, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        dist = float(np.linalg.norm(p - camera.position))
        band = max(0, int(math.floor(math.log2(max(dist / self.band_distance, 1.0)))))
        voxel = self.base_voxel * (2.0**band)
        q = np.floor(p / voxel).astype(np.int64)
        major = int(np.argmax(np.abs(d)))
        face = major * 2 + (1 if d[major] < 0 else 0)
        minors = [ax for ax in (0, 1, 2) if ax != major]
        denom = max(abs(d[major]), 1e-12)
        fu = int(np.clip((d[minors[0]] / denom + 1.0) / 2.0 * self.face_cells,
                         0, self.face_cells - 1))
        fv = int(np.clip((d[minors[1]] / denom + 1.0) / 2.0 * self.face_cells,
                         0, self.face_cells - 1))
        return (int(q[0]), int(q[1]), int(q[2]), band, face, fu, fv)

    def _mix_key(self, kv):
        h = np.uint64(0x9E3779B97F4A7C15)
        for part in kv:
            h = rngmod.mix64_py(h, part)
        return h if h != 0 else np.uint64(1)

    def hash_key(self, position, direction, camera):
        """Slot index for a query; allocates nothing (lookup semantics)."""
        kv = self.key_vector(position, direction, camera)
        return self._probe_slot(self._mix_key(kv), allocate=False)[0]

    def _probe_slot(self, k, allocate, frame=0):
        home = int(k % np.uint64(self.capacity))
        stalest = -1
        stale_frame = None
        for step in range(PROBE_CHAIN):
            slot = (home + step) % self.capacity
            if not self.occupied[slot]:
                if allocate:
                    self.key[slot] = k
                    self.occupied[slot] = True
                    self.rgb_sum[slot] = 0.0
                    self.count[slot] = 0.0
                    self.last_frame[slot] = frame
                    return slot, True
                return -1, False
            if self.key[slot] == k:
                return slot, True
            if stale_frame is None or self.last_frame[slot] < stale_frame:
                stale_frame = self.last_frame[slot]
                stalest = slot
        if allocate:
            # chain exhausted: replace the stalest entry
            slot = stalest
            self.key[slot] = k
            self.occupied[slot] = True
            self.rgb_sum[slot] = 0.0
            self.count[slot] = 0.0
            self.last_frame[slot] = frame
            return slot, True
        return -1, False

    # -- operations ----------------------------------------------------------

    def lookup(self, position, direction, camera):
        slot, ok = self._probe_slot(
            self._mix_key(self.key_vector(position, direction, camera)),
            allocate=False,
        )
        if not ok or slot < 0 or self.count[slot] <= 0:
            return None
        return self.rgb_sum[slot] / self.count[slot]

    def accumulate(self, position, direction, camera, rgb, frame):
        slot, _ = self._probe_slot(
            self._mix_key(self.key_vector(position, direction, camera)),
            allocate=True, frame=frame,
        )
        self.rgb_sum[slot] += np.asarray(rgb, dtype=np.float64)
        self.count[slot] += 1.0
        self.last_frame[slot] = frame
        return slot

    def live_cells(self):
        return int(np.count_nonzero(self.occupied & (self.count > 0)))


def cache_maintain(cache: HashGridCache, frame):
    """Clear cells idle for STALE_FRAMES frames and re-pack probe chains."""
    live = cache.occupied & (frame - cache.last_frame <= STALE_FRAMES)
    evicted = int(np.count_nonzero(cache.occupied & ~live))
    if evicted == 0:
        return 0
    keys = cache.key[live]
    sums = cache.rgb_sum[live].copy()
    counts = cache.count[live].copy()
    frames = cache.last_frame[live].copy()
    cache.occupied[:] = False
    cache.count[:] = 0.0
    for k, s, c, f in zip(keys, sums, counts, frames):
        slot, _ = cache._probe_slot(k, allocate=True, frame=int(f))
        cache.rgb_sum[slot] = s
        cache.count[slot] = c
        cache.last_frame[slot] = int(f)
    return evicted


# ---------------------------------------------------------------------------
# Radiance resolution and indirect interpolation
# ---------------------------------------------------------------------------


def resolve_radiance(hit, ray_dir, prev_film, prev_camera, prev_depth, cache,
                     direct_fn, camera, seed, frame=0, depth_tol=0.05):
    """Outgoing radiance estimate for a shading-ray hit.

    Previous-film reprojection comes first (realizing multi-bounce film
    accumulation); then the hash cache; a cold miss evaluates one-sample
    direct lighting and seeds the cache.  Warm cache hits also fold in a
    fresh sample so the cell keeps converging.
    """
    if prev_film is not None and prev_camera is not None:
        px, z = prev_camera.project(hit.position[None])
        x, y = px[0]
        if z[0] > prev_camera.near and 0 <= x < prev_film.shape[1] \
                and 0 <= y < prev_film.shape[0]:
            ix, iy = int(x), int(y)
            zbuf = prev_depth[iy, ix] if prev_depth is not None else np.inf
            if np.isfinite(zbuf) and abs(zbuf - z[0]) <= depth_tol * max(z[0], 1e-6):
                return prev_film[iy, ix].copy()

    view_dir = -np.asarray(ray_dir, dtype=np.float64)
    cached = None
    if cache is not None:
        cached = cache.lookup(hit.position, view_dir, camera)
    fresh = np.asarray(direct_fn(hit, seed), dtype=np.float64)
    if cache is not None:
        cache.accumulate(hit.position, view_dir, camera, fresh, frame)
    if cached is not None:
        return cached
    return fresh


def interpolate_indirect(gbuffer, probes: ScreenProbeSet, depth_tol=0.1,
                         fallback_radius=None):
    """Per-pixel indirect diffuse from bilinearly blended probe SH.

    Probe weights combine bilinear block coordinates with depth and normal
    similarity; pixels with no valid probe support copy the nearest similar
    shaded pixel.
    """
    h, w = gbuffer.shape
    spacing = probes.spacing
    out = np.zeros((h, w, 3))
    covered = gbuffer.opacity > 0
    ys, xs = np.nonzero(covered)
    if len(ys) == 0:
        return out

    fx = (xs + 0.5) / spacing - 0.5
    fy = (ys + 0.5) / spacing - 0.5
    bx0 = np.floor(fx).astype(np.int64)
    by0 = np.floor(fy).astype(np.int64)
    tx = fx - bx0
    ty = fy - by0

    pix_n = gbuffer.normal[ys, xs]
    pix_z = gbuffer.depth[ys, xs]
    pix_pos = gbuffer.position[ys, xs]
    acc = np.zeros((len(ys), SH_COUNT, 3))
    wsum = np.zeros(len(ys))
    cap = np.zeros((len(ys), 3))

    for dy in (0, 1):
        for dx in (0, 1):
            bx = np.clip(bx0 + dx, 0, probes.grid_w - 1)
            by = np.clip(by0 + dy, 0, probes.grid_h - 1)
            pi = by * probes.grid_w + bx
            wb = (tx if dx else (1 - tx)) * (ty if dy else (1 - ty))
            ok = probes.valid[pi]
            pz = np.linalg.norm(probes.position[pi] - pix_pos, axis=1)
            depth_ok = pz <= depth_tol * np.maximum(pix_z, 1e-6)
            ndot = np.sum(probes.normal[pi] * pix_n, axis=1)
            wn = np.clip(ndot, 0.0, 1.0) ** 2
            wgt = wb * ok * depth_ok * wn
            acc += wgt[:, None, None] * probes.sh_world[pi]
            cap += wgt[:, None] * probes.max_radiance[pi]
            wsum += wgt

    good = wsum > 1e-6
    safe = np.maximum(wsum, 1e-12)
    sh = acc / safe[:, None, None]
    cap = cap / safe[:, None]
    e = _A0 * _Y00 * sh[:, 0]
    e += _A1 * _Y1 * (
        pix_n[:, 0:1] * sh[:, 1] + pix_n[:, 1:2] * sh[:, 2] + pix_n[:, 2:3] * sh[:, 3]
    )
    e = np.clip(e, 0.0, np.pi * np.maximum(cap, 0.0))
    indirect = gbuffer.albedo[ys, xs] / np.pi * e
    out[ys[good], xs[good]] = indirect[good]

    # fallback: copy the nearest similar shaded pixel
    fallback_radius = fallback_radius or 2 * spacing
    good_mask = np.zeros((h, w), bool)
    good_mask[ys[good], xs[good]] = True
    bad_ids = np.nonzero(~good)[0]
    for bi in bad_ids:
        py, px = ys[bi], xs[bi]
        found = False
        for r in range(1, fallback_radius + 1):
            y0, y1 = max(0, py - r), min(h, py + r + 1)
            x0, x1 = max(0, px - r), min(w, px + r + 1)
            sub = good_mask[y0:y1, x0:x1]
            if not sub.any():
                continue
            syy, sxx = np.nonzero(sub)
            syy = syy + y0
            sxx = sxx + x0
            dz = np.abs(gbuffer.depth[syy, sxx] - gbuffer.depth[py, px])
            nd = gbuffer.normal[syy, sxx] @ gbuffer.normal[py, px]
            simil = (dz <= 0.1 * max(gbuffer.depth[py, px], 1e-6)) & (nd >= 0.7)
            if simil.any():
                cand = np.nonzero(simil)[0]
                d2 = (syy[cand] - py) ** 2 + (sxx[cand] - px) ** 2
                j = cand[int(np.argmin(d2))]
                out[py, px] = out[syy[j], sxx[j]]
                found = True
                break
        if not found:
            out[py, px] = 0.0
    return out
