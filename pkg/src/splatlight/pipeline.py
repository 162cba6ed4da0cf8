"""Per-frame rendering pipeline.

Each frame: rasterize to the merged G-buffer, build the Hi-Z pyramid and the
light grid, shade direct diffuse with stochastic shadow rays, update the
two-level radiance cache and resolve indirect diffuse, trace/blend glossy
reflections through the split-sum approximation, then compose the four
lighting components (emission, direct, indirect, glossy) plus the environment
through residual transparency, and tone map.  Everything is deterministic
given (scene, camera, state, seed).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .cache import (
    HashGridCache,
    cache_maintain,
    filtered_tile,
    hemi_oct_encode,
    interpolate_indirect,
    place_probes,
    resolve_radiance,
    update_probes,
    TILE_RES,
)
from .camera import CameraModel
from .geometry import GaussianSet, TriangleSet
from .lights import (
    EnvironmentLight,
    FilterHistory,
    LightGridParams,
    build_light_grid,
    filter_direct,
    orthonormal_basis,
    sample_light_pixel,
    shade_direct,
    shade_direct_buffer,
    spatial_filter,
    temporal_blend,
)
from .raster import (
    GBuffer,
    build_hiz,
    fallback_normals,
    merge_gbuffers,
    rasterize_gaussians,
    rasterize_meshes,
    spawn_hexagons,
)
from .tracing import (
    KIND_MISS,
    KIND_SCREEN,
    ScreenTraceContext,
    build_accel,
    screen_hit_record,
    trace_compound_batch,
    _make_hit,
)


@dataclass
class RenderScene:
    """Runtime scene: flat geometry, lights, environment."""

    gaussians: GaussianSet
    triangles: TriangleSet
    lights: list = field(default_factory=list)
    environment: EnvironmentLight | None = None
    version: int = 0

    _accel_cache: tuple = field(default=None, repr=False)

    def bump_version(self):
        self.version += 1

    def accel(self):
        if self._accel_cache is None or self._accel_cache[0] != self.version:
            self._accel_cache = (self.version, build_accel(self.gaussians, self.triangles))
        return self._accel_cache[1]

    def env_radiance(self, dirs):
        if self.environment is None:
            d = np.asarray(dirs, dtype=np.float64)
            shape = d.shape[:-1] + (3,)
            return np.zeros(shape) if d.ndim > 1 else np.zeros(3)
        return self.environment.radiance(dirs)


@dataclass
class RenderConfig:
    enable_emission: bool = True
    enable_direct: bool = True
    enable_indirect: bool = True
    enable_glossy: bool = True
    film_reuse: bool = True
    bias_scale: float = 1.0
    probe_spacing: int = 16
    rays_per_probe: int = 16
    r_detail: float = 0.25
    r_coarse: float = 0.6
    f0: float = 0.04
    direct_alpha: float = 0.1
    glossy_alpha: float = 0.2
    light_grid: LightGridParams = field(default_factory=LightGridParams)


@dataclass
class FrameState:
    master_seed: int = 1
    frame_index: int = 0
    prev_camera: CameraModel | None = None
    prev_film: np.ndarray | None = None  # surface lit radiance, pre-tonemap
    prev_depth: np.ndarray | None = None
    direct_history: FilterHistory | None = None
    glossy_history: FilterHistory | None = None
    probes: object = None
    hash_cache: HashGridCache = field(default_factory=lambda: HashGridCache())

    def invalidate_resolution(self, height, width):
        if self.prev_film is not None and self.prev_film.shape[:2] != (height, width):
            self.prev_film = None
            self.prev_depth = None
            self.direct_history = None
            self.glossy_history = None
            self.probes = None


@dataclass
class FrameOutput:
    hdr: np.ndarray  # composed linear radiance
    ldr: np.ndarray  # tonemapped display values in [0, 1)
    layers: dict  # emission / direct / indirect / glossy, summing to hdr
    gbuffer: GBuffer


def tonemap(hdr):
    """Reinhard x/(1+x) then gamma 1/2.2; monotone, range [0, 1)."""
    x = np.maximum(np.asarray(hdr, dtype=np.float64), 0.0)
    return (x / (1.0 + x)) ** (1.0 / 2.2)


def smoothstep(lo, hi, x):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


# ---------------------------------------------------------------------------
# Split-sum environment BRDF lookup table
# ---------------------------------------------------------------------------

_ENV_BRDF_RES = 32
_ENV_BRDF_SAMPLES = 1024
_env_brdf_cache = None


def _hammersley(n):
    i = np.arange(n, dtype=np.uint64)
    bits = i.copy()
    bits = ((bits << np.uint64(16)) | (bits >> np.uint64(16))) & np.uint64(0xFFFFFFFF)
    bits = ((bits & np.uint64(0x55555555)) << np.uint64(1)) | (
        (bits & np.uint64(0xAAAAAAAA)) >> np.uint64(1))
    bits = ((bits & np.uint64(0x33333333)) << np.uint64(2)) | (
        (bits & np.uint64(0xCCCCCCCC)) >> np.uint64(2))
    bits = ((bits & np.uint64(0x0F0F0F0F)) << np.uint64(4)) | (
        (bits & np.uint64(0xF0F0F0F0)) >> np.uint64(4))
    bits = ((bits & np.uint64(0x00FF00FF)) << np.uint64(8)) | (
        (bits & np.uint64(0xFF00FF00)) >> np.uint64(8))
    return i.astype(np.float64) / n, bits.astype(np.float64) * 2.3283064365386963e-10


def integrate_env_brdf(n_dot_v, roughness, samples=_ENV_BRDF_SAMPLES):
    """Scale/bias (A, B) of the split-sum environment BRDF for GGX.

    alpha = roughness^2; Smith-Schlick visibility with the IBL k = alpha/2.
    """
    nv = max(float(n_dot_v), 1e-4)
    v = np.array([math.sqrt(1.0 - nv * nv), 0.0, nv])
    a = max(roughness * roughness, 1e-4)
    u1, u2 = _hammersley(samples)
    phi = 2.0 * np.pi * u1
    cos_t = np.sqrt((1.0 - u2) / (1.0 + (a * a - 1.0) * u2))
    sin_t = np.sqrt(np.maximum(1.0 - cos_t**2, 0.0))
    h = np.stack([np.cos(phi) * sin_t, np.sin(phi) * sin_t, cos_t], axis=1)
    l = 2.0 * (h @ v)[:, None] * h - v
    n_dot_l = l[:, 2]
    n_dot_h = np.maximum(h[:, 2], 0.0)
    v_dot_h = np.maximum(h @ v, 0.0)
    mask = n_dot_l > 0
    k = a / 2.0
    g1l = n_dot_l / (n_dot_l * (1 - k) + k)
    g1v = nv / (nv * (1 - k) + k)
    g = g1l * g1v
    g_vis = np.where(mask, g * v_dot_h / np.maximum(n_dot_h * nv, 1e-9), 0.0)
    fc = (1.0 - v_dot_h) ** 5
    return float(((1.0 - fc) * g_vis).sum() / samples), float((fc * g_vis).sum() / samples)


def env_brdf_lut():
    """32x32 (NoV, roughness) table of split-sum (A, B), built on first use."""
    global _env_brdf_cache
    if _env_brdf_cache is None:
        lut = np.zeros((_ENV_BRDF_RES, _ENV_BRDF_RES, 2))
        for j in range(_ENV_BRDF_RES):  # roughness rows
            r = (j + 0.5) / _ENV_BRDF_RES
            for i in range(_ENV_BRDF_RES):
                nv = (i + 0.5) / _ENV_BRDF_RES
                lut[j, i] = integrate_env_brdf(nv, r)
        _env_brdf_cache = lut
    return _env_brdf_cache


def sample_env_brdf(n_dot_v, roughness):
    """Bilinear LUT lookup; inputs may be arrays."""
    lut = env_brdf_lut()
    x = np.clip(np.asarray(n_dot_v) * _ENV_BRDF_RES - 0.5, 0, _ENV_BRDF_RES - 1)
    y = np.clip(np.asarray(roughness) * _ENV_BRDF_RES - 0.5, 0, _ENV_BRDF_RES - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, _ENV_BRDF_RES - 1)
    y1 = np.minimum(y0 + 1, _ENV_BRDF_RES - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = lut[y0, x0] * (1 - fx) + lut[y0, x1] * fx
    bot = lut[y1, x0] * (1 - fx) + lut[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_ggx_vndf(view_local, roughness, u1, u2):
    """Visible-normal-distribution sampling of the GGX half-vector (local frame)."""
    a = max(roughness * roughness, 1e-4)
    v = np.array([a * view_local[0], a * view_local[1], view_local[2]])
    v /= np.linalg.norm(v)
    lensq = v[0] * v[0] + v[1] * v[1]
    if lensq > 1e-12:
        t1 = np.array([-v[1], v[0], 0.0]) / math.sqrt(lensq)
    else:
        t1 = np.array([1.0, 0.0, 0.0])
    t2 = np.cross(v, t1)
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    p1 = r * math.cos(phi)
    p2 = r * math.sin(phi)
    s = 0.5 * (1.0 + v[2])
    p2 = (1.0 - s) * math.sqrt(max(1.0 - p1 * p1, 0.0)) + s * p2
    nh = p1 * t1 + p2 * t2 + math.sqrt(max(1.0 - p1 * p1 - p2 * p2, 0.0)) * v
    h = np.array([a * nh[0], a * nh[1], max(nh[2], 1e-9)])
    return h / np.linalg.norm(h)


# ---------------------------------------------------------------------------
# Frame passes
# ---------------------------------------------------------------------------


def _make_direct_fn(scene, grid, accel, config):
    def direct_fn(hit, seed):
        gen = np.random.default_rng(int(seed))
        s = sample_light_pixel(hit.position, hit.normal, hit.albedo, grid, gen)
        return shade_direct(hit.position, hit.normal, hit.albedo, s, accel, gen,
                            bias_scale=config.bias_scale, env=scene.environment)
    return direct_fn


def _make_resolve_fn(scene, state, grid, accel, camera, config, direct_fn):
    prev_film = state.prev_film if config.film_reuse else None

    def resolve_fn(hit, ray_dir, seed):
        return resolve_radiance(
            hit, ray_dir, prev_film, state.prev_camera, state.prev_depth,
            state.hash_cache, direct_fn, camera, seed, frame=state.frame_index,
        )
    return resolve_fn


def _probe_pass(scene, state, gbuffer, ctx, accel, grid, camera, config):
    probes = place_probes(gbuffer, config.probe_spacing, previous=state.probes)
    direct_fn = _make_direct_fn(scene, grid, accel, config)
    resolve_fn = _make_resolve_fn(scene, state, grid, accel, camera, config, direct_fn)

    def trace_fn(origin, direction, seed):
        kind, idx, t, resp, px, py, _, _ = _compound_single(
            ctx, accel, origin, direction, seed, config.bias_scale
        )
        if kind == KIND_MISS:
            return None
        if kind == KIND_SCREEN:
            return screen_hit_record(ctx, px, py, t)
        return _make_hit(accel, kind, idx, t, resp, np.asarray(origin),
                         np.asarray(direction))

    def env_fn(d):
        return scene.env_radiance(d)

    update_probes(
        probes, trace_fn,
        lambda hit, direction, seed: resolve_fn(hit, direction, seed),
        env_fn, state.master_seed, state.frame_index, config.rays_per_probe,
    )
    return probes


def _compound_single(ctx, accel, origin, direction, seed, scale):
    from .tracing import _accel_args, _compound_kernel
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return _compound_kernel(
        *ctx.args(), *_accel_args(accel),
        o[0], o[1], o[2], d[0], d[1], d[2], 1e-4, np.inf, scale, np.uint64(seed),
    )


def trace_glossy(scene, state, gbuffer, ctx, accel, grid, camera, config):
    """Half-resolution reflection buffer for low-roughness pixels.

    One VNDF-sampled reflection ray per half-res pixel, compound-traced and
    resolved through the radiance cache plus hit emission, then 3x3
    edge-aware filtered and upsampled.
    """
    h, w = gbuffer.shape
    hh, hw = h // 2, w // 2
    half = np.zeros((hh, hw, 3))
    direct_fn = _make_direct_fn(scene, grid, accel, config)
    resolve_fn = _make_resolve_fn(scene, state, grid, accel, camera, config, direct_fn)

    ys = np.arange(hh) * 2
    xs = np.arange(hw) * 2
    sub_op = gbuffer.opacity[np.ix_(ys, xs)]
    sub_rough = gbuffer.roughness[np.ix_(ys, xs)]
    sub_pos = gbuffer.position[np.ix_(ys, xs)]
    sub_norm = gbuffer.normal[np.ix_(ys, xs)]
    active = (sub_op > 0) & (sub_rough < config.r_coarse)
    ids = np.nonzero(active.ravel())[0]
    if len(ids):
        origins = []
        dirs = []
        for flat in ids:
            i, j = divmod(int(flat), hw)
            pos = sub_pos[i, j]
            n = sub_norm[i, j]
            v = camera.position - pos
            v /= np.linalg.norm(v)
            t, b = orthonormal_basis(n)
            v_local = np.array([v @ t, v @ b, max(v @ n, 1e-4)])
            seed = rngmod.stream_seed(state.master_seed, state.frame_index,
                                      flat, rngmod.STREAM_GLOSSY)
            u = rngmod.uniforms(seed, 2)
            h_local = sample_ggx_vndf(v_local, float(sub_rough[i, j]), u[0], u[1])
            l_local = 2.0 * (v_local @ h_local) * h_local - v_local
            if l_local[2] <= 0:
                l_local = np.array([l_local[0], l_local[1], abs(l_local[2]) + 1e-6])
                l_local /= np.linalg.norm(l_local)
            d = l_local[0] * t + l_local[1] * b + l_local[2] * n
            origins.append(pos + n * 1e-3)
            dirs.append(d)
        origins = np.array(origins)
        dirs = np.array(dirs)
        seeds = rngmod.stream_seeds(
            state.master_seed, state.frame_index,
            ids.astype(np.uint64) + np.uint64(1 << 32), rngmod.STREAM_GLOSSY,
        )
        kind, idx, t, resp, px, py = trace_compound_batch(
            ctx, accel, origins, dirs, np.full(len(ids), 1e-4),
            np.full(len(ids), np.inf), seeds, config.bias_scale,
        )
        for row, flat in enumerate(ids):
            i, j = divmod(int(flat), hw)
            if kind[row] == KIND_MISS:
                rad = scene.env_radiance(dirs[row])
            else:
                if kind[row] == KIND_SCREEN:
                    rec = screen_hit_record(ctx, px[row], py[row], t[row])
                else:
                    rec = _make_hit(accel, int(kind[row]), int(idx[row]),
                                    t[row], resp[row], origins[row], dirs[row])
                seed = rngmod.stream_seed(state.master_seed, state.frame_index,
                                          int(flat) + (1 << 33), rngmod.STREAM_GLOSSY)
                rad = np.asarray(resolve_fn(rec, dirs[row], seed)) + rec.emission
            half[i, j] = rad

    half_gb = GBuffer.empty(hh, hw)
    half_gb.opacity = sub_op
    half_gb.depth = gbuffer.depth[np.ix_(ys, xs)]
    half_gb.normal = sub_norm
    filtered = spatial_filter(half, half_gb, radius=1)

    # Half-res pixels whose representative sample fell on sky still upsample
    # onto covered full-res pixels at silhouette edges: fill them from traced
    # neighbors before upsampling.
    traced = active.copy()
    for _ in range(2):
        missing = ~traced
        if not missing.any():
            break
        acc = np.zeros((hh, hw, 3))
        cnt = np.zeros((hh, hw))
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                src_y = slice(max(0, dy), hh + min(0, dy))
                src_x = slice(max(0, dx), hw + min(0, dx))
                dst_y = slice(max(0, -dy), hh + min(0, -dy))
                dst_x = slice(max(0, -dx), hw + min(0, -dx))
                m = traced[src_y, src_x]
                acc[dst_y, dst_x] += np.where(m[..., None], filtered[src_y, src_x], 0.0)
                cnt[dst_y, dst_x] += m
        fill = missing & (cnt > 0)
        filtered[fill] = acc[fill] / cnt[fill][..., None]
        traced = traced | fill
    return np.repeat(np.repeat(filtered, 2, axis=0), 2, axis=1)[:h, :w]


def coarse_reflection(gbuffer, probes, scene, camera):
    """Reflection approximation from probe tile texels toward the mirror
    direction, with an environment fallback where probes are invalid."""
    h, w = gbuffer.shape
    out = np.zeros((h, w, 3))
    covered = gbuffer.opacity > 0
    ys, xs = np.nonzero(covered)
    if len(ys) == 0:
        return out
    pos = gbuffer.position[ys, xs]
    n = gbuffer.normal[ys, xs]
    v = camera.position - pos
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    refl = 2.0 * np.sum(v * n, axis=1, keepdims=True) * n - v

    spacing = probes.spacing
    fx = (xs + 0.5) / spacing - 0.5
    fy = (ys + 0.5) / spacing - 0.5
    bx0 = np.floor(fx).astype(np.int64)
    by0 = np.floor(fy).astype(np.int64)
    tx = fx - bx0
    ty = fy - by0

    filt = np.zeros_like(probes.tile)
    for i in np.nonzero(probes.valid)[0]:
        filt[i] = filtered_tile(probes.tile[i])

    acc = np.zeros((len(ys), 3))
    wsum = np.zeros(len(ys))
    pix_z = gbuffer.depth[ys, xs]
    for dy in (0, 1):
        for dx in (0, 1):
            bx = np.clip(bx0 + dx, 0, probes.grid_w - 1)
            by = np.clip(by0 + dy, 0, probes.grid_h - 1)
            pi = by * probes.grid_w + bx
            wb = (tx if dx else (1 - tx)) * (ty if dy else (1 - ty))
            ok = probes.valid[pi]
            dz = np.linalg.norm(probes.position[pi] - pos, axis=1)
            depth_ok = dz <= 0.1 * np.maximum(pix_z, 1e-6)
            wgt = wb * ok * depth_ok
            # texel lookup in each probe's local frame
            lx = np.sum(refl * probes.tangent[pi], axis=1)
            ly = np.sum(refl * probes.bitangent[pi], axis=1)
            lz = np.maximum(np.sum(refl * probes.normal[pi], axis=1), 1e-6)
            local = np.stack([lx, ly, lz], axis=1)
            local /= np.linalg.norm(local, axis=1, keepdims=True)
            uv = hemi_oct_encode(local)
            ti = np.clip((uv[:, 0] * TILE_RES).astype(np.int64), 0, TILE_RES - 1)
            tj = np.clip((uv[:, 1] * TILE_RES).astype(np.int64), 0, TILE_RES - 1)
            acc += wgt[:, None] * filt[pi, tj, ti]
            wsum += wgt
    good = wsum > 1e-6
    vals = np.where(good[:, None], acc / np.maximum(wsum, 1e-12)[:, None],
                    scene.env_radiance(refl))
    out[ys, xs] = vals
    return out


def split_sum_shade(gbuffer, detailed, coarse, camera, config):
    """Blend prefiltered radiance by roughness and apply the env-BRDF term."""
    h, w = gbuffer.shape
    covered = gbuffer.opacity > 0
    beta = smoothstep(config.r_detail, config.r_coarse, gbuffer.roughness)
    prefiltered = (1.0 - beta[..., None]) * detailed + beta[..., None] * coarse
    v = camera.position[None, None, :] - gbuffer.position
    v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    n_dot_v = np.clip(np.sum(v * gbuffer.normal, axis=-1), 1e-4, 1.0)
    ab = sample_env_brdf(n_dot_v, np.clip(gbuffer.roughness, 0.0, 1.0))
    term = config.f0 * ab[..., 0] + ab[..., 1]
    return np.where(covered[..., None], prefiltered * term[..., None], 0.0)


# ---------------------------------------------------------------------------
# Frame orchestration
# ---------------------------------------------------------------------------


def render_frame(scene: RenderScene, camera: CameraModel, state: FrameState,
                 config: RenderConfig | None = None) -> FrameOutput:
    """Render one frame and advance the temporal state."""
    config = config or RenderConfig()
    if camera.width <= 0 or camera.height <= 0:
        raise ValueError("invalid camera resolution")
    h, w = camera.height, camera.width
    state.invalidate_resolution(h, w)

    mesh_gb, mesh_depth = rasterize_meshes(scene.triangles, camera)
    hexes = spawn_hexagons(scene.gaussians, camera)
    gauss_gb = rasterize_gaussians(hexes, mesh_depth, camera, scene.gaussians)
    gbuffer = merge_gbuffers(gauss_gb, mesh_gb)
    gbuffer = fallback_normals(gbuffer, camera)

    levels, thickness = build_hiz(gbuffer)
    ctx = ScreenTraceContext(gbuffer, levels, thickness, camera)
    accel = scene.accel()
    grid = build_light_grid(scene.lights, camera, config.light_grid,
                            seed=state.master_seed, frame=state.frame_index)

    covered = gbuffer.opacity > 0
    alpha = gbuffer.opacity[..., None]

    direct = np.zeros((h, w, 3))
    if config.enable_direct:
        raw = shade_direct_buffer(gbuffer, grid, accel, scene.environment,
                                  state.master_seed, state.frame_index,
                                  config.bias_scale)
        direct, state.direct_history = filter_direct(
            raw, state.direct_history, gbuffer, camera, alpha=config.direct_alpha
        )

    indirect = np.zeros((h, w, 3))
    if config.enable_indirect:
        probes = _probe_pass(scene, state, gbuffer, ctx, accel, grid, camera, config)
        state.probes = probes
        indirect = interpolate_indirect(gbuffer, probes)
    elif state.probes is None and config.enable_glossy:
        state.probes = place_probes(gbuffer, config.probe_spacing)

    glossy = np.zeros((h, w, 3))
    if config.enable_glossy:
        detailed = trace_glossy(scene, state, gbuffer, ctx, accel, grid, camera, config)
        coarse = coarse_reflection(gbuffer, state.probes, scene, camera)
        raw_glossy = split_sum_shade(gbuffer, detailed, coarse, camera, config)
        glossy, state.glossy_history = temporal_blend(
            raw_glossy, state.glossy_history, gbuffer, camera,
            alpha=config.glossy_alpha,
        )

    emission = gbuffer.emission if config.enable_emission else np.zeros((h, w, 3))

    surface_lit = emission + direct + indirect + glossy
    dirs = camera.pixel_rays()
    background = scene.env_radiance(dirs.reshape(-1, 3)).reshape(h, w, 3)

    layers = {
        "emission": alpha * emission + (1.0 - alpha) * background,
        "direct": alpha * direct,
        "indirect": alpha * indirect,
        "glossy": alpha * glossy,
    }
    hdr = layers["emission"] + layers["direct"] + layers["indirect"] + layers["glossy"]

    cache_maintain(state.hash_cache, state.frame_index)
    state.prev_camera = camera
    state.prev_film = surface_lit.copy()
    state.prev_depth = gbuffer.depth.copy()
    state.frame_index += 1

    return FrameOutput(hdr=hdr, ldr=tonemap(hdr), layers=layers, gbuffer=gbuffer)


def decompose_lighting(scene, camera, state, config=None):
    """Render once and return the four lighting layers plus the composite."""
    out = render_frame(scene, camera, state, config)
    return out.layers, out.hdr
