"""Direct diffuse illumination.

Lights are injected per frame into a camera-centered cascaded grid using
weighted reservoir sampling (keys ``u^(1/w)``), then re-weighted per pixel by
their unshadowed contribution; one stochastic shadow ray estimates the
arriving fraction.  A small edge-aware spatio-temporal filter tames the
1-sample noise.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .gsmath import Ray
from .tracing import trace_shadow_batch, trace_shadow_stochastic

LUMA = np.array([0.2126, 0.7152, 0.0722])

KIND_DIRECTIONAL = 0
KIND_AREA = 1


@dataclass
class DirectionalLight:
    direction: np.ndarray  # unit, light travel direction
    radiance: np.ndarray

    kind: int = field(default=KIND_DIRECTIONAL, init=False)

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if n < 1e-12:
            raise ValueError("directional light needs a direction")
        self.direction = self.direction / n
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if np.any(self.radiance < 0):
            raise ValueError("radiance must be non-negative")


@dataclass
class AreaLight:
    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    radiance: np.ndarray
    two_sided: bool = False

    kind: int = field(default=KIND_AREA, init=False)

    def __post_init__(self):
        self.corner = np.asarray(self.corner, dtype=np.float64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.float64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.float64)
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if np.any(self.radiance < 0):
            raise ValueError("radiance must be non-negative")
        n = np.cross(self.edge_u, self.edge_v)
        if np.linalg.norm(n) < 1e-12:
            raise ValueError("area light edges must not be parallel")

    @property
    def area(self):
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    @property
    def normal(self):
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def center(self):
        return self.corner + 0.5 * (self.edge_u + self.edge_v)


@dataclass
class EnvironmentLight:
    """Constant color or equirectangular HDR map."""

    color: np.ndarray | None = None
    image: np.ndarray | None = None  # (H, W, 3), latitude-longitude

    def __post_init__(self):
        if self.color is not None:
            self.color = np.asarray(self.color, dtype=np.float64)
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
        if (self.color is None) == (self.image is None):
            raise ValueError("environment light needs either a color or a map")

    def radiance(self, directions):
        d = np.asarray(directions, dtype=np.float64)
        single = d.ndim == 1
        d = d.reshape(-1, 3)
        if self.color is not None:
            out = np.tile(self.color, (len(d), 1))
        else:
            h, w, _ = self.image.shape
            theta = np.arccos(np.clip(d[:, 1], -1.0, 1.0))
            phi = np.arctan2(d[:, 2], d[:, 0])
            u = np.clip(((phi / (2 * np.pi)) % 1.0) * w, 0, w - 1).astype(np.int64)
            v = np.clip(theta / np.pi * h, 0, h - 1).astype(np.int64)
            out = self.image[v, u]
        return out[0] if single else out


@dataclass
class LightGridParams:
    cascades: int = 4
    base_cell: float = 1.0
    cells_per_axis: int = 8
    reservoir_size: int = 8
    min_weight: float = 1e-9
    d_min: float = 0.1  # near-field clamp on 1/d^2 weights


@dataclass
class LightGrid:
    params: LightGridParams
    origin: np.ndarray  # camera position at build time
    reservoir: np.ndarray  # (C, N^3, R) light indices, -1 empty
    total_weight: np.ndarray  # (C, N^3)
    lights: list

    def cell_of(self, position):
        """(cascade, cell index) of a world position; finest cascade wins."""
        p = self.params
        rel = np.asarray(position, dtype=np.float64) - self.origin
        for c in range(p.cascades):
            cell = p.base_cell * (2.0**c)
            extent = cell * p.cells_per_axis / 2.0
            if np.all(np.abs(rel) < extent):
                ijk = np.floor(rel / cell).astype(np.int64) + p.cells_per_axis // 2
                ijk = np.clip(ijk, 0, p.cells_per_axis - 1)
                return c, int(
                    (ijk[0] * p.cells_per_axis + ijk[1]) * p.cells_per_axis + ijk[2]
                )
        c = p.cascades - 1
        cell = p.base_cell * (2.0**c)
        ijk = np.floor(rel / cell).astype(np.int64) + p.cells_per_axis // 2
        ijk = np.clip(ijk, 0, p.cells_per_axis - 1)
        return c, int((ijk[0] * p.cells_per_axis + ijk[1]) * p.cells_per_axis + ijk[2])

    def reservoir_at(self, position):
        c, idx = self.cell_of(position)
        ids = self.reservoir[c, idx]
        return [int(i) for i in ids if i >= 0]


def luminance(rgb):
    return float(np.dot(np.asarray(rgb, dtype=np.float64), LUMA))


def grid_weight(light, cell_center, d_min):
    """Heuristic contribution of a light to a grid cell."""
    if light.kind == KIND_DIRECTIONAL:
        return luminance(light.radiance)
    d2 = float(np.sum((light.center - cell_center) ** 2))
    return luminance(light.radiance) * light.area / max(d2, d_min * d_min)


def build_light_grid(lights, camera, params: LightGridParams | None = None,
                     seed=0, frame=0) -> LightGrid:
    """Fill every cell's reservoir by weighted sampling without replacement."""
    params = params or LightGridParams()
    grid_lights = [l for l in lights if l.kind in (KIND_DIRECTIONAL, KIND_AREA)]
    p = params
    n_cells = p.cells_per_axis**3
    reservoir = np.full((p.cascades, n_cells, p.reservoir_size), -1, np.int32)
    total_weight = np.zeros((p.cascades, n_cells))
    origin = np.asarray(camera.position, dtype=np.float64).copy()
    if not grid_lights:
        return LightGrid(params, origin, reservoir, total_weight, list(lights))

    half = p.cells_per_axis // 2
    ax = (np.arange(p.cells_per_axis) - half + 0.5)
    for c in range(p.cascades):
        cell = p.base_cell * (2.0**c)
        centers = (
            np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
            * cell
            + origin
        )
        weights = np.zeros((n_cells, len(grid_lights)))
        for li, light in enumerate(grid_lights):
            if light.kind == KIND_DIRECTIONAL:
                weights[:, li] = luminance(light.radiance)
            else:
                d2 = np.sum((centers - light.center) ** 2, axis=1)
                weights[:, li] = (
                    luminance(light.radiance) * light.area
                    / np.maximum(d2, p.d_min**2)
                )
        weights[weights < p.min_weight] = 0.0
        total_weight[c] = weights.sum(axis=1)

        seeds = rngmod.stream_seeds(
            seed, frame, np.arange(n_cells, dtype=np.uint64) + c * n_cells,
            rngmod.STREAM_GRID,
        )
        k = min(p.reservoir_size, len(grid_lights))
        reservoir[c, :, :k] = ares_fill(weights, seeds, k)
    return LightGrid(params, origin, reservoir, total_weight, list(lights))


def ares_fill(weights, seeds, k):
    """Reservoirs of size k via A-Res keys ``u^(1/w)``, rows independent.

    ``weights`` is (rows, lights); zero-weight candidates never enter.
    Returns (rows, k) light indices with -1 padding.
    """
    u = rngmod.uniform_grid(seeds, weights.shape[1])
    with np.errstate(divide="ignore"):
        keys = np.where(weights > 0, u ** (1.0 / np.maximum(weights, 1e-300)), -1.0)
    top = np.argsort(-keys, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(keys, top, axis=1) > 0
    return np.where(picked, top, -1).astype(np.int32)


@dataclass
class LightSample:
    light_index: int  # -1 for the null sample
    point: np.ndarray | None  # None for directional lights
    direction: np.ndarray  # unit, surface -> light
    distance: float  # np.inf for directional
    radiance: np.ndarray
    pdf: float  # effective pdf of the whole per-pixel decision


NULL_SAMPLE = LightSample(-1, None, np.array([0.0, 0.0, 1.0]), np.inf,
                          np.zeros(3), 1.0)


def _candidate(light, li, position, normal, albedo, u1, u2):
    """Candidate sample + unshadowed contribution for one reservoir light."""
    if light.kind == KIND_DIRECTIONAL:
        wi = -light.direction
        cos_p = float(np.dot(normal, wi))
        if cos_p <= 0.0:
            return None
        contrib = (albedo / np.pi) * light.radiance * cos_p
        return (li, None, wi, np.inf, light.radiance, 1.0, contrib)
    q = light.corner + u1 * light.edge_u + u2 * light.edge_v
    to_q = q - position
    d2 = float(np.dot(to_q, to_q))
    if d2 < 1e-12:
        return None
    dist = math.sqrt(d2)
    wi = to_q / dist
    cos_p = float(np.dot(normal, wi))
    if cos_p <= 0.0:
        return None
    cos_q = float(np.dot(light.normal, -wi))
    if light.two_sided:
        cos_q = abs(cos_q)
    if cos_q <= 0.0:
        return None
    # area pdf 1/A converted to solid angle: d^2 / (A cos_q)
    pdf_sa = d2 / (light.area * cos_q)
    contrib = (albedo / np.pi) * light.radiance * cos_p / pdf_sa
    return (li, q, wi, dist, light.radiance, pdf_sa, contrib)


def sample_light_pixel(position, normal, albedo, grid: LightGrid, rng) -> LightSample:
    """One light sample for a surface point, re-weighted by pixel contribution.

    Among the reservoir lights of the point's cell, each spawns one candidate;
    one is picked proportionally to its unshadowed contribution.  The returned
    pdf folds the selection probability into the point pdf, so dividing by it
    keeps the estimator unbiased for the reservoir's light set.
    """
    ids = grid.reservoir_at(position)
    if not ids:
        return NULL_SAMPLE
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cands = []
    weights = []
    for li in ids:
        light = grid.lights[li]
        u1, u2 = gen.uniform(), gen.uniform()
        cand = _candidate(light, li, position, normal, albedo, u1, u2)
        if cand is None:
            continue
        cands.append(cand)
        weights.append(luminance(cand[6]))
    if not cands or sum(weights) <= 0.0:
        return NULL_SAMPLE
    w = np.asarray(weights)
    total = w.sum()
    pick = int(np.searchsorted(np.cumsum(w) / total, gen.uniform(), side="right"))
    pick = min(pick, len(cands) - 1)
    li, q, wi, dist, rad, pdf_sa, _ = cands[pick]
    return LightSample(li, q, wi, dist, rad, pdf_sa * (w[pick] / total))


SHADOW_EPS = 1e-3


def shade_direct(position, normal, albedo, sample: LightSample, accel, rng,
                 bias_scale=1.0, env: EnvironmentLight | None = None):
    """Lambertian direct radiance with a stochastic shadow ray.

    The environment light, when present, contributes through one
    cosine-sampled direction with the same shadow test (the cosine pdf
    cancels against the cosine factor).
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    position = np.asarray(position, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    albedo = np.asarray(albedo, dtype=np.float64)
    out = np.zeros(3)
    if sample.light_index >= 0 and sample.pdf > 0:
        cos_p = float(np.dot(normal, sample.direction))
        if cos_p > 0:
            origin = position + normal * SHADOW_EPS
            t_max = sample.distance - 2 * SHADOW_EPS if np.isfinite(sample.distance) else 1e12
            if t_max > SHADOW_EPS:
                ray = Ray(origin, sample.direction, 0.0, t_max)
                b = trace_shadow_stochastic(accel, ray, gen, bias_scale)
                if not b:
                    out += (albedo / np.pi) * sample.radiance * cos_p / sample.pdf
    if env is not None:
        d = cosine_sample_hemisphere(normal, gen.uniform(), gen.uniform())
        ray = Ray(position + normal * SHADOW_EPS, d, 0.0, 1e12)
        b = trace_shadow_stochastic(accel, ray, gen, bias_scale)
        if not b:
            out += albedo * env.radiance(d)
    return out


def cosine_sample_hemisphere(normal, u1, u2):
    z = math.sqrt(max(1.0 - u2, 0.0))
    phi = 2.0 * math.pi * u1
    st = math.sqrt(u2)
    x = math.cos(phi) * st
    y = math.sin(phi) * st
    t, b = orthonormal_basis(normal)
    return x * t + y * b + z * np.asarray(normal)


def orthonormal_basis(n):
    n = np.asarray(n, dtype=np.float64)
    a = np.array([0.0, 1.0, 0.0]) if abs(n[0]) > 0.9 else np.array([1.0, 0.0, 0.0])
    t = np.cross(a, n)
    t /= np.linalg.norm(t)
    return t, np.cross(n, t)


# ---------------------------------------------------------------------------
# Batched per-pixel direct lighting (same math as the scalar path above)
# ---------------------------------------------------------------------------


def shade_direct_buffer(gbuffer, grid: LightGrid, accel,
                        env: EnvironmentLight | None, master_seed, frame,
                        bias_scale=1.0):
    """Direct diffuse radiance per covered pixel, vectorized over the frame."""
    h, w = gbuffer.shape
    out = np.zeros((h, w, 3))
    mask = gbuffer.opacity > 0
    ys, xs = np.nonzero(mask)
    n = len(ys)
    if n == 0:
        return out
    pix_ids = (ys * w + xs).astype(np.uint64)
    pos = gbuffer.position[ys, xs]
    nrm = gbuffer.normal[ys, xs]
    alb = gbuffer.albedo[ys, xs]

    sel_seeds = rngmod.stream_seeds(master_seed, frame, pix_ids, rngmod.STREAM_LIGHT_SEL)
    uu = rngmod.uniform_grid(sel_seeds, 2 * max(1, _max_reservoir(grid)) + 1)

    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    tmaxs = np.zeros(n)
    contrib = np.zeros((n, 3))
    active = np.zeros(n, dtype=bool)
    for i in range(n):
        s = _sample_with_uniforms(pos[i], nrm[i], alb[i], grid, uu[i])
        if s.light_index < 0 or s.pdf <= 0:
            continue
        cos_p = float(np.dot(nrm[i], s.direction))
        if cos_p <= 0:
            continue
        t_max = s.distance - 2 * SHADOW_EPS if np.isfinite(s.distance) else 1e12
        if t_max <= SHADOW_EPS:
            continue
        active[i] = True
        origins[i] = pos[i] + nrm[i] * SHADOW_EPS
        dirs[i] = s.direction
        tmaxs[i] = t_max
        contrib[i] = (alb[i] / np.pi) * s.radiance * cos_p / s.pdf

    if active.any():
        idx = np.nonzero(active)[0]
        seeds = rngmod.stream_seeds(master_seed, frame, pix_ids[idx], rngmod.STREAM_SHADOW)
        b, _ = trace_shadow_batch(
            accel, origins[idx], dirs[idx], np.zeros(len(idx)), tmaxs[idx],
            seeds, bias_scale,
        )
        lit = b == 0
        out[ys[idx[lit]], xs[idx[lit]]] += contrib[idx[lit]]

    if env is not None:
        env_seeds = rngmod.stream_seeds(master_seed, frame, pix_ids, rngmod.STREAM_ENV)
        ue = rngmod.uniform_grid(env_seeds, 2)
        d_env = np.empty((n, 3))
        for i in range(n):
            d_env[i] = cosine_sample_hemisphere(nrm[i], ue[i, 0], ue[i, 1])
        seeds = rngmod.stream_seeds(
            master_seed, frame, pix_ids + np.uint64(1 << 40), rngmod.STREAM_ENV
        )
        b, _ = trace_shadow_batch(
            accel, pos + nrm * SHADOW_EPS, d_env, np.zeros(n), np.full(n, 1e12),
            seeds, bias_scale,
        )
        lit = b == 0
        if lit.any():
            out[ys[lit], xs[lit]] += alb[lit] * env.radiance(d_env[lit])
    return out


def _max_reservoir(grid):
    return grid.params.reservoir_size


def _sample_with_uniforms(position, normal, albedo, grid, uniforms) -> LightSample:
    """Deterministic-stream variant of sample_light_pixel for batch shading."""
    ids = grid.reservoir_at(position)
    if not ids:
        return NULL_SAMPLE
    cands = []
    weights = []
    for j, li in enumerate(ids):
        light = grid.lights[li]
        cand = _candidate(light, li, position, normal, albedo,
                          uniforms[2 * j], uniforms[2 * j + 1])
        if cand is None:
            continue
        cands.append(cand)
        weights.append(luminance(cand[6]))
    if not cands:
        return NULL_SAMPLE
    w = np.asarray(weights)
    total = w.sum()
    if total <= 0:
        return NULL_SAMPLE
    pick = int(np.searchsorted(np.cumsum(w) / total, uniforms[-1], side="right"))
    pick = min(pick, len(cands) - 1)
    li, q, wi, dist, rad, pdf_sa, _ = cands[pick]
    return LightSample(li, q, wi, dist, rad, pdf_sa * (w[pick] / total))


# ---------------------------------------------------------------------------
# Spatio-temporal filtering
# ---------------------------------------------------------------------------


@dataclass
class FilterHistory:
    value: np.ndarray  # (H, W, 3)
    depth: np.ndarray
    normal: np.ndarray
    camera: object
    valid: np.ndarray  # (H, W) bool


def spatial_filter(buffer, gbuffer, radius=2, sigma_z=0.05, normal_power=8.0):
    """Edge-aware blur: weights decay with relative depth gap and normal spread."""
    h, w = gbuffer.shape
    out = np.zeros_like(buffer)
    weight = np.zeros((h, w))
    depth = gbuffer.depth
    normal = gbuffer.normal
    valid = gbuffer.opacity > 0
    finite_z = np.where(np.isfinite(depth), depth, 0.0)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            src = (slice(ys0 + dy, ys1 + dy), slice(xs0 + dx, xs1 + dx))
            dst = (slice(ys0, ys1), slice(xs0, xs1))
            dz = np.abs(finite_z[src] - finite_z[dst]) / np.maximum(finite_z[dst], 1e-6)
            wz = np.exp(-((dz / sigma_z) ** 2))
            ndot = np.clip(np.sum(normal[src] * normal[dst], axis=-1), 0.0, 1.0)
            wn = ndot**normal_power
            ww = wz * wn * valid[src] * valid[dst]
            out[dst] += ww[..., None] * buffer[src]
            weight[dst] += ww
    safe = np.maximum(weight, 1e-12)
    out = out / safe[..., None]
    return np.where(valid[..., None], out, buffer)


def _neighborhood_bounds(buffer, pad_rel=0.05, pad_abs=1e-4):
    """Per-pixel 3x3 min/max box of a buffer, slightly expanded."""
    lo = buffer.copy()
    hi = buffer.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            shifted = np.roll(np.roll(buffer, dy, axis=0), dx, axis=1)
            np.minimum(lo, shifted, out=lo)
            np.maximum(hi, shifted, out=hi)
    span = (hi - lo) * pad_rel + pad_abs
    return lo - span, hi + span


def temporal_blend(current, history: FilterHistory | None, gbuffer, camera,
                   alpha=0.1, depth_tol=0.05, normal_tol=0.9):
    """Exponential blend against the reprojected history.

    History samples are rejected when the reprojected depth differs by more
    than ``depth_tol`` (relative) or the normals disagree, and are clamped
    into the current frame's 3x3 neighborhood range so radical lighting
    changes propagate within a frame instead of decaying at ``alpha``.
    Returns (filtered, new history).
    """
    h, w = gbuffer.shape
    valid = gbuffer.opacity > 0
    out = current.copy()
    if history is not None and history.value.shape == current.shape:
        px, z_prev_cam = history.camera.project(gbuffer.position.reshape(-1, 3))
        px = px.reshape(h, w, 2)
        z_prev_cam = z_prev_cam.reshape(h, w)
        ix = np.floor(px[..., 0]).astype(np.int64)
        iy = np.floor(px[..., 1]).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h) & (z_prev_cam > 0)
        ixc = np.clip(ix, 0, w - 1)
        iyc = np.clip(iy, 0, h - 1)
        prev_depth = history.depth[iyc, ixc]
        prev_normal = history.normal[iyc, ixc]
        prev_valid = history.valid[iyc, ixc]
        with np.errstate(invalid="ignore"):
            depth_ok = np.abs(prev_depth - z_prev_cam) <= depth_tol * np.maximum(
                z_prev_cam, 1e-6
            )
            normal_ok = np.sum(prev_normal * gbuffer.normal, axis=-1) >= normal_tol
        accept = inside & prev_valid & valid & np.where(
            np.isfinite(prev_depth), depth_ok, False
        ) & normal_ok
        hist_val = history.value[iyc, ixc]
        lo, hi = _neighborhood_bounds(current)
        hist_val = np.clip(hist_val, lo, hi)
        out = np.where(accept[..., None],
                       (1.0 - alpha) * hist_val + alpha * current, current)
    new_hist = FilterHistory(
        value=out.copy(),
        depth=gbuffer.depth.copy(),
        normal=gbuffer.normal.copy(),
        camera=camera,
        valid=valid.copy(),
    )
    return out, new_hist


def filter_direct(current, history, gbuffer, camera, alpha=0.1):
    """Spatial blur then temporal accumulation; returns (filtered, history)."""
    blurred = spatial_filter(current, gbuffer)
    return temporal_blend(blurred, history, gbuffer, camera, alpha=alpha)
