import numpy as np
import pytest

from splatlight import rng as rngmod
from splatlight.cache import (
    HashGridCache,
    TILE_RES,
    cache_maintain,
    hemi_oct_decode,
    hemi_oct_encode,
    interpolate_indirect,
    numeric_irradiance,
    place_probes,
    probe_ray_plan,
    probe_texel_lookup,
    project_tile_sh,
    reconstruct_tile_sh,
    refresh_probe_sh,
    resolve_radiance,
    sh_irradiance,
    update_probes,
)
from splatlight.camera import CameraModel
from splatlight.raster import GBuffer
from splatlight.tracing import KIND_TRIANGLE, HitRecord


def make_camera(w=128, h=128):
    return CameraModel.look_at([0, 0, 0], [0, 0, 1], [0, 1, 0], w, h, 60.0)


def wall_gbuffer(h=128, w=128, z=4.0, cover=1.0):
    cam = make_camera(w, h)
    gb = GBuffer.empty(h, w)
    cols = int(w * cover)
    gb.opacity[:, :cols] = 1.0
    gb.depth[:, :cols] = z
    gb.normal[:, :cols] = [0, 0, -1]
    gb.albedo[:] = 0.5
    dirs = cam.pixel_rays()
    gb.position = cam.position + dirs * (z / dirs[..., 2:3])
    return cam, gb


class TestHemiOct:
    def test_round_trip(self):
        gen = np.random.default_rng(0)
        d = gen.normal(size=(1000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d[:, 2] = np.abs(d[:, 2]) + 1e-6
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        uv = hemi_oct_encode(d)
        back = hemi_oct_decode(uv[:, 0], uv[:, 1])
        assert np.allclose(back, d, atol=1e-9)

    def test_decode_upper_hemisphere(self):
        gen = np.random.default_rng(1)
        u, v = gen.uniform(0, 1, (2, 500))
        d = hemi_oct_decode(u, v)
        assert (d[:, 2] >= -1e-12).all()
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0)


class TestSphericalHarmonics:
    def test_constant_tile_reproduced(self):
        tile = np.full((TILE_RES, TILE_RES, 3), 0.7)
        coeffs = project_tile_sh(tile)
        recon = reconstruct_tile_sh(coeffs)
        assert np.abs(recon - 0.7).max() < 1e-4

    def test_uniform_radiance_irradiance_pi(self):
        tile = np.full((TILE_RES, TILE_RES, 3), 2.0)
        local = project_tile_sh(tile)
        # local frame: probe normal is +z
        coeffs_world = np.stack([local[0], local[3], local[1], local[2]])
        e = sh_irradiance(coeffs_world, np.array([0.0, 0.0, 1.0]))
        assert np.allclose(e, 2.0 * np.pi, rtol=1e-6)

    def test_random_tiles_within_5pct_of_quadrature(self):
        gen = np.random.default_rng(7)
        for trial in range(100):
            tile = gen.uniform(0, 1, (TILE_RES, TILE_RES, 3))
            local = project_tile_sh(tile)
            coeffs_world = np.stack([local[0], local[3], local[1], local[2]])
            e = sh_irradiance(coeffs_world, np.array([0.0, 0.0, 1.0]))
            ref = numeric_irradiance(tile, [0, 0, 1], samples=60_000, seed=trial)
            assert np.abs(e - ref).max() <= 0.05 * max(ref.max(), 1e-9)


class TestPlaceProbes:
    def test_full_wall_probe_count(self):
        cam, gb = wall_gbuffer()
        probes = place_probes(gb, spacing=16)
        assert probes.valid.sum() == 64

    def test_all_sky_zero_probes(self):
        cam = make_camera()
        gb = GBuffer.empty(128, 128)
        probes = place_probes(gb, spacing=16)
        assert probes.valid.sum() == 0

    def test_half_sky(self):
        cam, gb = wall_gbuffer(cover=0.5)
        probes = place_probes(gb, spacing=16)
        grid = probes.valid.reshape(probes.grid_h, probes.grid_w)
        assert grid[:, :4].all()
        assert not grid[:, 4:].any()

    def test_previous_state_carried(self):
        cam, gb = wall_gbuffer()
        probes = place_probes(gb, spacing=16)
        probes.tile[:] = 3.0
        probes.count[:] = 5.0
        again = place_probes(gb, spacing=16, previous=probes)
        assert np.allclose(again.tile[again.valid], 3.0)
        # moved surface: state dropped
        gb.position[..., 2] += 2.0
        gb.depth += 2.0
        moved = place_probes(gb, spacing=16, previous=probes)
        assert np.allclose(moved.tile[moved.valid], 0.0)


class TestUpdateProbes:
    def run_frames(self, env_value, frames, rays=16, noise=0.0):
        cam, gb = wall_gbuffer(h=32, w=32, z=4.0)
        probes = place_probes(gb, spacing=16)

        def trace_fn(origin, direction, seed):
            return None

        def resolve_fn(hit, direction, seed):
            raise AssertionError("no hits expected")

        def env_fn(d):
            if noise:
                return env_value + noise * (2.0 * _noise01(d) - 1.0)
            return np.full(3, env_value)

        for f in range(frames):
            update_probes(probes, trace_fn, resolve_fn, env_fn, 1, f, rays)
        return probes

    def test_constant_env_converges_to_one(self):
        probes = self.run_frames(1.0, frames=64, rays=32)
        filled = probes.count[probes.valid] > 0
        tiles = probes.tile[probes.valid]
        assert np.abs(tiles[filled[..., None].repeat(3, -1)] - 1.0).max() < 0.01

    def test_black_dome_all_zero(self):
        probes = self.run_frames(0.0, frames=4)
        assert np.allclose(probes.tile, 0.0)

    def test_importance_sampling_prefers_bright_texel(self):
        cam, gb = wall_gbuffer(h=32, w=32)
        probes = place_probes(gb, spacing=16)
        i = int(np.nonzero(probes.valid)[0][0])
        probes.tile[i, 3, 4] = [50.0, 50.0, 50.0]
        counts = np.zeros((TILE_RES, TILE_RES))
        for f in range(64):
            pidx, tj, ti, _, _ = probe_ray_plan(probes, 9, f, 16)
            mine = pidx == i
            np.add.at(counts, (tj[mine], ti[mine]), 1)
        uniform_share = counts.sum() / (TILE_RES * TILE_RES)
        assert counts[3, 4] >= 2 * uniform_share

    def test_running_mean_variance_decreases(self):
        errs = []
        for frames in (8, 32, 64):
            probes = self.run_frames(1.0, frames=frames, rays=16, noise=0.5)
            filled = probes.count[probes.valid] > 0
            tiles = probes.tile[probes.valid]
            err = ((tiles - 1.0) ** 2)[filled[..., None].repeat(3, -1)].mean()
            errs.append(err)
        assert errs[0] > errs[1] > errs[2]


def _noise01(d):
    h = rngmod.mix64_py(np.uint64(17), int(abs(d[0]) * 1e6))
    h = rngmod.mix64_py(h, int(abs(d[1]) * 1e6))
    h = rngmod.mix64_py(h, int(abs(d[2]) * 1e6))
    return float(rngmod.uniforms(h, 1)[0])


class TestHashGrid:
    def test_identical_inputs_same_index(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        cache.accumulate([1, 2, 3], [0, 0, 1], cam, [1, 1, 1], 0)
        a = cache.hash_key([1, 2, 3], [0, 0, 1], cam)
        b = cache.hash_key([1, 2, 3], [0, 0, 1], cam)
        assert a == b >= 0

    def test_same_voxel_same_cell(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        kv1 = cache.key_vector([1.01, 2.02, 3.03], [0, 0, 1], cam)
        kv2 = cache.key_vector([1.05, 2.01, 3.01], [0.05, 0.02, 1], cam)
        assert kv1 == kv2

    def test_opposite_directions_differ(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        kv1 = cache.key_vector([1, 2, 3], [0, 0, 1], cam)
        kv2 = cache.key_vector([1, 2, 3], [0, 0, -1], cam)
        assert kv1 != kv2

    def test_voxel_doubles_with_distance(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        near = cache.key_vector([0.3, 0, 2.0], [0, 0, 1], cam)
        far = cache.key_vector([0.3, 0, 40.0], [0, 0, 1], cam)
        assert near[3] == 0
        assert far[3] >= 3

    def test_accumulate_lookup_mean(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        assert cache.lookup([1, 1, 1], [0, 0, 1], cam) is None
        cache.accumulate([1, 1, 1], [0, 0, 1], cam, [1.0, 0, 0], 0)
        cache.accumulate([1, 1, 1], [0, 0, 1], cam, [3.0, 0, 0], 0)
        assert np.allclose(cache.lookup([1, 1, 1], [0, 0, 1], cam), [2.0, 0, 0])

    def test_maintain_rules(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        assert cache_maintain(cache, 0) == 0  # cold cache
        cache.accumulate([1, 1, 1], [0, 0, 1], cam, [1, 1, 1], frame=0)
        cache.accumulate([5, 5, 5], [0, 0, 1], cam, [1, 1, 1], frame=50)
        assert cache_maintain(cache, 50) == 0  # both within the window
        assert cache_maintain(cache, 61) == 1  # frame-0 cell idle 61 frames
        assert cache.lookup([1, 1, 1], [0, 0, 1], cam) is None
        assert cache.lookup([5, 5, 5], [0, 0, 1], cam) is not None

    def test_probe_chain_replacement(self):
        cam = make_camera()
        cache = HashGridCache(capacity=16)  # tiny: chains collide quickly
        gen = np.random.default_rng(0)
        for f in range(200):
            p = gen.uniform(-8, 8, 3)
            cache.accumulate(p, [0, 0, 1], cam, [1, 1, 1], frame=f)
        assert cache.occupied.sum() <= 16


def tri_hit(position, normal=(0, 1, 0)):
    return HitRecord(
        t=1.0, kind=KIND_TRIANGLE, index=0, response=1.0,
        position=np.asarray(position, dtype=np.float64),
        normal=np.asarray(normal, dtype=np.float64),
        albedo=np.full(3, 0.5), roughness=1.0, emission=np.zeros(3),
    )


class TestResolveRadiance:
    def test_film_reprojection_exact(self):
        cam = make_camera()
        film = np.zeros((128, 128, 3))
        film[:] = [0.1, 0.2, 0.3]
        depth = np.full((128, 128), 4.0)
        hit = tri_hit([0.0, 0.0, 4.0])
        out = resolve_radiance(
            hit, np.array([0, 0, 1.0]), film, cam, depth, None,
            lambda h, s: np.zeros(3), cam, seed=0,
        )
        assert np.allclose(out, [0.1, 0.2, 0.3])

    def test_offscreen_warm_cache(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        hit = tri_hit([0.0, 0.0, -5.0])  # behind the camera
        view = np.array([0, 0, 1.0])
        cache.accumulate(hit.position, -view, cam, [9.0, 9.0, 9.0], 0)
        out = resolve_radiance(hit, view, None, None, None, cache,
                               lambda h, s: np.ones(3), cam, seed=0)
        assert np.allclose(out, 9.0)

    def test_offscreen_cold_cache_seeds_cell(self):
        cam = make_camera()
        cache = HashGridCache(capacity=1 << 12)
        hit = tri_hit([0.0, 0.0, -5.0])
        view = np.array([0, 0, 1.0])
        out = resolve_radiance(hit, view, None, None, None, cache,
                               lambda h, s: np.full(3, 2.5), cam, seed=0)
        assert np.allclose(out, 2.5)
        slot = cache.hash_key(hit.position, -view, cam)
        assert slot >= 0
        assert cache.count[slot] == 1.0

    def test_depth_mismatch_falls_through(self):
        cam = make_camera()
        film = np.full((128, 128, 3), 7.0)
        depth = np.full((128, 128), 2.0)  # film surface much nearer
        hit = tri_hit([0.0, 0.0, 4.0])
        out = resolve_radiance(hit, np.array([0, 0, 1.0]), film, cam, depth,
                               None, lambda h, s: np.full(3, 1.5), cam, seed=0)
        assert np.allclose(out, 1.5)


class TestInterpolateIndirect:
    def constant_probes(self, gb, value):
        probes = place_probes(gb, spacing=16)
        probes.tile[:] = value
        probes.count[:] = 8.0
        refresh_probe_sh(probes)
        return probes

    def test_uniform_radiance_gives_albedo_times_L(self):
        cam, gb = wall_gbuffer()
        probes = self.constant_probes(gb, 2.0)
        out = interpolate_indirect(gb, probes)
        # albedo 0.5, L = 2 -> indirect ~ albedo * L = 1.0
        inner = out[24:104, 24:104]
        assert np.abs(inner - 1.0).max() < 0.03

    def test_all_invalid_fallback_finite(self):
        cam, gb = wall_gbuffer()
        probes = place_probes(gb, spacing=16)
        probes.valid[:] = False
        out = interpolate_indirect(gb, probes)
        assert np.isfinite(out).all()
        assert np.allclose(out, 0.0)

    def test_no_leak_across_depth_edge(self):
        # two parallel walls split down the middle at very different depths;
        # bright probes live only on the near wall
        cam = make_camera()
        gb = GBuffer.empty(128, 128)
        gb.opacity[:] = 1.0
        gb.albedo[:] = 1.0
        gb.normal[:] = [0, 0, -1]
        gb.depth[:, :64] = 2.0
        gb.depth[:, 64:] = 20.0
        dirs = cam.pixel_rays()
        gb.position = cam.position + dirs * (gb.depth[..., None] / dirs[..., 2:3])
        probes = place_probes(gb, spacing=16)
        near_side = probes.anchor[:, 0] < 64
        probes.tile[near_side & probes.valid] = 5.0
        probes.count[:] = 8.0
        refresh_probe_sh(probes)
        out = interpolate_indirect(gb, probes)
        near_mean = out[:, :56].mean()
        far_bleed = out[:, 72:].max()
        assert near_mean > 1.0
        assert far_bleed <= 0.05 * (out[:, :64].max() - 0.0)

    def test_energy_never_amplifies(self):
        cam, gb = wall_gbuffer()
        gen = np.random.default_rng(3)
        probes = place_probes(gb, spacing=16)
        probes.tile[:] = gen.uniform(0, 3.0, probes.tile.shape)
        probes.count[:] = 4.0
        refresh_probe_sh(probes)
        out = interpolate_indirect(gb, probes)
        max_incident = probes.tile.max()
        assert (out <= gb.albedo * max_incident + 1e-9).all()

    def test_probe_texel_lookup_direction(self):
        cam, gb = wall_gbuffer()
        probes = place_probes(gb, spacing=16)
        i = int(np.nonzero(probes.valid)[0][0])
        # bright spot toward the probe normal
        uv = hemi_oct_encode(np.array([[0.0, 0.0, 1.0]]))[0]
        ti = int(uv[0] * TILE_RES)
        tj = int(uv[1] * TILE_RES)
        probes.tile[i, tj, ti] = [10.0, 10, 10]
        val_n = probe_texel_lookup(probes, i, probes.normal[i])
        val_t = probe_texel_lookup(probes, i, probes.tangent[i])
        assert val_n[0] > val_t[0]
