import numpy as np
import pytest
from scipy import stats

from splatlight.camera import CameraModel
from splatlight.geometry import make_quad
from splatlight.gsmath import GaussianPrimitive
from splatlight.lights import (
    AreaLight,
    DirectionalLight,
    EnvironmentLight,
    FilterHistory,
    LightGrid,
    LightGridParams,
    ares_fill,
    build_light_grid,
    filter_direct,
    grid_weight,
    luminance,
    sample_light_pixel,
    shade_direct,
    spatial_filter,
)
from splatlight.raster import GBuffer
from splatlight.tracing import build_accel

from oracles import sequential_weighted_inclusion


def make_camera(w=32, h=32, pos=(0, 0, 0)):
    return CameraModel.look_at(pos, (0, 0, 1), [0, 1, 0], w, h, 60.0)


def flat_gbuffer(h=16, w=16, z=4.0, normal=(0, 0, -1), albedo=0.5):
    cam = make_camera(w, h)
    gb = GBuffer.empty(h, w)
    gb.opacity.fill(1.0)
    gb.depth.fill(z)
    gb.normal[:] = normal
    gb.albedo[:] = albedo
    dirs = cam.pixel_rays()
    gb.position = cam.position + dirs * (z / dirs[..., 2:3])
    return cam, gb


class TestLightTypes:
    def test_directional_normalizes(self):
        l = DirectionalLight([0, 0, 2], [1, 1, 1])
        assert np.allclose(l.direction, [0, 0, 1])

    def test_parallel_area_edges_rejected(self):
        with pytest.raises(ValueError):
            AreaLight([0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1, 1])

    def test_negative_radiance_rejected(self):
        with pytest.raises(ValueError):
            DirectionalLight([0, 0, 1], [-1, 0, 0])

    def test_environment_requires_one_source(self):
        with pytest.raises(ValueError):
            EnvironmentLight()
        with pytest.raises(ValueError):
            EnvironmentLight(color=[1, 1, 1], image=np.ones((4, 8, 3)))

    def test_environment_map_lookup(self):
        img = np.zeros((8, 16, 3))
        img[0] = [5.0, 0, 0]  # top rows = +y
        env = EnvironmentLight(image=img)
        assert env.radiance([0, 1, 0])[0] == 5.0
        assert env.radiance([0, -1, 0])[0] == 0.0


class TestBuildLightGrid:
    def test_single_light_fills_every_reservoir(self):
        cam = make_camera()
        light = DirectionalLight([0, 0, 1], [2, 2, 2])
        grid = build_light_grid([light], cam)
        assert (grid.reservoir[:, :, 0] == 0).all()

    def test_two_to_one_selection_frequency(self):
        # weights 2:1, reservoir of one: first slot follows w/sum(w)
        weights = np.tile([2.0, 1.0], (100_000, 1))
        seeds = np.arange(100_000, dtype=np.uint64) * np.uint64(2654435761) + np.uint64(7)
        sel = ares_fill(weights, seeds, 1)[:, 0]
        counts = np.array([(sel == 0).sum(), (sel == 1).sum()])
        chi = stats.chisquare(counts, f_exp=np.array([2 / 3, 1 / 3]) * len(sel))
        assert chi.pvalue > 1e-3

    def test_far_weak_light_excluded(self):
        cam = make_camera()
        strong = DirectionalLight([0, 0, 1], [1, 1, 1])
        # tiny emitter very far away: weight under the cutoff everywhere
        weak = AreaLight([1e6, 1e6, 1e6], [1e-3, 0, 0], [0, 1e-3, 0], [1e-4] * 3)
        grid = build_light_grid([strong, weak], cam)
        assert not (grid.reservoir == 1).any()

    def test_inclusion_matches_sequential_law(self):
        weights_row = np.array([5.0, 3.0, 1.0, 0.5, 0.5])
        k = 2
        n = 100_000
        weights = np.tile(weights_row, (n, 1))
        seeds = np.arange(n, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(3)
        sel = ares_fill(weights, seeds, k)
        counts = np.array([(sel == i).sum() for i in range(5)])
        expected = sequential_weighted_inclusion(weights_row, k) * n
        chi = stats.chisquare(counts, f_exp=expected * (counts.sum() / expected.sum()))
        assert chi.pvalue > 1e-3

    def test_grid_weight_heuristic(self):
        d = DirectionalLight([0, 0, 1], [1, 2, 3])
        assert grid_weight(d, np.zeros(3), 0.1) == pytest.approx(luminance([1, 2, 3]))
        a = AreaLight([0, 0, 5], [1, 0, 0], [0, 1, 0], [1, 1, 1])
        w = grid_weight(a, np.zeros(3), 0.1)
        d2 = np.sum((a.center - 0.0) ** 2)
        assert w == pytest.approx(luminance([1, 1, 1]) * a.area / d2)

    def test_total_weight_stored(self):
        cam = make_camera()
        lights = [DirectionalLight([0, 0, 1], [1, 1, 1]),
                  DirectionalLight([0, 1, 0], [2, 2, 2])]
        grid = build_light_grid(lights, cam)
        expected = luminance([1, 1, 1]) + luminance([2, 2, 2])
        assert np.allclose(grid.total_weight, expected)

    def test_zero_lights_empty_reservoirs(self):
        cam = make_camera()
        grid = build_light_grid([], cam)
        assert (grid.reservoir == -1).all()
        assert grid.reservoir_at([0, 0, 1]) == []


class TestSampleLightPixel:
    def setup_grid(self, lights):
        cam = make_camera()
        return build_light_grid(lights, cam)

    def test_single_directional(self):
        grid = self.setup_grid([DirectionalLight([0, 0, -1], [3, 3, 3])])
        s = sample_light_pixel([0, 0, 2], [0, 0, 1], np.full(3, 0.5), grid,
                               np.random.default_rng(0))
        assert s.light_index == 0
        assert s.pdf == pytest.approx(1.0)
        assert np.allclose(s.direction, [0, 0, 1])
        assert np.isinf(s.distance)

    def test_two_equal_candidates_half_half(self):
        lights = [
            AreaLight([-2.5, 2, -0.5], [1, 0, 0], [0, 0, 1], [4, 4, 4]),
            AreaLight([1.5, 2, -0.5], [1, 0, 0], [0, 0, 1], [4, 4, 4]),
        ]
        grid = self.setup_grid(lights)
        gen = np.random.default_rng(5)
        picks = np.array([
            sample_light_pixel([0, 0, 0], [0, 1, 0], np.full(3, 0.5), grid, gen).light_index
            for _ in range(100_000)
        ])
        frac = (picks == 0).mean()
        assert frac == pytest.approx(0.5, abs=0.01)

    def test_facing_away_null(self):
        grid = self.setup_grid([DirectionalLight([0, 0, -1], [3, 3, 3])])
        s = sample_light_pixel([0, 0, 2], [0, 0, -1], np.full(3, 0.5), grid,
                               np.random.default_rng(0))
        assert s.light_index == -1
        assert np.allclose(s.radiance, 0.0)


class TestShadeDirect:
    def test_unoccluded_closed_form(self):
        grid = build_light_grid([DirectionalLight([0, 0, -1], [2, 2, 2])], make_camera())
        accel = build_accel([])
        albedo = np.full(3, 0.6)
        s = sample_light_pixel([0, 0, 2], [0, 0, 1], albedo, grid,
                               np.random.default_rng(0))
        out = shade_direct([0, 0, 2], [0, 0, 1], albedo, s, accel,
                           np.random.default_rng(1))
        assert np.allclose(out, 0.6 / np.pi * 2.0)

    def test_opaque_wall_blocks(self):
        grid = build_light_grid([DirectionalLight([0, -1, 0], [2, 2, 2])], make_camera())
        wall = make_quad([-5, 1, -5], [10, 0, 0], [0, 0, 10], albedo=[1, 1, 1])
        accel = build_accel([], wall)
        albedo = np.full(3, 0.6)
        for seed in range(20):
            s = sample_light_pixel([0, 0, 0], [0, 1, 0], albedo, grid,
                                   np.random.default_rng(seed))
            out = shade_direct([0, 0, 0], [0, 1, 0], albedo, s, accel,
                               np.random.default_rng(seed))
            assert np.allclose(out, 0.0)

    def test_half_blocking_gaussian(self):
        grid = build_light_grid([DirectionalLight([0, -1, 0], [2, 2, 2])], make_camera())
        blocker = GaussianPrimitive([0, 1, 0], [0.4, 0.4, 0.4], [1, 0, 0, 0], 0.5)
        accel = build_accel([blocker])
        albedo = np.full(3, 0.6)
        gen = np.random.default_rng(3)
        vals = np.array([
            shade_direct(
                [0, 0, 0], [0, 1, 0], albedo,
                sample_light_pixel([0, 0, 0], [0, 1, 0], albedo, grid, gen),
                accel, gen,
            )[0]
            for _ in range(20_000)
        ])
        unoccluded = 0.6 / np.pi * 2.0
        assert vals.mean() == pytest.approx(0.5 * unoccluded, rel=0.02)

    def test_environment_cosine_estimator(self):
        grid = build_light_grid([], make_camera())
        accel = build_accel([])
        env = EnvironmentLight(color=[1.0, 1.0, 1.0])
        albedo = np.full(3, 0.5)
        out = shade_direct([0, 0, 0], [0, 1, 0], albedo, sample_light_pixel(
            [0, 0, 0], [0, 1, 0], albedo, grid, np.random.default_rng(0)),
            accel, np.random.default_rng(0), env=env)
        assert np.allclose(out, 0.5)  # albedo * env, exact for constant env

    def test_pixel_level_unbiasedness_area_light(self):
        # one area light, analytic integral via fine quadrature
        light = AreaLight([-0.5, 3, -0.5], [1, 0, 0], [0, 0, 1], [5, 5, 5])
        grid = build_light_grid([light], make_camera())
        accel = build_accel([])
        p = np.zeros(3)
        n = np.array([0.0, 1.0, 0.0])
        albedo = np.full(3, 0.7)
        # quadrature over the quad
        uu, vv = np.meshgrid(np.linspace(0, 1, 400), np.linspace(0, 1, 400))
        q = light.corner + uu[..., None] * light.edge_u + vv[..., None] * light.edge_v
        to_q = q - p
        d2 = np.sum(to_q**2, axis=-1)
        d = np.sqrt(d2)
        wi = to_q / d[..., None]
        cos_p = np.clip(wi[..., 1], 0, None)
        cos_q = np.clip(-wi @ light.normal, 0, None)
        integrand = cos_p * cos_q / d2
        analytic = (0.7 / np.pi) * 5.0 * integrand.mean() * light.area
        gen = np.random.default_rng(11)
        vals = np.array([
            shade_direct(p, n, albedo, sample_light_pixel(p, n, albedo, grid, gen),
                         accel, gen)[0]
            for _ in range(10_000)
        ])
        assert vals.mean() == pytest.approx(analytic, rel=0.02)

    def test_cascade_boundary_consistency(self):
        # the same estimator evaluated from cells of different cascades
        light = AreaLight([-0.5, 3, 2.0], [1, 0, 0], [0, 0, 1], [5, 5, 5])
        cam = make_camera()
        grid = build_light_grid([light], cam)
        accel = build_accel([])
        albedo = np.full(3, 0.7)
        n = np.array([0.0, 1.0, 0.0])
        p_fine = np.array([0.0, 0.0, 2.0])  # cascade 0
        p_coarse = np.array([0.0, 0.0, 6.5])  # outside cascade 0 (extent 4)
        assert grid.cell_of(p_fine)[0] == 0
        assert grid.cell_of(p_coarse)[0] > 0
        gen = np.random.default_rng(2)
        for p in (p_fine, p_coarse):
            vals = np.array([
                shade_direct(p, n, albedo,
                             sample_light_pixel(p, n, albedo, grid, gen),
                             accel, gen)[0]
                for _ in range(4000
                               )])
            # both cells hold the single light: estimators agree with the
            # direct quadrature at that point within 3 sigma
            uu, vv = np.meshgrid(np.linspace(0, 1, 200), np.linspace(0, 1, 200))
            q = light.corner + uu[..., None] * light.edge_u + vv[..., None] * light.edge_v
            to_q = q - p
            d2 = np.sum(to_q**2, axis=-1)
            wi = to_q / np.sqrt(d2)[..., None]
            cos_p = np.clip(wi[..., 1], 0, None)
            cos_q = np.clip(-wi @ light.normal, 0, None)
            analytic = (0.7 / np.pi) * 5.0 * (cos_p * cos_q / d2).mean() * light.area
            se = vals.std() / np.sqrt(len(vals))
            assert abs(vals.mean() - analytic) <= 3 * se + 1e-4


class TestFilterDirect:
    def test_first_frame_returns_spatial_only(self):
        cam, gb = flat_gbuffer()
        gen = np.random.default_rng(0)
        cur = gen.uniform(0, 1, (16, 16, 3))
        out, hist = filter_direct(cur, None, gb, cam)
        assert np.allclose(out, spatial_filter(cur, gb))
        assert hist.valid.all()

    def test_noise_variance_suppressed(self):
        cam, gb = flat_gbuffer()
        gen = np.random.default_rng(1)
        hist = None
        signal = 0.5
        for _ in range(30):
            cur = signal + gen.normal(0, 0.2, (16, 16, 3))
            out, hist = filter_direct(cur, hist, gb, cam)
        # interior pixels: steady-state variance far below the input variance
        resid = out[4:-4, 4:-4] - signal
        assert resid.var() < 0.05 * 0.2**2

    def test_teleport_rejects_history(self):
        cam, gb = flat_gbuffer()
        hist = None
        out, hist = filter_direct(np.full((16, 16, 3), 5.0), hist, gb, cam)
        # teleport the camera: reprojection lands far away / depth mismatch
        cam2 = CameraModel.look_at([50, 0, 0], [50, 0, 1], [0, 1, 0], 16, 16, 60.0)
        gb2 = GBuffer.empty(16, 16)
        gb2.opacity.fill(1.0)
        gb2.depth.fill(4.0)
        gb2.normal[:] = [0, 0, -1]
        dirs = cam2.pixel_rays()
        gb2.position = cam2.position + dirs * (4.0 / dirs[..., 2:3])
        out2, _ = filter_direct(np.full((16, 16, 3), 1.0), hist, gb2, cam2)
        assert np.allclose(out2, 1.0)  # no ghost of the old value 5.0
