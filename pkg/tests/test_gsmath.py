import numpy as np
import pytest

from splatlight import rng
from splatlight.camera import CameraModel
from splatlight.gsmath import (
    GaussianPrimitive,
    Ray,
    covariance,
    inverse_covariance,
    max_response_depth,
    particle_response,
    project_covariance,
)

from oracles import (
    dense_argmax_depth,
    golden_section_max,
    line_max_response,
    quat_matrix,
)


def normalize(v):
    return np.asarray(v, dtype=np.float64) / np.linalg.norm(v)


def random_gaussian(gen, center_span=2.0):
    q = normalize(gen.normal(size=4))
    return GaussianPrimitive(
        center=gen.uniform(-center_span, center_span, 3),
        scale=gen.uniform(0.1, 1.5, 3),
        rotation=q,
        opacity=gen.uniform(0.05, 1.0),
    )


def random_ray(gen, span=4.0):
    return Ray(gen.uniform(-span, span, 3), normalize(gen.normal(size=3)))


class TestCovariance:
    def test_isotropic_identity(self):
        g = GaussianPrimitive([0, 0, 0], [1, 1, 1], [1, 0, 0, 0], 1.0)
        assert np.allclose(covariance(g), np.eye(3), atol=1e-12)

    def test_axis_aligned(self):
        g = GaussianPrimitive([0, 0, 0], [2, 1, 1], [1, 0, 0, 0], 1.0)
        assert np.allclose(covariance(g), np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_z_rotation_90deg(self):
        # Oracle: direct matrix multiplication with the explicit rotation.
        s = np.sqrt(0.5)
        q = np.array([s, 0.0, 0.0, s])  # 90 degrees about z
        g = GaussianPrimitive([0, 0, 0], [2, 1, 1], q, 1.0)
        r = quat_matrix(q)
        expected = r @ np.diag([4.0, 1.0, 1.0]) @ r.T
        assert np.allclose(covariance(g), expected, atol=1e-9)
        assert np.allclose(covariance(g), np.diag([1.0, 4.0, 1.0]), atol=1e-9)

    def test_round_trip_eigenvalues(self):
        gen = np.random.default_rng(7)
        for _ in range(50):
            g = random_gaussian(gen)
            ev = np.sort(np.linalg.eigvalsh(covariance(g)))
            assert np.allclose(ev, np.sort(g.scale**2), atol=1e-9)

    def test_symmetry(self):
        gen = np.random.default_rng(8)
        for _ in range(20):
            c = covariance(random_gaussian(gen))
            assert np.allclose(c, c.T, atol=1e-9)


class TestParticleResponse:
    def test_center_ray_gives_opacity(self):
        g = GaussianPrimitive([0, 0, 3], [0.5, 1.0, 2.0], normalize([1, 2, 3, 4]), 0.7)
        r = Ray([0, 0, 0], [0, 0, 1])
        assert particle_response(g, r) == pytest.approx(0.7, abs=1e-12)

    def test_unit_gaussian_offset_one(self):
        # Golden-section oracle froze exp(-0.5) for a perpendicular miss of 1.
        g = GaussianPrimitive([0, 1, 0], [1, 1, 1], [1, 0, 0, 0], 1.0)
        r = Ray([-5, 0, 0], [1, 0, 0])
        oracle = line_max_response(g, r.origin, r.direction)
        assert oracle == pytest.approx(np.exp(-0.5), rel=1e-9)
        assert particle_response(g, r) == pytest.approx(np.exp(-0.5), rel=1e-9)

    def test_far_field_decay(self):
        g = GaussianPrimitive([0, 10, 0], [1, 1, 1], [1, 0, 0, 0], 1.0)
        r = Ray([-5, 0, 0], [1, 0, 0])
        assert particle_response(g, r) < 1e-8

    def test_schur_identity_bulk(self):
        # Response equals opacity times the line maximum of the density.
        gen = np.random.default_rng(11)
        for _ in range(200):
            g = random_gaussian(gen)
            r = random_ray(gen)
            resp = particle_response(g, r)
            oracle = line_max_response(g, r.origin, r.direction, bracket=1e3)
            assert resp == pytest.approx(oracle, rel=1e-6, abs=1e-12)

    def test_origin_reparameterization_invariance(self):
        gen = np.random.default_rng(12)
        for _ in range(50):
            g = random_gaussian(gen)
            r = random_ray(gen)
            base = particle_response(g, r)
            for shift in (-3.7, 1.3, 42.0):
                r2 = Ray(r.origin + shift * r.direction, r.direction)
                assert abs(particle_response(g, r2) - base) <= 1e-9

    def test_orthographic_projection_form_agrees(self):
        # The definitional 2D-marginal form must match the line-max evaluation.
        gen = np.random.default_rng(13)
        for _ in range(100):
            g = random_gaussian(gen)
            r = random_ray(gen)
            v = r.direction
            basis = np.linalg.svd(np.outer(v, v))[0][:, 1:]  # plane orthogonal to v
            cov2 = basis.T @ covariance(g) @ basis
            d = basis.T @ (g.center - r.origin)
            expected = g.opacity * np.exp(-0.5 * d @ np.linalg.inv(cov2) @ d)
            assert particle_response(g, r) == pytest.approx(expected, rel=1e-9)


class TestMaxResponseDepth:
    def test_origin_at_center(self):
        g = GaussianPrimitive([1, 2, 3], [0.5, 1, 2], normalize([1, 1, 0, 0]), 1.0)
        r = Ray([1, 2, 3], [0, 0, 1])
        assert max_response_depth(g, r) == pytest.approx(0.0, abs=1e-12)

    def test_axial_case(self):
        g = GaussianPrimitive([0, 0, 5], [1, 1, 1], [1, 0, 0, 0], 1.0)
        r = Ray([0, 0, 0], [0, 0, 1])
        assert max_response_depth(g, r) == pytest.approx(5.0, abs=1e-12)

    def test_dense_sampling_oracle(self):
        gen = np.random.default_rng(21)
        for _ in range(20):
            g = random_gaussian(gen)
            r = random_ray(gen)
            t_star = max_response_depth(g, r)
            t_dense, spacing = dense_argmax_depth(
                g, r.origin, r.direction, t_star - 2.0, t_star + 2.0, n=1000
            )
            assert abs(t_star - t_dense) <= spacing


class TestProjectCovariance:
    def make_camera(self):
        return CameraModel.look_at(
            [0, 0, 0], [0, 0, 1], [0, 1, 0], width=128, height=128, fov_deg=60.0
        )

    def test_on_axis_isotropic_is_circular(self):
        cam = self.make_camera()
        g = GaussianPrimitive([0, 0, 4], [0.2, 0.2, 0.2], [1, 0, 0, 0], 1.0)
        mean, cov2d = project_covariance(g, cam)
        assert np.allclose(mean, [64.0, 64.0], atol=1e-9)
        ev = np.linalg.eigvalsh(cov2d)
        assert abs(ev[0] - ev[1]) < 1e-6

    def test_distance_halves_projected_sigma(self):
        cam = self.make_camera()
        near = project_covariance(
            GaussianPrimitive([0, 0, 2], [0.1, 0.1, 0.1], [1, 0, 0, 0], 1.0), cam
        )
        far = project_covariance(
            GaussianPrimitive([0, 0, 4], [0.1, 0.1, 0.1], [1, 0, 0, 0], 1.0), cam
        )
        s_near = np.sqrt(np.linalg.eigvalsh(near[1]).max())
        s_far = np.sqrt(np.linalg.eigvalsh(far[1]).max())
        assert s_far == pytest.approx(s_near / 2.0, rel=0.01)

    def test_finite_difference_oracle(self):
        # Project clouds of sample points and compare their pixel covariance
        # against the linearized EWA result for a small on-axis Gaussian.
        cam = self.make_camera()
        g = GaussianPrimitive([0.3, -0.2, 5.0], [0.04, 0.03, 0.05],
                              normalize([2, 1, 0.5, -0.3]), 1.0)
        gen = np.random.default_rng(3)
        r = quat_matrix(g.rotation)
        pts = g.center + (gen.normal(size=(200000, 3)) * g.scale) @ r.T
        px, _ = cam.project(pts)
        emp = np.cov(px.T)
        _, cov2d = project_covariance(g, cam)
        assert np.allclose(emp, cov2d, rtol=0.05, atol=0.02)

    def test_behind_camera_culled(self):
        cam = self.make_camera()
        g = GaussianPrimitive([0, 0, -1], [0.2, 0.2, 0.2], [1, 0, 0, 0], 1.0)
        assert project_covariance(g, cam) is None


class TestInvariantsValidation:
    def test_bad_scale_rejected(self):
        with pytest.raises(ValueError):
            GaussianPrimitive([0, 0, 0], [0.0, 1, 1], [1, 0, 0, 0], 1.0)

    def test_bad_quaternion_rejected(self):
        with pytest.raises(ValueError):
            GaussianPrimitive([0, 0, 0], [1, 1, 1], [1, 1, 0, 0], 1.0)

    def test_bad_opacity_rejected(self):
        with pytest.raises(ValueError):
            GaussianPrimitive([0, 0, 0], [1, 1, 1], [1, 0, 0, 0], 0.0)

    def test_non_unit_ray_rejected(self):
        with pytest.raises(ValueError):
            Ray([0, 0, 0], [1, 1, 0])

    def test_default_normal_is_smallest_axis(self):
        g = GaussianPrimitive([0, 0, 0], [1.0, 0.05, 1.0], [1, 0, 0, 0], 1.0)
        assert np.allclose(np.abs(g.normal), [0, 1, 0], atol=1e-12)

    def test_inverse_covariance_floor(self):
        g = GaussianPrimitive([0, 0, 0], [1e-6, 1, 1], [1, 0, 0, 0], 1.0)
        inv = inverse_covariance(g)
        assert np.isfinite(inv).all()
        assert np.linalg.cond(inv) < 1e12


def test_stream_seed_matches_vectorized():
    idx = np.arange(100, dtype=np.uint64)
    vec = rng.stream_seeds(42, 3, idx, rng.STREAM_SHADOW)
    for i in range(100):
        assert vec[i] == rng.stream_seed(42, 3, i, rng.STREAM_SHADOW)


def test_uniforms_match_kernel_stream():
    seed = rng.stream_seed(1, 0, 0, rng.STREAM_SHADE)
    xs = rng.uniforms(seed, 8)
    state = np.uint64(seed)
    for k in range(8):
        state = rng.next_u64(state)
        assert xs[k] == rng.u64_to_unit(state)
    assert np.all((xs >= 0) & (xs < 1))
