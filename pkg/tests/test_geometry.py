import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from omgsplat.errors import InvalidInputError, NumericDegeneracyError
from omgsplat.geometry import (LOWPASS, Camera, GaussianPrimitive, Material, SplatFragment, build_covariance,
                               gaussian_weight, project_all, project_gaussian, projection_backward,
                               quaternions_to_rotations, rotation_backward, rotation_from_quaternion)

H = math.sqrt(0.5)
quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3)
scales = st.lists(st.floats(0.01, 3.0), min_size=3, max_size=3)


def axis_camera(width=64, height=48, f=50.0, near=0.01):
    return Camera(np.zeros(3), np.eye(3), f, f, width / 2, height / 2, width, height, near, 100.0)


def gaussian(mean, q=(1, 0, 0, 0), s=(1, 1, 1)):
    return GaussianPrimitive(mean, q, s, 0.0, Material((0.5, 0.5, 0.5), 0.5, 0.0), (0, 0, 1))


class TestRotation:
    def test_identity(self):
        np.testing.assert_array_equal(rotation_from_quaternion([1, 0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = rotation_from_quaternion([H, 0, 0, H])
        np.testing.assert_allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)

    def test_unnormalized_input_is_orthonormal(self):
        R = rotation_from_quaternion([0.7, 0.1, -0.3, 0.2])
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(InvalidInputError):
            rotation_from_quaternion([0, 0, 0, 0])

    @given(quats)
    def test_batched_matches_scalar(self, q):
        np.testing.assert_allclose(quaternions_to_rotations(np.array([q]))[0], rotation_from_quaternion(q),
                                   atol=1e-15)

    def test_rotation_backward_matches_finite_differences(self, rng):
        q = rng.normal(size=(5, 4))
        G = rng.normal(size=(5, 3, 3))
        analytic = rotation_backward(q, G)
        eps = 1e-6
        for i in range(5):
            for k in range(4):
                qp, qm = q.copy(), q.copy()
                qp[i, k] += eps
                qm[i, k] -= eps
                num = np.sum(G * (quaternions_to_rotations(qp) - quaternions_to_rotations(qm))) / (2 * eps)
                assert analytic[i, k] == pytest.approx(num, rel=1e-7, abs=1e-9)


class TestCovariance:
    def test_identity(self):
        np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [1, 1, 1]), np.eye(3))

    def test_axis_scale(self):
        np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1, 1]))

    def test_rotated_scale(self):
        np.testing.assert_allclose(build_covariance([H, 0, 0, H], [2, 1, 1]), np.diag([1.0, 4, 1]), atol=1e-15)

    @pytest.mark.parametrize("s", [(0, 1, 1), (1, -1, 1)])
    def test_nonpositive_scale_rejected(self, s):
        with pytest.raises(InvalidInputError):
            build_covariance([1, 0, 0, 0], s)

    @given(quats, scales)
    def test_symmetric_with_expected_spectrum(self, q, s):
        cov = build_covariance(q, s)
        np.testing.assert_array_equal(cov, cov.T)
        eig = np.linalg.eigvalsh(cov)
        s2 = np.sort(np.square(s))
        assert eig.min() >= s2[0] - 1e-9
        np.testing.assert_allclose(eig, s2, rtol=1e-9, atol=1e-12)


class TestPrimitives:
    def test_gaussian_normalizes(self):
        g = GaussianPrimitive((0, 0, 0), (2, 0, 0, 0), (1, 1, 1), 0.3, Material((1, 1, 1), 1, 1), (0, 0, 5))
        assert abs(np.linalg.norm(g.rotation) - 1) < 1e-9
        assert abs(np.linalg.norm(g.normal) - 1) < 1e-9

    @pytest.mark.parametrize("bad", [dict(s=(1, 0, 1)), dict(q=(0, 0, 0, 0))])
    def test_gaussian_rejects_degenerate(self, bad):
        with pytest.raises(InvalidInputError):
            gaussian((0, 0, 5), bad.get("q", (1, 0, 0, 0)), bad.get("s", (1, 1, 1)))

    def test_material_clamps(self):
        m = Material((1.5, -0.2, 0.5), 2.0, -1.0)
        np.testing.assert_array_equal(m.albedo, [1.0, 0.0, 0.5])
        assert (m.roughness, m.metallic) == (1.0, 0.0)
        np.testing.assert_array_equal(Material.from_vector(m.as_vector()).as_vector(), m.as_vector())

    def test_camera_validation(self):
        with pytest.raises(InvalidInputError):
            Camera(np.zeros(3), np.diag([1.0, 1, -1]), 10, 10, 5, 5, 10, 10)
        with pytest.raises(InvalidInputError):
            Camera(np.zeros(3), np.eye(3), 10, 10, 5, 5, 10, 10, near=1.0, far=0.5)

    def test_look_at_is_a_rotation(self):
        cam = Camera.look_at((3, 1, 2), (0, 0, 0), width=16, height=16)
        R = cam.orientation
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
        # the target lands on the principal point
        t = cam.world_to_camera @ (np.zeros(3) - cam.position)
        assert t[2] > 0
        assert cam.fx * t[0] / t[2] + cam.cx == pytest.approx(cam.cx)

    def test_camera_dict_round_trip(self):
        cam = Camera.look_at((3, 1, 2), (0, 0.1, 0), width=17, height=9, fov_deg=50)
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(back.orientation, cam.orientation)
        assert (back.fx, back.width, back.height, back.far) == (cam.fx, 17, 9, cam.far)


class TestProjection:
    def test_on_axis_isotropic(self):
        cam = axis_camera()
        d = 10.0
        frag = project_gaussian(cam, gaussian((0, 0, d)))
        np.testing.assert_allclose(frag.mean2d, [cam.cx, cam.cy])
        cov2d = np.linalg.inv(frag.conic)
        np.testing.assert_allclose(cov2d, (cam.fx / d) ** 2 * np.eye(2) + LOWPASS * np.eye(2), rtol=1e-12)
        assert frag.depth == d

    @pytest.mark.parametrize("z", [0.005, 0.01, -3.0])
    def test_behind_near_plane_is_culled(self, z):
        assert project_gaussian(axis_camera(), gaussian((0, 0, z), s=(0.001,) * 3)) is None

    def test_off_screen_is_culled(self):
        assert project_gaussian(axis_camera(), gaussian((100, 0, 5), s=(0.1,) * 3)) is None

    def test_beyond_far_plane_is_culled(self):
        assert project_gaussian(axis_camera(), gaussian((0, 0, 150))) is None

    def test_off_axis_covariance_matches_numerical_jacobian(self):
        cam = Camera.look_at((0.3, -2.5, 1.0), (0, 0, 0), width=64, height=64)
        g = gaussian((0.4, 0.2, -0.3), (0.9, 0.2, -0.1, 0.3), (0.3, 0.1, 0.2))

        def pi(x):
            t = cam.world_to_camera @ (x - cam.position)
            return np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])

        eps = 1e-6
        Jn = np.stack([(pi(g.mean + eps * e) - pi(g.mean - eps * e)) / (2 * eps) for e in np.eye(3)], axis=1)
        expected = Jn @ build_covariance(g.rotation, g.scale) @ Jn.T + LOWPASS * np.eye(2)
        frag = project_gaussian(cam, g)
        np.testing.assert_allclose(np.linalg.inv(frag.conic), expected, rtol=1e-6)
        np.testing.assert_allclose(frag.mean2d, pi(g.mean), rtol=1e-12)

    @pytest.mark.parametrize("phi", [0.3, 1.1, -2.0])
    def test_roll_equivariance(self, phi):
        base = Camera.look_at((0.2, -3.0, 0.7), (0, 0, 0), width=64, height=64)
        c, s = math.cos(phi), math.sin(phi)
        Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        rolled = Camera(base.position, base.orientation @ Rz, base.fx, base.fy, base.cx, base.cy, 64, 64)
        g = gaussian((0.3, 0.1, 0.2), (0.8, 0.3, 0.1, -0.2), (0.2, 0.1, 0.05))
        a, b = project_gaussian(base, g), project_gaussian(rolled, g)
        R2 = Rz[:2, :2]
        pp = np.array([base.cx, base.cy])
        np.testing.assert_allclose(b.mean2d - pp, R2.T @ (a.mean2d - pp), atol=1e-9)
        np.testing.assert_allclose(np.linalg.inv(b.conic), R2.T @ np.linalg.inv(a.conic) @ R2, atol=1e-9)

    def test_batched_matches_scalar(self, small_scene):
        scene, cams = small_scene
        proj = project_all(cams[0], scene.means, scene.rotations, scene.scales)
        for i, g in enumerate(scene.gaussians):
            frag = project_gaussian(cams[0], g)
            assert (frag is not None) == proj.visible[i]
            if frag is not None:
                np.testing.assert_allclose(frag.mean2d, proj.mean2d[i], rtol=1e-13)
                np.testing.assert_allclose(frag.conic, proj.conic[i], rtol=1e-10)

    def test_degenerate_projection_raises(self):
        cam = axis_camera()
        g = gaussian((0, 0, 5))
        g.scale = np.array([1e200, 1e200, 1e200])
        with pytest.raises(NumericDegeneracyError), np.errstate(all="ignore"):
            project_gaussian(cam, g)

    def test_projection_backward_matches_finite_differences(self, rng):
        cam = Camera.look_at((0.5, -3.0, 1.0), (0, 0, 0), width=48, height=48)
        means = rng.normal(0, 0.4, (4, 3))
        quats = rng.normal(size=(4, 4))
        sc = rng.uniform(0.05, 0.3, (4, 3))
        wm, wc = rng.normal(size=(4, 2)), rng.normal(size=(4, 2, 2))

        def f(m, q, s):
            p = project_all(cam, m, q, s)
            return np.sum(wm * p.mean2d) + np.sum(wc * p.conic)

        proj = project_all(cam, means, quats, sc)
        assert proj.visible.all()
        dm, ds, dq = projection_backward(cam, proj, sc, quats, wm, wc)
        eps = 1e-6
        for arr, grad in ((means, dm), (sc, ds), (quats, dq)):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                fp = f(means, quats, sc)
                arr[idx] = old - eps
                fm = f(means, quats, sc)
                arr[idx] = old
                assert grad[idx] == pytest.approx((fp - fm) / (2 * eps), rel=1e-5, abs=1e-6)


class TestWeight:
    def frag(self, cov, mean=(0.0, 0.0)):
        return SplatFragment(0, np.array(mean), np.linalg.inv(np.array(cov, float)), 1.0)

    def test_peak_is_one(self):
        f = self.frag([[2, 0.3], [0.3, 1]], (3.5, 2.5))
        assert gaussian_weight(f, (3.5, 2.5)) == 1.0

    def test_unit_covariance(self):
        assert gaussian_weight(self.frag(np.eye(2)), (1.0, 1.0)) == pytest.approx(math.exp(-1), rel=1e-15)

    def test_anisotropic(self):
        assert gaussian_weight(self.frag(np.diag([4.0, 1.0])), (2.0, 0.0)) == pytest.approx(0.606531, abs=1e-6)

    @given(st.floats(0, 2 * math.pi), st.floats(0.01, 5.0), st.floats(0.01, 5.0))
    def test_decreases_along_rays(self, angle, r1, dr):
        f = self.frag([[2.0, 0.5], [0.5, 1.0]])
        u = np.array([math.cos(angle), math.sin(angle)])
        near, far = gaussian_weight(f, r1 * u), gaussian_weight(f, (r1 + dr) * u)
        assert far <= near < 1.0
        if near > 1e-300:
            assert far < near
