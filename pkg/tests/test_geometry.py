import numpy as np
import pytest

from hsfm.errors import DegenerateConfiguration, NonPositiveDepth
from hsfm.geometry import (
    CameraModel,
    Intrinsics,
    Rotation3,
    orthonormalize,
    project,
    project_points,
    quat_from_matrix,
    relative_rotation_angle,
    so3_exp,
    so3_log,
    umeyama_align,
    unproject_grid,
    unproject_pointmap,
)


def random_camera(rng, width=640, height=480):
    k = Intrinsics.from_image_size(rng.uniform(300, 800), width, height)
    return CameraModel(k, Rotation3.random(rng), rng.normal(size=3), cam_id=0)


class TestRotation3:
    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.0, np.pi - 1e-3)
            w = axis * angle
            assert np.linalg.norm(so3_log(so3_exp(w)) - w) < 1e-9

    def test_exp_log_small_angles(self):
        for scale in (1e-12, 1e-9, 1e-6):
            w = np.array([1.0, -2.0, 0.5]) * scale
            assert np.linalg.norm(so3_log(so3_exp(w)) - w) < 1e-15 + 1e-9 * scale

    def test_orthonormal_invariants(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            R = Rotation3.random(rng).matrix
            assert np.abs(R @ R.T - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_drift_under_many_tangent_updates(self):
        # orthonormality must survive 1e5 random composed increments
        rng = np.random.default_rng(2)
        r = Rotation3.identity()
        deltas = rng.normal(scale=0.03, size=(100_000, 3))
        for d in deltas:
            r = r.retract(d)
        assert np.abs(r.matrix @ r.matrix.T - np.eye(3)).max() < 1e-7

    def test_quat_sign_convention(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            q = quat_from_matrix(Rotation3.random(rng).matrix)
            assert q[0] >= 0
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12

    def test_from_matrix_rejects_garbage(self):
        with pytest.raises(ValueError):
            Rotation3.from_matrix(np.ones((3, 3)))
        fixed = Rotation3.from_matrix(np.eye(3) + 1e-4 * np.ones((3, 3)), fix=True)
        assert np.abs(fixed.matrix @ fixed.matrix.T - np.eye(3)).max() < 1e-12


class TestProjection:
    def test_identity_camera(self):
        k = Intrinsics(1.0, 1.0, 0.0, 0.0, 2, 2)
        cam = CameraModel(k, Rotation3.identity(), np.zeros(3))
        pixel, depth = project(np.array([0.0, 0.0, 1.0]), cam, alpha=1.0)
        assert np.allclose(pixel, [0.0, 0.0])
        assert depth == 1.0

    def test_principal_point_ray(self):
        k = Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
        cam = CameraModel(k, Rotation3.identity(), np.zeros(3))
        pixel, depth = project(np.array([0.0, 0.0, 2.0]), cam, alpha=1.0)
        assert np.allclose(pixel, [320.0, 240.0])
        assert depth == 2.0

    def test_matches_homogeneous_oracle(self):
        # oracle: full 3x4 matrix multiply in homogeneous coordinates
        rng = np.random.default_rng(4)
        for _ in range(100):
            cam = random_camera(rng)
            alpha = rng.uniform(0.2, 5.0)
            x = cam.center(alpha) + cam.rotation.matrix.T @ np.array(
                [rng.normal(), rng.normal(), rng.uniform(0.5, 10.0)])
            P = cam.intrinsics.K @ np.hstack([
                cam.rotation.matrix, (alpha * cam.translation)[:, None]])
            h = P @ np.append(x, 1.0)
            pixel, depth = project(x, cam, alpha)
            assert np.abs(pixel - h[:2] / h[2]).max() < 1e-10
            assert abs(depth - h[2]) < 1e-10

    def test_behind_camera_raises(self):
        k = Intrinsics.from_image_size(100.0, 64, 64)
        cam = CameraModel(k, Rotation3.identity(), np.zeros(3))
        with pytest.raises(NonPositiveDepth):
            project(np.array([0.0, 0.0, -1.0]), cam, alpha=1.0)

    def test_project_points_masks_instead(self):
        k = Intrinsics.from_image_size(100.0, 64, 64)
        cam = CameraModel(k, Rotation3.identity(), np.zeros(3))
        pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        _, _, valid = project_points(pts, cam, alpha=1.0)
        assert valid.tolist() == [True, False]

    def test_scale_equivariance_exact(self):
        # project with (alpha, t) must equal project with (1, alpha * t) bit-exactly
        rng = np.random.default_rng(5)
        for _ in range(50):
            cam = random_camera(rng)
            alpha = rng.uniform(0.1, 10.0)
            scaled = CameraModel(cam.intrinsics, cam.rotation,
                                 alpha * cam.translation, cam.cam_id)
            x = cam.center(alpha) + cam.rotation.matrix.T @ np.array([0.1, -0.2, 3.0])
            pa, da = project(x, cam, alpha)
            pb, db = project(x, scaled, 1.0)
            assert np.array_equal(pa, pb)
            assert da == db


class TestUnproject:
    def test_identity(self):
        k = Intrinsics(1.0, 1.0, 0.0, 0.0, 2, 2)
        cam = CameraModel(k, Rotation3.identity(), np.zeros(3))
        x = unproject_pointmap((0.0, 0.0), 1.0, cam, alpha=1.0)
        assert np.allclose(x, [0.0, 0.0, 1.0])

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            cam = random_camera(rng)
            alpha = rng.uniform(0.2, 4.0)
            u, v = rng.uniform(0, 640), rng.uniform(0, 480)
            d = rng.uniform(0.3, 8.0)
            x = unproject_pointmap((u, v), d, cam, alpha)
            pixel, depth = project(x, cam, alpha)
            assert np.abs(pixel - [u, v]).max() < 1e-8
            assert abs(depth - d * alpha) < 1e-8

    def test_alpha_scales_distance_not_direction(self):
        rng = np.random.default_rng(7)
        cam = random_camera(rng)
        x1 = unproject_pointmap((100.0, 50.0), 2.0, cam, 1.0)
        x2 = unproject_pointmap((100.0, 50.0), 2.0, cam, 2.0)
        d1 = x1 - cam.center(1.0)
        d2 = x2 - cam.center(2.0)
        assert abs(np.linalg.norm(d2) - 2.0 * np.linalg.norm(d1)) < 1e-10
        assert np.abs(d2 / np.linalg.norm(d2) - d1 / np.linalg.norm(d1)).max() < 1e-12

    def test_nonpositive_depth_raises(self):
        rng = np.random.default_rng(8)
        cam = random_camera(rng)
        with pytest.raises(NonPositiveDepth):
            unproject_pointmap((0.0, 0.0), 0.0, cam, 1.0)

    def test_grid_matches_scalar(self):
        rng = np.random.default_rng(9)
        cam = random_camera(rng)
        us = rng.uniform(0, 640, size=20)
        vs = rng.uniform(0, 480, size=20)
        ds = rng.uniform(0.2, 5.0, size=20)
        got = unproject_grid(us, vs, ds, cam, 1.7)
        want = np.array([unproject_pointmap((u, v), d, cam, 1.7)
                         for u, v, d in zip(us, vs, ds)])
        assert np.abs(got - want).max() < 1e-12


class TestUmeyama:
    def test_identity_on_same_cloud(self):
        rng = np.random.default_rng(10)
        pts = rng.normal(size=(30, 3))
        T = umeyama_align(pts, pts)
        assert abs(T.scale - 1.0) < 1e-10
        assert np.abs(T.rotation.matrix - np.eye(3)).max() < 1e-10
        assert np.abs(T.translation).max() < 1e-10

    def test_generate_and_recover(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            pts = rng.normal(size=(12, 3))
            R = Rotation3.random(rng)
            s = rng.uniform(0.3, 3.0)
            t = rng.normal(size=3)
            tgt = s * pts @ R.matrix.T + t
            T = umeyama_align(pts, tgt, with_scale=True)
            assert abs(T.scale - s) < 1e-8
            assert np.abs(T.rotation.matrix - R.matrix).max() < 1e-8
            assert np.abs(T.translation - t).max() < 1e-8

    def test_rigid_recovery(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(8, 3))
        R = Rotation3.random(rng)
        t = rng.normal(size=3)
        T = umeyama_align(pts, pts @ R.matrix.T + t, with_scale=False)
        assert T.scale == 1.0
        assert np.abs(T.rotation.matrix - R.matrix).max() < 1e-8

    def test_two_points_degenerate(self):
        with pytest.raises(DegenerateConfiguration):
            umeyama_align(np.array([[0.0, 0, 0], [1, 0, 0]]),
                          np.array([[0.0, 0, 0], [0, 1, 0]]), with_scale=False)

    def test_collinear_degenerate(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        with pytest.raises(DegenerateConfiguration):
            umeyama_align(pts, pts + 1.0)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(10, 3))
        T = umeyama_align(pts, 2.0 * pts @ Rotation3.random(rng).matrix.T + 1.0)
        back = T.inverse().apply(T.apply(pts))
        assert np.abs(back - pts).max() < 1e-8

    def test_scale_never_hurts_residual(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            src = rng.normal(size=(15, 3))
            tgt = rng.normal(size=(15, 3))
            r_sim = umeyama_align(src, tgt, with_scale=True)
            r_rig = umeyama_align(src, tgt, with_scale=False)
            sse_sim = np.sum((r_sim.apply(src) - tgt) ** 2)
            sse_rig = np.sum((r_rig.apply(src) - tgt) ** 2)
            assert sse_sim <= sse_rig + 1e-10

    def test_reflection_branch_corrected(self):
        src = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 0]])
        tgt = src.copy()
        tgt[:, 0] *= -1  # mirror image
        T = umeyama_align(src, tgt)
        assert np.linalg.det(T.rotation.matrix) > 0


class TestRelativeRotationAngle:
    def test_same_rotation_zero(self):
        rng = np.random.default_rng(15)
        r = Rotation3.random(rng)
        assert relative_rotation_angle(r, r) < 1e-12

    def test_ninety_degrees(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            ra = Rotation3.random(rng)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rb = Rotation3(so3_exp(axis * np.pi / 2) @ ra.matrix)
            assert abs(relative_rotation_angle(ra, rb) - 90.0) < 1e-9

    def test_matches_quaternion_oracle(self):
        # oracle: angle = 2 acos(|q_a . q_b|)
        rng = np.random.default_rng(17)
        for _ in range(200):
            ra, rb = Rotation3.random(rng), Rotation3.random(rng)
            qa, qb = quat_from_matrix(ra.matrix), quat_from_matrix(rb.matrix)
            want = np.degrees(2.0 * np.arccos(min(1.0, abs(qa @ qb))))
            assert abs(relative_rotation_angle(ra, rb) - want) < 1e-7


def test_orthonormalize_projects_back():
    rng = np.random.default_rng(18)
    M = Rotation3.random(rng).matrix + rng.normal(scale=1e-4, size=(3, 3))
    R = orthonormalize(M)
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
    assert np.abs(R - M).max() < 1e-3
