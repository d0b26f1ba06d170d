import numpy as np
import pytest

from hsfm.body import (
    HumanParams,
    SkeletonTemplate,
    bone_lengths,
    default_template,
    fk_backward,
    fk_with_cache,
    forward_kinematics,
    mean_bone_length_3d,
)
from hsfm.geometry import Rotation3, so3_exp


@pytest.fixture(scope="module")
def template():
    return default_template()


def random_params(rng, template, pose_scale=0.6, human_id=0):
    theta = [Rotation3.random(rng, max_angle=pose_scale)
             for _ in range(template.num_joints)]
    return HumanParams(
        phi=Rotation3.random(rng),
        theta=theta,
        beta=rng.normal(scale=0.5, size=template.num_coeffs),
        gamma=rng.normal(scale=2.0, size=3),
        human_id=human_id,
    )


def fk_oracle(params, template):
    """Naive per-chain recursion multiplying rotations joint by joint."""
    J = template.num_joints
    lengths = bone_lengths(template, params.beta)
    joints = np.zeros((J, 3))
    joints[0] = params.gamma
    for j in range(1, J):
        # walk up to the root collecting the chain, then compose top-down
        path = [j]
        while template.parents[path[-1]] != -1:
            path.append(int(template.parents[path[-1]]))
        path.reverse()
        R = np.eye(3)
        for k in path:
            R = R @ params.theta[k].matrix
        p = template.parents[j]
        joints[j] = joints[p] + params.phi.matrix @ (
            R @ (template.rest_dirs[j] * lengths[j]))
    return joints


class TestTemplate:
    def test_default_is_valid(self, template):
        assert template.num_joints == 17
        assert template.num_coeffs == 10
        assert len(template.bones) == 16

    def test_json_round_trip(self, template, tmp_path):
        path = tmp_path / "template.json"
        template.save(path)
        loaded = SkeletonTemplate.load(path)
        assert loaded.joint_names == template.joint_names
        assert np.array_equal(loaded.parents, template.parents)
        assert np.array_equal(loaded.rest_dirs, template.rest_dirs)
        assert np.array_equal(loaded.shape_basis, template.shape_basis)

    def test_rejects_cycles(self):
        with pytest.raises(ValueError):
            SkeletonTemplate(["a", "b"], np.array([-1, 1]),
                             np.array([[0.0, 0, 0], [0, 0, 1.0]]),
                             np.array([0.0, 0.3]), np.zeros((1, 2)))

    def test_rejects_non_unit_dirs(self):
        with pytest.raises(ValueError):
            SkeletonTemplate(["a", "b"], np.array([-1, 0]),
                             np.array([[0.0, 0, 0], [0, 0, 2.0]]),
                             np.array([0.0, 0.3]), np.zeros((1, 2)))


class TestForwardKinematics:
    def test_rest_pose_matches_cumulative_offsets(self, template):
        params = HumanParams.rest(template)
        joints = forward_kinematics(params, template)
        want = np.zeros((17, 3))
        for p, j in template.bones:
            want[j] = want[p] + template.rest_dirs[j] * template.mean_lengths[j]
        assert np.abs(joints - want).max() < 1e-12

    def test_translation_equivariance(self, template):
        rng = np.random.default_rng(0)
        params = random_params(rng, template)
        base = forward_kinematics(params, template)
        shifted = params.copy()
        shifted.gamma = params.gamma + np.array([1.0, 2.0, 3.0])
        moved = forward_kinematics(shifted, template)
        assert np.abs(moved - base - np.array([1.0, 2.0, 3.0])).max() < 1e-12

    def test_matches_recursive_oracle(self, template):
        rng = np.random.default_rng(1)
        for _ in range(25):
            params = random_params(rng, template)
            got = forward_kinematics(params, template)
            assert np.abs(got - fk_oracle(params, template)).max() < 1e-9

    def test_global_rotation_invariance(self, template):
        # rotating phi by R0 rotates all offsets (joint - gamma) by R0 exactly
        rng = np.random.default_rng(2)
        params = random_params(rng, template)
        R0 = Rotation3.random(rng)
        rotated = params.copy()
        rotated.phi = R0 @ params.phi
        a = forward_kinematics(params, template)
        b = forward_kinematics(rotated, template)
        assert np.abs((b - params.gamma) - (a - params.gamma) @ R0.matrix.T).max() < 1e-9

    def test_zero_beta_gives_mean_lengths(self, template):
        lengths = bone_lengths(template, np.zeros(template.num_coeffs))
        assert np.array_equal(lengths[1:], template.mean_lengths[1:])

    def test_beta_scales_on_log_lengths(self, template):
        rng = np.random.default_rng(3)
        beta = rng.normal(scale=0.5, size=template.num_coeffs)
        lengths = bone_lengths(template, beta)
        assert np.all(lengths[1:] > 0)
        want = template.mean_lengths[1:] * np.exp(template.shape_basis @ beta)
        assert np.abs(lengths[1:] - want).max() < 1e-12


class TestMeanBoneLength:
    def test_rest_pose_constant_lengths(self):
        names = ["root", "a", "b"]
        parents = np.array([-1, 0, 1])
        dirs = np.array([[0.0, 0, 0], [0, 0, 1.0], [0, 1.0, 0]])
        lengths = np.array([0.0, 0.3, 0.3])
        t = SkeletonTemplate(names, parents, dirs, lengths, np.zeros((2, 2)))
        joints = forward_kinematics(HumanParams.rest(t), t)
        assert abs(mean_bone_length_3d(joints, t) - 0.3) < 1e-12

    def test_uniform_scaling_doubles(self, template):
        joints = forward_kinematics(HumanParams.rest(template), template)
        m1 = mean_bone_length_3d(joints, template)
        m2 = mean_bone_length_3d(2.0 * joints, template)
        assert abs(m2 - 2.0 * m1) < 1e-12

    def test_matches_hand_summed_oracle(self, template):
        rng = np.random.default_rng(4)
        params = random_params(rng, template)
        joints = forward_kinematics(params, template)
        total = 0.0
        for p, j in template.bones:
            total += np.linalg.norm(joints[j] - joints[p])
        want = total / len(template.bones)
        assert abs(mean_bone_length_3d(joints, template) - want) < 1e-12


class TestFkGradients:
    def test_backward_matches_finite_differences(self, template):
        # dL/dparam for L = <g, joints> against central differences, h = 1e-5
        rng = np.random.default_rng(5)
        h = 1e-5
        for trial in range(20):
            params = random_params(rng, template)
            g = rng.normal(size=(template.num_joints, 3))
            joints, cache = fk_with_cache(params, template)
            grads = fk_backward(params, template, cache, g)

            def loss(p):
                return float(np.sum(forward_kinematics(p, template) * g))

            # gamma
            for i in range(3):
                p1, p2 = params.copy(), params.copy()
                p1.gamma = params.gamma.copy(); p1.gamma[i] += h
                p2.gamma = params.gamma.copy(); p2.gamma[i] -= h
                fd = (loss(p1) - loss(p2)) / (2 * h)
                assert abs(grads["gamma"][i] - fd) < 1e-4 * max(1.0, abs(fd))

            # beta (sampled coords)
            for i in rng.choice(template.num_coeffs, size=3, replace=False):
                p1, p2 = params.copy(), params.copy()
                p1.beta = params.beta.copy(); p1.beta[i] += h
                p2.beta = params.beta.copy(); p2.beta[i] -= h
                fd = (loss(p1) - loss(p2)) / (2 * h)
                assert abs(grads["beta"][i] - fd) < 1e-4 * max(1.0, abs(fd))

            # phi tangent
            for i in range(3):
                d = np.zeros(3); d[i] = h
                p1, p2 = params.copy(), params.copy()
                p1.phi = Rotation3(so3_exp(d) @ params.phi.matrix)
                p2.phi = Rotation3(so3_exp(-d) @ params.phi.matrix)
                fd = (loss(p1) - loss(p2)) / (2 * h)
                assert abs(grads["phi"][i] - fd) < 1e-4 * max(1.0, abs(fd))

            # theta tangent for a few joints
            for j in rng.choice(template.num_joints, size=4, replace=False):
                for i in range(3):
                    d = np.zeros(3); d[i] = h
                    p1, p2 = params.copy(), params.copy()
                    t1 = list(params.theta); t2 = list(params.theta)
                    t1[j] = Rotation3(so3_exp(d) @ params.theta[j].matrix)
                    t2[j] = Rotation3(so3_exp(-d) @ params.theta[j].matrix)
                    p1.theta, p2.theta = t1, t2
                    fd = (loss(p1) - loss(p2)) / (2 * h)
                    assert abs(grads["theta"][j, i] - fd) < 1e-4 * max(1.0, abs(fd))


def test_beta_sanity_bound_enforced(template):
    with pytest.raises(ValueError):
        HumanParams(Rotation3.identity(),
                    [Rotation3.identity()] * template.num_joints,
                    np.full(template.num_coeffs, 11.0), np.zeros(3))
