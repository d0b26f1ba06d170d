"""Parametric articulated skeleton mapping {phi, theta, beta, gamma} to world joints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Rotation3

# Fixed basis seed/scale so shape spaces are reproducible across machines.
_BASIS_SEED = 727150711
_BASIS_SCALE = 0.1


def make_shape_basis(num_bones, num_coeffs, scale=_BASIS_SCALE, seed=_BASIS_SEED):
    """Random orthonormal-column basis mapping shape coeffs to per-bone log scales."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(num_bones, max(num_bones, num_coeffs)))
    q, _ = np.linalg.qr(m)
    return scale * q[:, :num_coeffs]


@dataclass
class SkeletonTemplate:
    """Kinematic tree with rest directions, mean bone lengths, and a shape basis.

    Bones are indexed by their child joint: bone j connects parents[j] -> j for
    j in 1..J-1. Shape coefficients act on log bone lengths, which keeps every
    length positive for any beta.
    """

    joint_names: list
    parents: np.ndarray       # (J,), parents[0] == -1
    rest_dirs: np.ndarray     # (J, 3), row 0 unused
    mean_lengths: np.ndarray  # (J,), row 0 unused
    shape_basis: np.ndarray   # (J-1, B), row j-1 belongs to the bone ending at j

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.rest_dirs = np.asarray(self.rest_dirs, dtype=float)
        self.mean_lengths = np.asarray(self.mean_lengths, dtype=float)
        self.shape_basis = np.asarray(self.shape_basis, dtype=float)
        J = len(self.parents)
        if len(self.joint_names) != J:
            raise ValueError("joint_names length mismatch")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise ValueError("exactly one root expected at index 0")
        if np.any(self.parents[1:] >= np.arange(1, J)):
            raise ValueError("parents must precede children (topological order)")
        norms = np.linalg.norm(self.rest_dirs[1:], axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("rest directions must be unit norm")
        if np.any(self.mean_lengths[1:] <= 0):
            raise ValueError("mean bone lengths must be positive")
        if self.shape_basis.shape[0] != J - 1:
            raise ValueError("shape basis must have J-1 rows")

    @property
    def num_joints(self):
        return len(self.parents)

    @property
    def num_coeffs(self):
        return self.shape_basis.shape[1]

    @property
    def bones(self):
        """(parent, child) pairs for every non-root joint."""
        return [(int(self.parents[j]), j) for j in range(1, self.num_joints)]

    def to_dict(self):
        return {
            "joint_names": list(self.joint_names),
            "parents": self.parents.tolist(),
            "rest_dirs": self.rest_dirs.tolist(),
            "mean_lengths": self.mean_lengths.tolist(),
            "shape_basis": self.shape_basis.tolist(),
        }

    @staticmethod
    def from_dict(d):
        return SkeletonTemplate(
            joint_names=list(d["joint_names"]),
            parents=np.array(d["parents"]),
            rest_dirs=np.array(d["rest_dirs"]),
            mean_lengths=np.array(d["mean_lengths"]),
            shape_basis=np.array(d["shape_basis"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @staticmethod
    def load(path):
        return SkeletonTemplate.from_dict(json.loads(Path(path).read_text()))


# 17-joint COCO-compatible tree rooted at the pelvis. The body frame has x
# facing forward, y to the subject's left, z up; all rest directions live in
# the y-z plane so the rest skeleton is planar (and fronto-parallel when the
# subject faces the camera). Lateral bones slope at least ~40 degrees from
# horizontal, which caps their worst-case foreshortening and keeps
# similar-triangle depth estimates stable from any viewing direction.
# Lengths in meters, roughly adult proportions.
_DEFAULT_JOINTS = [
    ("pelvis",         -1, (0.0, 0.0, 0.0), 0.0),
    ("left_hip",        0, (0.0, 0.707, -0.707), 0.12),
    ("right_hip",       0, (0.0, -0.707, -0.707), 0.12),
    ("left_knee",       1, (0.0, 0.0, -1.0), 0.40),
    ("right_knee",      2, (0.0, 0.0, -1.0), 0.40),
    ("left_ankle",      3, (0.0, 0.0, -1.0), 0.41),
    ("right_ankle",     4, (0.0, 0.0, -1.0), 0.41),
    ("neck",            0, (0.0, 0.0, 1.0), 0.52),
    ("nose",            7, (0.0, 0.0, 1.0), 0.10),
    ("left_shoulder",   7, (0.0, 0.766, -0.643), 0.18),
    ("right_shoulder",  7, (0.0, -0.766, -0.643), 0.18),
    ("left_elbow",      9, (0.0, 0.259, -0.966), 0.27),
    ("right_elbow",    10, (0.0, -0.259, -0.966), 0.27),
    ("left_wrist",     11, (0.0, 0.259, -0.966), 0.25),
    ("right_wrist",    12, (0.0, -0.259, -0.966), 0.25),
    ("left_ear",        8, (0.0, 0.707, 0.707), 0.10),
    ("right_ear",       8, (0.0, -0.707, 0.707), 0.10),
]


def default_template(num_coeffs=10):
    """The default 17-joint skeleton with a B=10 shape basis."""
    names = [row[0] for row in _DEFAULT_JOINTS]
    parents = np.array([row[1] for row in _DEFAULT_JOINTS])
    dirs = np.array([row[2] for row in _DEFAULT_JOINTS], dtype=float)
    norms = np.linalg.norm(dirs[1:], axis=1, keepdims=True)
    dirs[1:] /= norms
    lengths = np.array([row[3] for row in _DEFAULT_JOINTS], dtype=float)
    basis = make_shape_basis(len(names) - 1, num_coeffs)
    return SkeletonTemplate(names, parents, dirs, lengths, basis)


@dataclass
class HumanParams:
    """One person: world orientation phi, per-joint pose theta, shape beta, translation gamma."""

    phi: Rotation3
    theta: list            # J Rotation3 entries
    beta: np.ndarray       # (B,)
    gamma: np.ndarray      # (3,) meters
    human_id: int = 0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(3)
        if not np.isfinite(self.beta).all():
            raise ValueError("beta must be finite")
        if np.linalg.norm(self.beta) >= 10.0:
            raise ValueError("|beta| >= 10 exceeds the sanity bound")

    @staticmethod
    def rest(template, human_id=0):
        return HumanParams(
            phi=Rotation3.identity(),
            theta=[Rotation3.identity() for _ in range(template.num_joints)],
            beta=np.zeros(template.num_coeffs),
            gamma=np.zeros(3),
            human_id=human_id,
        )

    def copy(self):
        return HumanParams(self.phi, list(self.theta), self.beta.copy(),
                           self.gamma.copy(), self.human_id)


def bone_lengths(template, beta):
    """Per-joint bone length, beta acting on log scale. Entry 0 is zero."""
    out = np.zeros(template.num_joints)
    out[1:] = template.mean_lengths[1:] * np.exp(template.shape_basis @ beta)
    return out


@dataclass
class FkCache:
    joints: np.ndarray    # (J, 3) world positions
    chain: np.ndarray     # (J, 3, 3) composed joint rotations, chain[j] includes theta_j
    offsets: np.ndarray   # (J, 3) world-frame bone vectors, offsets[j] = x_j - x_parent
    lengths: np.ndarray   # (J,)


def fk_with_cache(params, template):
    """Forward kinematics keeping intermediates for the analytic backward pass."""
    J = template.num_joints
    lengths = bone_lengths(template, params.beta)
    chain = np.empty((J, 3, 3))
    joints = np.empty((J, 3))
    offsets = np.zeros((J, 3))
    chain[0] = params.theta[0].matrix
    joints[0] = params.gamma
    phi = params.phi.matrix
    for j in range(1, J):
        p = template.parents[j]
        chain[j] = chain[p] @ params.theta[j].matrix
        offsets[j] = phi @ (chain[j] @ (template.rest_dirs[j] * lengths[j]))
        joints[j] = joints[p] + offsets[j]
    return joints, FkCache(joints, chain, offsets, lengths)


def forward_kinematics(params, template):
    """World-frame joints: root at gamma, children chained through composed rotations."""
    joints, _ = fk_with_cache(params, template)
    return joints


def fk_backward(params, template, cache, g_joints):
    """Backpropagate dL/d(joints) to {gamma, phi, theta, beta}.

    Rotation gradients are in left tangent coordinates: for a stored rotation
    X the update direction d means X <- exp([d]x) X, applied at the rotation's
    slot in the chain.
    """
    J = template.num_joints
    parents = template.parents
    sum_g = np.array(g_joints, dtype=float)
    sum_xg = np.cross(cache.joints, g_joints)
    for j in range(J - 1, 0, -1):
        p = parents[j]
        sum_g[p] += sum_g[j]
        sum_xg[p] += sum_xg[j]

    phi = params.phi.matrix
    gamma = params.gamma
    root_moment = sum_xg[0] - np.cross(gamma, sum_g[0])

    grad_theta = np.empty((J, 3))
    grad_theta[0] = phi.T @ root_moment
    for j in range(1, J):
        p = parents[j]
        moment = sum_xg[j] - np.cross(cache.joints[p], sum_g[j])
        grad_theta[j] = (phi @ cache.chain[p]).T @ moment

    # dL/d(log length_j) is the bone offset dotted with the subtree gradient
    log_len = np.einsum("jk,jk->j", cache.offsets[1:], sum_g[1:])
    grad_beta = template.shape_basis.T @ log_len

    return {
        "gamma": sum_g[0],
        "phi": root_moment,
        "theta": grad_theta,
        "beta": grad_beta,
    }


def mean_bone_length_3d(joints, template):
    """Mean bone length of a posed skeleton in meters."""
    joints = np.asarray(joints, dtype=float)
    diffs = joints[1:] - joints[template.parents[1:]]
    return float(np.linalg.norm(diffs, axis=1).mean())
