"""Rotations, similarity transforms, and pinhole camera math."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NonPositiveDepth

# Points with camera-frame depth at or below this are treated as behind the camera.
EPS_DEPTH = 1e-6


def skew(v):
    """3x3 cross-product matrix [v]x."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    """Axis-angle vector to rotation matrix (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-16:
        # 2nd-order series; exact to double precision for such small angles
        return np.eye(3) + K + 0.5 * (K @ K)
    theta = np.sqrt(theta2)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta2) * (K @ K)
    )


def quat_from_matrix(R):
    """Unit quaternion (w, x, y, z) with w >= 0 from a rotation matrix.

    Shepperd's method: the largest of the four squared components is computed
    first, which keeps the extraction stable for any input angle.
    """
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > R[0, 0] and t > R[1, 1] and t > R[2, 2]:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([
            0.5 * r,
            (R[2, 1] - R[1, 2]) * s,
            (R[0, 2] - R[2, 0]) * s,
            (R[1, 0] - R[0, 1]) * s,
        ])
    else:
        i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (R[j, i] + R[i, j]) * s
        q[1 + k] = (R[k, i] + R[i, k]) * s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def so3_log(R):
    """Rotation matrix to axis-angle vector with angle in [0, pi]."""
    q = quat_from_matrix(R)
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return (angle / s) * q[1:]


def orthonormalize(M):
    """Nearest rotation matrix in the Frobenius sense, det forced to +1."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


@dataclass(frozen=True)
class Rotation3:
    """Rotation stored as an orthonormal 3x3 matrix.

    Optimization updates are axis-angle tangent increments composed onto the
    stored matrix via :meth:`retract`; the matrix is re-orthonormalized on
    every composition so drift never accumulates.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=float)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity():
        return Rotation3(np.eye(3))

    @staticmethod
    def from_matrix(M, fix=False):
        M = np.asarray(M, dtype=float)
        if fix:
            M = orthonormalize(M)
        if np.abs(M @ M.T - np.eye(3)).max() > 1e-6 or np.linalg.det(M) < 0.0:
            raise ValueError("not a rotation matrix (pass fix=True to project)")
        return Rotation3(M)

    @staticmethod
    def from_axis_angle(w):
        return Rotation3(so3_exp(w))

    @staticmethod
    def random(rng, max_angle=np.pi):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        return Rotation3(so3_exp(axis * rng.uniform(0.0, max_angle)))

    def retract(self, delta):
        """Left tangent increment: exp([delta]x) @ R, re-orthonormalized."""
        return Rotation3(orthonormalize(so3_exp(delta) @ self.matrix))

    def log(self):
        return so3_log(self.matrix)

    def inverse(self):
        return Rotation3(self.matrix.T.copy())

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.matrix.T

    def __matmul__(self, other):
        return Rotation3(self.matrix @ other.matrix)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @staticmethod
    def from_image_size(focal, width, height):
        """Principal point at the image center (W/2, H/2)."""
        return Intrinsics(float(focal), float(focal), width / 2.0, height / 2.0,
                          int(width), int(height))

    @property
    def K(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled_focal(self, log_scale):
        """Intrinsics with fx, fy jointly multiplied by exp(log_scale)."""
        s = float(np.exp(log_scale))
        return Intrinsics(self.fx * s, self.fy * s, self.cx, self.cy,
                          self.width, self.height)


@dataclass
class CameraModel:
    """World-to-camera extrinsics plus intrinsics.

    ``translation`` is stored in pre-scale units; all projective math applies
    the world scale alpha to it, so the camera center in the metric world
    frame is -R^T (alpha * t).
    """

    intrinsics: Intrinsics
    rotation: Rotation3
    translation: np.ndarray
    cam_id: int = 0

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.isfinite(t).all():
            raise ValueError("camera translation must be finite")
        self.translation = t

    def center(self, alpha):
        return -self.rotation.matrix.T @ (alpha * self.translation)


def project(point_world, cam, alpha):
    """Project a world point: x_2D = K (R x + alpha t); returns (pixel, depth).

    Raises NonPositiveDepth when the point is behind the camera. Loss code
    must use :func:`project_points` and mask instead of calling this.
    """
    p = np.asarray(point_world, dtype=float)
    x_cam = cam.rotation.matrix @ p + alpha * cam.translation
    depth = float(x_cam[2])
    if depth <= EPS_DEPTH:
        raise NonPositiveDepth(f"depth {depth:.3e} <= {EPS_DEPTH:.0e}")
    k = cam.intrinsics
    pixel = np.array([
        k.fx * x_cam[0] / depth + k.cx,
        k.fy * x_cam[1] / depth + k.cy,
    ])
    return pixel, depth


def project_points(points, cam, alpha):
    """Vectorized projection; behind-camera points are masked, not raised.

    Returns (pixels (N,2), depths (N,), valid (N,) bool).
    """
    pts = np.asarray(points, dtype=float)
    x_cam = pts @ cam.rotation.matrix.T + alpha * cam.translation
    z = x_cam[:, 2]
    valid = z > EPS_DEPTH
    zs = np.where(valid, z, 1.0)
    k = cam.intrinsics
    pixels = np.stack([
        k.fx * x_cam[:, 0] / zs + k.cx,
        k.fy * x_cam[:, 1] / zs + k.cy,
    ], axis=1)
    return pixels, z, valid


def unproject_pointmap(pixel, depth, cam, alpha):
    """Lift pixel (i, j) at depth D to the world: alpha (R^T [K^-1 D (i,j,1)^T] - R^T t)."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} must be positive")
    k = cam.intrinsics
    u, v = float(pixel[0]), float(pixel[1])
    ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    R = cam.rotation.matrix
    return alpha * (R.T @ (depth * ray) - R.T @ cam.translation)


def unproject_grid(us, vs, depths, cam, alpha):
    """Vectorized :func:`unproject_pointmap` over flat pixel/depth arrays."""
    k = cam.intrinsics
    rays = np.stack([
        (np.asarray(us, dtype=float) - k.cx) / k.fx,
        (np.asarray(vs, dtype=float) - k.cy) / k.fy,
        np.ones(len(us)),
    ], axis=1)
    R = cam.rotation.matrix
    y = rays * np.asarray(depths, dtype=float)[:, None]
    return alpha * ((y - cam.translation) @ R)


@dataclass
class SimilarityTransform:
    """x -> scale * R x + t. SE(3) is the scale = 1 case."""

    scale: float
    rotation: Rotation3
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    def apply(self, points):
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.matrix.T) \
            + self.translation

    def inverse(self):
        Rt = self.rotation.inverse()
        return SimilarityTransform(1.0 / self.scale, Rt,
                                   -(Rt.matrix @ self.translation) / self.scale)


def umeyama_align(source, target, with_scale=True, weights=None,
                  allow_degenerate=False):
    """Least-squares similarity (or rigid) transform mapping source onto target.

    Minimizes sum_i w_i || s R src_i + t - tgt_i ||^2. The reflection branch is
    corrected by flipping the smallest singular vector so det(R) = +1.

    Raises DegenerateConfiguration when the centered covariance has rank < 2
    (collinear or coincident points) unless ``allow_degenerate`` is set, in
    which case a best-effort transform is returned.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("source and target must have equal cardinality")
    if len(src) == 0:
        raise DegenerateConfiguration("empty point sets")
    if weights is None:
        w = np.full(len(src), 1.0 / len(src))
    else:
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if total <= 0:
            raise DegenerateConfiguration("weights sum to zero")
        w = w / total

    mu_s = w @ src
    mu_t = w @ tgt
    X = src - mu_s
    Y = tgt - mu_t
    cov = (Y * w[:, None]).T @ X
    U, D, Vt = np.linalg.svd(cov)

    if D[0] <= 0 or D[1] <= 1e-9 * D[0]:
        if not allow_degenerate:
            raise DegenerateConfiguration(
                "centered covariance rank < 2; need >= 3 non-collinear pairs")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt

    if with_scale:
        var_s = float(np.sum(w * np.sum(X * X, axis=1)))
        if var_s <= 0:
            if not allow_degenerate:
                raise DegenerateConfiguration("source points coincide")
            scale = 1.0
        else:
            scale = float(D @ S) / var_s
            if scale <= 0:
                if not allow_degenerate:
                    raise DegenerateConfiguration("non-positive fitted scale")
                scale = 1.0
    else:
        scale = 1.0
    t = mu_t - scale * (R @ mu_s)
    return SimilarityTransform(scale, Rotation3(R), t)


def alignment_is_degenerate(source, target):
    """True when the rigid/similarity fit between the sets is not unique."""
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(src) < 3:
        return True
    cov = (tgt - tgt.mean(axis=0)).T @ (src - src.mean(axis=0)) / len(src)
    D = np.linalg.svd(cov, compute_uv=False)
    return bool(D[0] <= 0 or D[1] <= 1e-9 * D[0])


def relative_rotation_angle(ra, rb):
    """Angle of Ra Rb^T in degrees, in [0, 180].

    atan2 of the (antisymmetric-part, trace) pair stays accurate near both
    0 and 180 degrees where acos of the trace alone loses precision.
    """
    A = ra.matrix if isinstance(ra, Rotation3) else np.asarray(ra, dtype=float)
    B = rb.matrix if isinstance(rb, Rotation3) else np.asarray(rb, dtype=float)
    D = A @ B.T
    c = 0.5 * (np.trace(D) - 1.0)
    s = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))
