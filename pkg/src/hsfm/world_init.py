"""World initialization: anchor selection, camera recovery, and metric scale.

The world frame is anchored to a reference camera c1 (identity extrinsics).
Camera rotations are recovered from the anchor person's per-view orientation
estimates, camera positions from the anchor's per-view placements, and the
scale alpha from a scalar least-squares fit between the human-centric camera
positions and the data-driven ones. The data-driven cameras themselves (with
scale alpha) remain the optimization starting point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .body import HumanParams, forward_kinematics
from .errors import (
    DegenerateScale,
    InsufficientKeypoints,
    MissingAnchorView,
    NoMultiViewHuman,
)
from .geometry import (
    CameraModel,
    Rotation3,
    orthonormalize,
    project_points,
    umeyama_align,
)
from .observations import WorldState, world_pointmap

logger = logging.getLogger(__name__)

BONE_CONF_GATE = 0.3
MIN_BONE_PX = 1.0


@dataclass
class InitOptions:
    reference_camera: int | None = None   # default: highest summed keypoint confidence
    alpha_mode: str = "human"             # "human" | "one" | "fixed:<value>"
    conf_gate: float = BONE_CONF_GATE
    min_bone_px: float = MIN_BONE_PX


@dataclass
class InitReport:
    anchor_id: int
    reference_camera: int
    recovered_rotations: dict       # camera_id -> 3x3 list
    recovered_positions: dict       # camera_id -> [x, y, z]
    gamma_tilde: dict               # camera_id -> anchor camera-frame translation
    alpha: float
    alpha_mode: str
    scale_residual: float
    rotation_fallbacks: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    degenerate: bool = False

    def to_dict(self):
        return {
            "anchor_id": self.anchor_id,
            "reference_camera": self.reference_camera,
            "recovered_rotations": {str(k): np.asarray(v).tolist()
                                    for k, v in self.recovered_rotations.items()},
            "recovered_positions": {str(k): np.asarray(v).tolist()
                                    for k, v in self.recovered_positions.items()},
            "gamma_tilde": {str(k): np.asarray(v).tolist()
                            for k, v in self.gamma_tilde.items()},
            "alpha": self.alpha,
            "alpha_mode": self.alpha_mode,
            "scale_residual": self.scale_residual,
            "rotation_fallbacks": list(self.rotation_fallbacks),
            "warnings": list(self.warnings),
            "degenerate": self.degenerate,
        }


def select_anchor(keypoints):
    """Pick the human with the best confidence-weighted view coverage.

    Only humans seen by at least two cameras qualify; ties break toward the
    lowest human id.
    """
    mass = {}
    views = {}
    for obs in keypoints:
        if obs.confidence.sum() <= 0:
            continue
        mass[obs.human_id] = mass.get(obs.human_id, 0.0) + float(obs.confidence.sum())
        views.setdefault(obs.human_id, set()).add(obs.camera_id)
    eligible = [h for h, cams in views.items() if len(cams) >= 2]
    if not eligible:
        raise NoMultiViewHuman("no human is observed by two or more cameras")
    return min(eligible, key=lambda h: (-mass[h], h))


def recover_rotations(phi_by_camera, reference_camera, reference_rotation=None):
    """Per-camera world rotations from the anchor's per-view orientations.

    Solves (R^c)^T = (R^c1)^T phi^{c1} (phi^c)^T for every camera with an
    orientation estimate; the reference camera returns its given rotation
    exactly. Outputs are re-orthonormalized.
    """
    if reference_camera not in phi_by_camera:
        raise MissingAnchorView(
            f"anchor orientation missing in reference camera {reference_camera}")
    ref_rot = reference_rotation or Rotation3.identity()
    phi_ref = phi_by_camera[reference_camera].matrix
    out = {}
    for c, phi in phi_by_camera.items():
        if c == reference_camera:
            out[c] = ref_rot
            continue
        rt = ref_rot.matrix.T @ phi_ref @ phi.matrix.T
        out[c] = Rotation3(orthonormalize(rt.T))
    return out


def place_human(obs, joints_cam, intrinsics, template,
                conf_gate=BONE_CONF_GATE, min_length_px=MIN_BONE_PX):
    """Similar-triangle placement: z = f * mean 3D bone / mean 2D bone.

    ``joints_cam`` are the single-view 3D joints in the camera frame (any
    translation; offsets are taken from the root). x and y come from
    back-projecting the confidence-weighted root-pixel estimate at depth z.
    Bones failing the confidence or 2D length gates are excluded from both
    means.
    """
    joints_cam = np.asarray(joints_cam, dtype=float)
    offsets = joints_cam - joints_cam[0]
    kp = obs.joints_2d
    conf = obs.confidence

    lengths_3d, lengths_2d = [], []
    for p, j in template.bones:
        if conf[p] > conf_gate and conf[j] > conf_gate:
            l2 = float(np.linalg.norm(kp[j] - kp[p]))
            if l2 > min_length_px:
                lengths_3d.append(float(np.linalg.norm(joints_cam[j] - joints_cam[p])))
                lengths_2d.append(l2)
    if not lengths_3d:
        raise InsufficientKeypoints(
            f"no bone passes conf>{conf_gate} and length>{min_length_px}px for "
            f"human {obs.human_id} in camera {obs.camera_id}")

    f = 0.5 * (intrinsics.fx + intrinsics.fy)
    z = f * (np.mean(lengths_3d) / np.mean(lengths_2d))

    w = np.where(conf > conf_gate, conf, 0.0)
    if w.sum() <= 0:
        raise InsufficientKeypoints("no joint above the confidence gate")
    w = w / w.sum()
    # weak-perspective root pixel: every gated joint votes for where the root
    # projects, assuming the whole body sits near depth z
    gx = float(w @ ((kp[:, 0] - intrinsics.cx) * z / intrinsics.fx - offsets[:, 0]))
    gy = float(w @ ((kp[:, 1] - intrinsics.cy) * z / intrinsics.fy - offsets[:, 1]))
    return np.array([gx, gy, float(z)])


def recover_translations(gamma_tilde, rotations, reference_camera):
    """Camera positions T^c = gamma^{c1} - (R^c)^T gamma^c in the world frame."""
    if reference_camera not in gamma_tilde:
        raise MissingAnchorView(
            f"anchor placement missing in reference camera {reference_camera}")
    g_ref = gamma_tilde[reference_camera]
    out = {}
    for c, g in gamma_tilde.items():
        if c not in rotations:
            raise MissingAnchorView(f"no recovered rotation for camera {c}")
        out[c] = g_ref - rotations[c].matrix.T @ g
    return out


def solve_scale(t_hat, t_tilde, reference_camera):
    """Least-squares alpha aligning data-driven positions to human-centric ones.

    alpha = sum <T_hat, T_tilde> / sum ||T_tilde||^2 over non-reference
    cameras; falls back to the ratio of mean distances when the fit is
    non-positive or ill-conditioned. Returns (alpha, rms residual).
    """
    cams = sorted(set(t_hat) & set(t_tilde) - {reference_camera})
    if not cams:
        raise DegenerateScale("no non-reference camera for the scale solve")
    hat = np.array([t_hat[c] for c in cams], dtype=float)
    til = np.array([t_tilde[c] for c in cams], dtype=float)
    denom = float(np.sum(til * til))
    if denom < 1e-12:
        raise DegenerateScale("all data-driven camera positions are zero")
    alpha = float(np.sum(hat * til)) / denom
    if alpha <= 0:
        norm_sum = float(np.linalg.norm(til, axis=1).sum())
        if norm_sum < 1e-12:
            raise DegenerateScale("all data-driven camera positions are zero")
        alpha = float(np.linalg.norm(hat, axis=1).sum()) / norm_sum
        logger.warning("scale fit non-positive; falling back to distance ratio "
                       "alpha=%.4g", alpha)
    residual = float(np.sqrt(np.mean(np.sum((hat - alpha * til) ** 2, axis=1))))
    return alpha, residual


def _reanchor_cameras(cameras, ref_idx):
    """Re-express extrinsics so the reference camera is exactly identity."""
    ref = cameras[ref_idx]
    R_ref = ref.rotation.matrix
    t_ref = ref.translation
    out = []
    for i, cam in enumerate(cameras):
        if i == ref_idx:
            out.append(CameraModel(cam.intrinsics, Rotation3.identity(),
                                   np.zeros(3), cam.cam_id))
            continue
        R_new = orthonormalize(cam.rotation.matrix @ R_ref.T)
        t_new = cam.translation - R_new @ t_ref
        out.append(CameraModel(cam.intrinsics, Rotation3(R_new), t_new, cam.cam_id))
    return out


def fit_pair_poses(state, q_floor=1e-3):
    """Warm-start each pair's (pose, sigma) by a weighted similarity fit.

    Maps the stored cross-view points onto the current world pointmap of the
    content camera. Degenerate pairs keep their existing pose.
    """
    maps = {}
    for pair in state.pairs:
        if pair.ci not in maps:
            maps[pair.ci] = world_pointmap(state, pair.ci)
        pts, valid = maps[pair.ci]
        mask = valid & (pair.confidence > q_floor) & \
            np.isfinite(pair.points).all(axis=2)
        if mask.sum() < 8:
            continue
        try:
            fit = umeyama_align(pair.points[mask], pts[mask], with_scale=True,
                                weights=pair.confidence[mask],
                                allow_degenerate=True)
        except Exception:  # keep whatever pose the pair already has
            logger.warning("pair (%d, %d): pose warm start failed", pair.ci, pair.cj)
            continue
        # loss model is sigma (R_P x + t_P); the fit gives s R x + t
        pair.pose_rotation = fit.rotation
        pair.pose_translation = fit.translation / fit.scale
        pair.sigma = fit.scale


def initialize_world(scene, options=None):
    """Build the initial WorldState and report (rotation/position/scale recovery).

    Steps: pick the reference camera and anchor person, recover per-camera
    rotations and positions from the anchor, solve alpha, place every human
    from its reference view, and warm-start the pair poses. The data-driven
    cameras (re-anchored, with scale alpha) are kept as the optimization
    starting point.
    """
    options = options or InitOptions()
    warnings = []
    template = scene.template
    cameras = scene.state.cameras
    cam_ids = [c.cam_id for c in cameras]

    conf_per_cam = {c: 0.0 for c in cam_ids}
    for obs in scene.keypoints:
        conf_per_cam[obs.camera_id] += float(obs.confidence.sum())
    if options.reference_camera is not None:
        ref_id = options.reference_camera
    else:
        ref_id = min(conf_per_cam, key=lambda c: (-conf_per_cam[c], c))

    try:
        anchor = select_anchor(scene.keypoints)
    except NoMultiViewHuman:
        if len(cameras) == 1:
            seen = [o.human_id for o in scene.keypoints if o.confidence.sum() > 0]
            if not seen:
                raise
            anchor = min(seen)
            warnings.append("single-camera scene: anchor chosen without "
                            "multi-view coverage")
        else:
            raise

    # the reference camera must hold an anchor estimate for Eq.-4 recovery
    if (ref_id, anchor) not in scene.humans_init:
        candidates = [c for c in cam_ids if (c, anchor) in scene.humans_init]
        if not candidates:
            raise MissingAnchorView(f"anchor {anchor} has no per-view estimate")
        ref_id = min(candidates, key=lambda c: (-conf_per_cam[c], c))
        warnings.append(f"reference camera moved to {ref_id}: anchor estimate "
                        "missing in the default choice")

    ref_idx = cam_ids.index(ref_id)
    cameras = _reanchor_cameras(cameras, ref_idx)

    # rotation recovery from the anchor's per-view orientations
    phi_by_cam = {c: scene.humans_init[(c, anchor)].phi_cam
                  for c in cam_ids if (c, anchor) in scene.humans_init}
    recovered = recover_rotations(phi_by_cam, ref_id)
    fallbacks = []
    for i, c in enumerate(cam_ids):
        if c not in recovered:
            recovered[c] = cameras[i].rotation
            fallbacks.append(c)
            logger.warning("camera %d: anchor view missing, keeping data-driven "
                           "rotation", c)

    # per-view anchor placement
    gamma_tilde = {}
    for i, c in enumerate(cam_ids):
        est = scene.humans_init.get((c, anchor))
        obs = scene.keypoint(c, anchor)
        if est is None or obs is None:
            continue
        view_params = est_to_params(est, template)
        joints_cam = forward_kinematics(view_params, template)
        try:
            gamma_tilde[c] = place_human(obs, joints_cam, cameras[i].intrinsics,
                                         template, options.conf_gate,
                                         options.min_bone_px)
        except InsufficientKeypoints:
            warnings.append(f"camera {c}: anchor placement failed the bone gates")

    t_hat = {}
    if ref_id in gamma_tilde:
        usable = {c: g for c, g in gamma_tilde.items() if c in recovered}
        t_hat = recover_translations(usable, recovered, ref_id)

    t_tilde = {c: cameras[i].center(1.0) for i, c in enumerate(cam_ids)}

    # scale
    residual = 0.0
    if options.alpha_mode == "one":
        alpha = 1.0
    elif options.alpha_mode.startswith("fixed:"):
        alpha = float(options.alpha_mode.split(":", 1)[1])
        if alpha <= 0:
            raise ValueError("fixed alpha must be positive")
    else:
        try:
            alpha, residual = solve_scale(t_hat, t_tilde, ref_id)
        except DegenerateScale:
            if len(cameras) == 1:
                alpha = 1.0
                warnings.append("single-camera scene: no pairs to scale, "
                                "alpha falls back to 1")
            else:
                raise

    # place every human from its reference view (anchor rules apply per human)
    humans = []
    human_ids = sorted({h.human_id for h in scene.state.humans} |
                       {hid for (_, hid) in scene.humans_init})
    for hid in human_ids:
        view = ref_id if (ref_id, hid) in scene.humans_init else None
        if view is None:
            cands = [c for c in cam_ids if (c, hid) in scene.humans_init
                     and scene.keypoint(c, hid) is not None]
            if not cands:
                warnings.append(f"human {hid}: no usable view, left at rest")
                humans.append(HumanParams.rest(template, human_id=hid))
                continue
            view = min(cands, key=lambda c: (-conf_per_cam[c], c))
        est = scene.humans_init[(view, hid)]
        i = cam_ids.index(view)
        cam = cameras[i]
        obs = scene.keypoint(view, hid)
        view_params = est_to_params(est, template)
        joints_cam = forward_kinematics(view_params, template)
        if obs is not None:
            try:
                g_cam = place_human(obs, joints_cam, cam.intrinsics, template,
                                    options.conf_gate, options.min_bone_px)
            except InsufficientKeypoints:
                g_cam = est.gamma_cam
                warnings.append(f"human {hid}: bone gates failed, using the "
                                "per-view translation estimate")
        else:
            g_cam = est.gamma_cam
        R = cam.rotation.matrix
        gamma_w = R.T @ (g_cam - alpha * cam.translation)
        phi_w = Rotation3(orthonormalize(R.T @ est.phi_cam.matrix))
        humans.append(HumanParams(phi=phi_w, theta=list(est.theta),
                                  beta=est.beta.copy(), gamma=gamma_w,
                                  human_id=hid))

    state = WorldState(alpha=alpha, cameras=cameras, humans=humans,
                       depths=scene.state.depths, pairs=scene.state.pairs)
    fit_pair_poses(state)

    # degenerate-configuration guard: humans must sit in front of the cameras
    degenerate = False
    for obs in scene.keypoints:
        if obs.confidence.sum() <= 0:
            continue
        try:
            hidx = state.human_index(obs.human_id)
        except KeyError:
            continue
        cidx = state.camera_index(obs.camera_id)
        joints = forward_kinematics(state.humans[hidx], template)
        _, _, valid = project_points(joints, state.cameras[cidx], alpha)
        if not valid.all():
            degenerate = True
    if degenerate:
        warnings.append("humans behind camera after initialization: the "
                        "configuration is degenerate (check scale init)")
        logger.warning("degenerate initialization: humans behind at least one camera")

    report = InitReport(
        anchor_id=anchor,
        reference_camera=ref_id,
        recovered_rotations={c: r.matrix.tolist() for c, r in recovered.items()},
        recovered_positions={c: v.tolist() for c, v in t_hat.items()},
        gamma_tilde={c: v.tolist() for c, v in gamma_tilde.items()},
        alpha=alpha,
        alpha_mode=options.alpha_mode,
        scale_residual=residual,
        rotation_fallbacks=fallbacks,
        warnings=warnings,
        degenerate=degenerate,
    )
    return state, report


def est_to_params(est, template):
    """Camera-frame HumanParams from a per-view estimate (translation zero)."""
    return HumanParams(phi=est.phi_cam, theta=list(est.theta),
                       beta=est.beta.copy(), gamma=np.zeros(3),
                       human_id=est.human_id)
