"""Synthetic multi-view capture oracle.

Generates a metric ground-truth world (ring of inward-looking cameras, posed
humans, ground plane plus box obstacles), derives every observation the
pipeline consumes (keypoints, per-view depth grids, cross-view pointmaps,
per-view human estimates, data-driven cameras), applies the configured noise
model, and writes the scene directory plus a ``gt/`` subdirectory. Everything
is deterministic per seed; sweeps share per-human substreams so scenes that
differ only in human count stay paired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .body import HumanParams, bone_lengths, default_template, forward_kinematics
from .errors import ConfigError
from .geometry import CameraModel, Intrinsics, Rotation3, so3_exp
from .observations import (
    DEFAULT_STRIDE,
    DepthMap,
    KeypointObservation,
    PairwiseObservation,
    PerViewEstimate,
    Scene,
    WorldState,
    camera_to_dict,
    human_to_dict,
    save_scene,
)

CONFIDENCE_FLOOR = 0.05


@dataclass
class NoiseModel:
    keypoint_sigma_px: float = 0.0
    keypoint_dropout: float = 0.0
    visibility_dropout: float = 0.0      # whole (camera, human) observations
    pointmap_rel_noise: float = 0.0
    pair_scale_drift: float = 0.0        # +- log-uniform fraction per pair
    init_rotation_deg: float = 0.0       # data-driven camera rotation noise
    init_translation_frac: float = 0.0   # data-driven camera position noise
    focal_error_frac: float = 0.0        # data-driven focal length error
    init_alpha_multiplier: float = 1.0   # how wrong the snapshot alpha starts
    human_orient_noise_deg: float = 0.0  # per-view orientation estimate noise
    human_pose_noise_deg: float = 0.0    # per-view joint rotation estimate noise

    def validate(self):
        for name in ("keypoint_sigma_px", "keypoint_dropout", "visibility_dropout",
                     "pointmap_rel_noise", "pair_scale_drift", "init_rotation_deg",
                     "init_translation_frac", "focal_error_frac",
                     "human_orient_noise_deg", "human_pose_noise_deg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"noise field {name} must be >= 0")
        if self.init_alpha_multiplier <= 0:
            raise ConfigError("init_alpha_multiplier must be positive")


@dataclass
class SynthConfig:
    cameras: int = 4
    humans: int = 3
    scene_radius: float = 1.0      # humans placed within this disc
    ring_radius: float = 3.5
    ring_height: float = 1.4
    look_at_height: float = 0.9
    image_size: tuple = (256, 256)
    focal_range: tuple = (280.0, 340.0)
    stride: int = DEFAULT_STRIDE
    data_scale: float = 6.0        # pre-scale world = metric / data_scale
    pose_noise_deg: float = 6.0    # ground-truth pose variation
    beta_sigma: float = 0.3
    boxes: int = 3
    ground_radius: float = 7.0
    joint_radius: float = 0.06     # depth-render sphere radius around joints
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def validate(self):
        if self.cameras < 2:
            raise ConfigError("need at least 2 cameras")
        if self.humans < 1:
            raise ConfigError("need at least 1 human")
        if self.data_scale <= 0 or self.ring_radius <= 0:
            raise ConfigError("scales must be positive")
        self.noise.validate()

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "noise"}
        d["image_size"] = list(self.image_size)
        d["focal_range"] = list(self.focal_range)
        d["noise"] = {k: getattr(self.noise, k)
                      for k in NoiseModel.__dataclass_fields__}
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        noise = NoiseModel(**d.pop("noise", {}))
        known = {k: v for k, v in d.items() if k in SynthConfig.__dataclass_fields__}
        if "image_size" in known:
            known["image_size"] = tuple(known["image_size"])
        if "focal_range" in known:
            known["focal_range"] = tuple(known["focal_range"])
        return SynthConfig(noise=noise, **known)


@dataclass
class SynthResult:
    scene_dir: Path
    config: SynthConfig
    template: object
    gt_state: WorldState          # exact f64 pre-scale state, alpha = data_scale
    gt_cameras_metric: list       # CameraModel with metric translations
    gt_humans: list               # world-frame HumanParams
    gt_joints: dict               # human_id -> (J, 3)
    keypoints: list
    humans_init: dict
    scene_scale: float            # max GT camera distance to the camera centroid


def _rng(seed, *tags):
    return np.random.default_rng([int(seed) & 0x7FFFFFFF] + [int(t) for t in tags])


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _look_at(position, target):
    """World-to-camera rotation for x-right, y-down, z-forward conventions."""
    fwd = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def _small_rotation(rng, degrees):
    if degrees <= 0:
        return np.eye(3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * np.radians(degrees) * abs(rng.normal()))


def _make_cameras(cfg):
    rng = _rng(cfg.seed, 1)
    W, H = cfg.image_size
    cams = []
    for c in range(cfg.cameras):
        angle = 2.0 * np.pi * c / cfg.cameras + rng.uniform(-0.12, 0.12)
        radius = cfg.ring_radius * (1.0 + rng.uniform(-0.05, 0.05))
        height = cfg.ring_height + rng.uniform(-0.15, 0.15)
        pos = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
        R = _look_at(pos, [0.0, 0.0, cfg.look_at_height])
        t = -R @ pos
        k = Intrinsics.from_image_size(rng.uniform(*cfg.focal_range), W, H)
        cams.append(CameraModel(k, Rotation3(R), t, cam_id=c))
    return cams


def _make_humans(cfg, template):
    humans = []
    for h in range(cfg.humans):
        rng = _rng(cfg.seed, 2, h)
        r = cfg.scene_radius * np.sqrt(rng.uniform(0.05, 1.0))
        ang = rng.uniform(0.0, 2.0 * np.pi)
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        beta = np.clip(rng.normal(scale=cfg.beta_sigma, size=template.num_coeffs),
                       -2.0, 2.0)
        theta = []
        for _ in range(template.num_joints):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            theta.append(Rotation3(so3_exp(
                axis * np.radians(cfg.pose_noise_deg) * rng.normal())))
        params = HumanParams(phi=Rotation3(_rot_z(yaw)), theta=theta, beta=beta,
                             gamma=np.array([r * np.cos(ang), r * np.sin(ang), 0.0]),
                             human_id=h)
        # drop the posed skeleton so the lowest joint sits just above ground
        joints = forward_kinematics(params, template)
        params.gamma[2] = -float(joints[:, 2].min()) + 0.02
        humans.append(params)
    return humans


def _make_boxes(cfg):
    rng = _rng(cfg.seed, 3)
    boxes = []
    for _ in range(cfg.boxes):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        rad = rng.uniform(cfg.scene_radius + 0.4, cfg.ring_radius - 0.8)
        cx, cy = rad * np.cos(ang), rad * np.sin(ang)
        sx, sy, sz = rng.uniform(0.3, 0.8, size=3)
        lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
        hi = np.array([cx + sx / 2, cy + sy / 2, sz])
        boxes.append((lo, hi))
    return boxes


def _raycast_depth(cam, cfg, joints_all, boxes):
    """Nearest-hit depth per strided pixel: ground disc, boxes, joint spheres."""
    W, H = cfg.image_size
    stride = cfg.stride
    us = np.arange(0, W, stride)
    vs = np.arange(0, H, stride)
    uu, vv = np.meshgrid(us, vs)
    k = cam.intrinsics
    # rays with unit camera-frame z: the ray parameter equals camera depth
    dirs_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy,
                         np.ones_like(uu, dtype=float)], axis=-1)
    R = cam.rotation.matrix
    origin = cam.center(1.0)
    dirs = dirs_cam.reshape(-1, 3) @ R
    n = len(dirs)
    best = np.full(n, np.inf)

    # ground plane z = 0 within the ground disc
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pl = -origin[2] / dz
    hit = (t_pl > 0.05) & np.isfinite(t_pl)
    px = origin[None, :] + t_pl[:, None] * dirs
    hit &= px[:, 0] ** 2 + px[:, 1] ** 2 <= cfg.ground_radius ** 2
    best = np.where(hit & (t_pl < best), t_pl, best)

    # axis-aligned boxes, slab method
    for lo, hi in boxes:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[None, :] - origin[None, :]) / dirs
            t2 = (hi[None, :] - origin[None, :]) / dirs
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = (tmax >= tmin) & (tmin > 0.05)
        best = np.where(hit & (tmin < best), tmin, best)

    # spheres at every human joint
    a = np.einsum("nk,nk->n", dirs, dirs)
    for joints in joints_all:
        for center in joints:
            oc = origin - center
            b = 2.0 * dirs @ oc
            cterm = oc @ oc - cfg.joint_radius ** 2
            disc = b * b - 4.0 * a * cterm
            ok = disc > 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t_s = (-b - sq) / (2.0 * a)
            hit = ok & (t_s > 0.05)
            best = np.where(hit & (t_s < best), t_s, best)

    depth = best.reshape(len(vs), len(us))
    return np.where(np.isfinite(depth), depth, np.nan)


def generate(config, out_dir):
    """Build a scene and write it to ``out_dir``; returns the in-memory result.

    The returned ``gt_state`` is the exact float64 ground truth in pre-scale
    units with alpha = data_scale and self-consistent pair poses, so every
    loss evaluates to zero on it at zero noise.
    """
    cfg = config
    cfg.validate()
    template = default_template()
    ds = cfg.data_scale
    W, H = cfg.image_size

    cams_metric = _make_cameras(cfg)
    humans = _make_humans(cfg, template)
    boxes = _make_boxes(cfg)
    gt_joints = {h.human_id: forward_kinematics(h, template) for h in humans}

    centers = np.array([c.center(1.0) for c in cams_metric])
    scene_scale = float(np.linalg.norm(centers - centers.mean(axis=0),
                                       axis=1).max())

    # visibility: which joints of which human land in which image
    proj = {}
    for cam in cams_metric:
        k = cam.intrinsics
        for h in humans:
            joints = gt_joints[h.human_id]
            x_cam = joints @ cam.rotation.matrix.T + cam.translation
            z = x_cam[:, 2]
            ok = z > 1e-6
            zs = np.where(ok, z, 1.0)
            u = k.fx * x_cam[:, 0] / zs + k.cx
            v = k.fy * x_cam[:, 1] / zs + k.cy
            inside = ok & (u >= 0) & (u < W) & (v >= 0) & (v < H)
            proj[(cam.cam_id, h.human_id)] = (np.stack([u, v], axis=1), inside)

    for h in humans:
        views = sum(1 for cam in cams_metric
                    if proj[(cam.cam_id, h.human_id)][1].sum() >= 8)
        if views == 0:
            raise ConfigError(f"human {h.human_id} lands outside every frustum")

    # whole-observation visibility dropout, keeping every human in >= 2 views
    # and every camera with >= 1 human (a fully unobserved camera is
    # unconstrained by the keypoint loss)
    rng_vis = _rng(cfg.seed, 4)
    cam_order = [c.cam_id for c in cams_metric]
    visible = {}
    for h in humans:
        usable = [c for c in cam_order if proj[(c, h.human_id)][1].sum() >= 8]
        keep = [c for c in usable
                if rng_vis.uniform() >= cfg.noise.visibility_dropout]
        forced = [c for c in usable if c not in keep]
        while len(keep) < min(2, len(usable)) and forced:
            keep.append(forced.pop(0))
        for c in cam_order:
            visible[(c, h.human_id)] = c in keep
    for c in cam_order:
        if not any(visible[(c, h.human_id)] for h in humans):
            best = max(humans,
                       key=lambda h: int(proj[(c, h.human_id)][1].sum()))
            if proj[(c, best.human_id)][1].sum() >= 8:
                visible[(c, best.human_id)] = True

    # keypoints with Gaussian noise and confidence model
    sigma = cfg.noise.keypoint_sigma_px
    keypoints = []
    for cam in cams_metric:
        for h in humans:
            key = (cam.cam_id, h.human_id)
            if not visible[key]:
                continue
            pix, inside = proj[key]
            rng_kp = _rng(cfg.seed, 5, cam.cam_id, h.human_id)
            noise = rng_kp.normal(scale=sigma if sigma > 0 else 0.0,
                                  size=pix.shape)
            noisy = pix + noise
            if sigma > 0:
                conf = np.exp(-np.sum(noise ** 2, axis=1) / (2.0 * sigma ** 2))
                conf = np.maximum(conf, CONFIDENCE_FLOOR)
            else:
                conf = np.ones(len(pix))
            dropped = rng_kp.uniform(size=len(pix)) < cfg.noise.keypoint_dropout
            conf = np.where(inside & ~dropped, conf, 0.0)
            if (conf > 0).sum() < 4:
                continue
            vis_v = noisy[conf > 0, 1]
            b2d = max(float(vis_v.max() - vis_v.min()), 8.0)
            keypoints.append(KeypointObservation(cam.cam_id, h.human_id,
                                                 noisy, conf, b2d))

    observed = {(o.camera_id, o.human_id) for o in keypoints}

    # per-view human estimates in each camera's frame
    humans_init = {}
    for cam in cams_metric:
        R = cam.rotation.matrix
        for h in humans:
            key = (cam.cam_id, h.human_id)
            if key not in observed:
                continue
            rng_h = _rng(cfg.seed, 6, cam.cam_id, h.human_id)
            phi_cam = _small_rotation(rng_h, cfg.noise.human_orient_noise_deg) @ \
                (R @ h.phi.matrix)
            theta = h.theta
            if cfg.noise.human_pose_noise_deg > 0:
                theta = [Rotation3(_small_rotation(
                    rng_h, cfg.noise.human_pose_noise_deg) @ r.matrix)
                    for r in h.theta]
            gamma_cam = R @ h.gamma + cam.translation
            humans_init[key] = PerViewEstimate(
                camera_id=cam.cam_id, human_id=h.human_id,
                phi_cam=Rotation3.from_matrix(phi_cam, fix=True),
                theta=list(theta), beta=h.beta.copy(), gamma_cam=gamma_cam)

    # depth grids (exact, pre-scale) and exact world pointmaps
    joints_list = [gt_joints[h.human_id] for h in humans]
    depth_metric = {}
    world_points = {}
    for cam in cams_metric:
        dm = _raycast_depth(cam, cfg, joints_list, boxes)
        depth_metric[cam.cam_id] = dm
        us = np.arange(0, W, cfg.stride)
        vs = np.arange(0, H, cfg.stride)
        uu, vv = np.meshgrid(us, vs)
        k = cam.intrinsics
        rays = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy,
                         np.ones_like(uu, dtype=float)], axis=-1)
        pts = rays * dm[..., None]
        R = cam.rotation.matrix
        world = (pts.reshape(-1, 3) - cam.translation) @ R
        world_points[cam.cam_id] = world.reshape(dm.shape + (3,))

    # cross-view pointmaps for every ordered pair, with drift and noise
    pairs_obs = []     # written to disk (noisy)
    pairs_gt = []      # exact, consistent with exact pose/sigma
    for cam_i in cams_metric:
        for cam_j in cams_metric:
            if cam_i.cam_id == cam_j.cam_id:
                continue
            rng_p = _rng(cfg.seed, 7, cam_i.cam_id, cam_j.cam_id)
            drift = np.exp(rng_p.uniform(-1.0, 1.0) * cfg.noise.pair_scale_drift)
            sigma_pair = ds * drift
            world = world_points[cam_i.cam_id]
            valid = np.isfinite(world).all(axis=2)
            Rj = cam_j.rotation.matrix
            x_metric = world.reshape(-1, 3) @ Rj.T + cam_j.translation
            x_pair = (x_metric / sigma_pair).reshape(world.shape)
            x_pair = np.where(valid[..., None], x_pair, 0.0)
            q = np.where(valid, rng_p.uniform(0.5, 1.5, size=valid.shape), 0.0)
            pose_rot = Rotation3(Rj.T.copy())
            pose_t = -(Rj.T @ cam_j.translation) / sigma_pair
            pairs_gt.append(PairwiseObservation(
                cam_i.cam_id, cam_j.cam_id, x_pair, q, pose_rot, pose_t,
                sigma_pair, cfg.stride))
            noisy = x_pair.copy()
            if cfg.noise.pointmap_rel_noise > 0:
                noisy = x_pair * (1.0 + rng_p.normal(
                    scale=cfg.noise.pointmap_rel_noise, size=x_pair.shape))
                noisy = np.where(valid[..., None], noisy, 0.0)
            pairs_obs.append(PairwiseObservation(
                cam_i.cam_id, cam_j.cam_id, noisy, q.copy(),
                Rotation3.identity(), np.zeros(3), 1.0, cfg.stride))

    # data-driven cameras: ground truth scaled down, plus init noise
    rng_cam = _rng(cfg.seed, 8)
    cams_dd = []
    for cam in cams_metric:
        R_dd = _small_rotation(rng_cam, cfg.noise.init_rotation_deg) @ \
            cam.rotation.matrix
        t_pre = cam.translation / ds
        if cfg.noise.init_translation_frac > 0:
            t_pre = t_pre + cfg.noise.init_translation_frac * \
                np.linalg.norm(t_pre) * rng_cam.normal(size=3) / np.sqrt(3.0)
        k = cam.intrinsics
        if cfg.noise.focal_error_frac > 0:
            ferr = np.exp(rng_cam.uniform(-1.0, 1.0) * cfg.noise.focal_error_frac)
            k = Intrinsics(k.fx * ferr, k.fy * ferr, k.cx, k.cy,
                           k.width, k.height)
        cams_dd.append(CameraModel(k, Rotation3.from_matrix(R_dd, fix=True),
                                   t_pre, cam.cam_id))

    depths_pre = [DepthMap(cid, depth_metric[cid] / ds, cfg.stride)
                  for cid in depth_metric]

    gt_state = WorldState(
        alpha=ds,
        cameras=[CameraModel(c.intrinsics, c.rotation, c.translation / ds,
                             c.cam_id) for c in cams_metric],
        humans=[h.copy() for h in humans],
        depths=[DepthMap(d.camera_id, d.values.copy(), d.stride)
                for d in depths_pre],
        pairs=pairs_gt,
    )

    # --- write the scene directory -----------------------------------------
    out_dir = Path(out_dir)
    manifest = {
        "num_cameras": cfg.cameras,
        "num_humans": cfg.humans,
        "num_joints": template.num_joints,
        "num_shape_coeffs": template.num_coeffs,
        "stride": cfg.stride,
        "image_sizes": {str(c.cam_id): [W, H] for c in cams_metric},
        "synth": cfg.to_dict(),
    }
    save_scene(out_dir, manifest, template, cams_dd, keypoints, humans_init,
               depths_pre, pairs_obs)

    gt_dir = out_dir / "gt"
    gt_dir.mkdir(exist_ok=True)
    (gt_dir / "cameras.json").write_text(json.dumps(
        {"cameras": [camera_to_dict(c) for c in cams_metric]}))
    (gt_dir / "humans.json").write_text(json.dumps(
        {"humans": [human_to_dict(h, gt_joints[h.human_id]) for h in humans]}))
    (gt_dir / "meta.json").write_text(json.dumps({
        "alpha": ds,
        "scene_scale": scene_scale,
        "seed": cfg.seed,
        "init_alpha_multiplier": cfg.noise.init_alpha_multiplier,
    }))
    template.save(gt_dir / "template.json")

    return SynthResult(scene_dir=out_dir, config=cfg, template=template,
                       gt_state=gt_state, gt_cameras_metric=cams_metric,
                       gt_humans=humans, gt_joints=gt_joints,
                       keypoints=keypoints, humans_init=humans_init,
                       scene_scale=scene_scale)


def gt_scene(result):
    """In-memory Scene view of the exact ground truth (no file round trip)."""
    return Scene(path=result.scene_dir, manifest={}, template=result.template,
                 state=result.gt_state, keypoints=result.keypoints,
                 humans_init=result.humans_init)


SWEEP_AXES = ("humans", "cameras", "noise", "alpha_init")


def sweep(base_config, axis, values, out_dir):
    """One scene per value along an axis; returns the sweep manifest dict.

    Scenes share the base seed so per-human substreams keep human-count
    variants paired.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick from {SWEEP_AXES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for value in values:
        cfg = SynthConfig.from_dict(base_config.to_dict())
        if axis == "humans":
            cfg.humans = int(value)
        elif axis == "cameras":
            cfg.cameras = int(value)
        elif axis == "noise":
            cfg.noise.keypoint_sigma_px = float(value)
        elif axis == "alpha_init":
            cfg.noise.init_alpha_multiplier = float(value)
        name = f"{axis}_{value}"
        generate(cfg, out_dir / name)
        entries.append({"axis": axis, "value": value, "dir": name,
                        "seed": cfg.seed})
    manifest = {"axis": axis, "values": list(values), "scenes": entries}
    (out_dir / "sweep.json").write_text(json.dumps(manifest, indent=1))
    return manifest
