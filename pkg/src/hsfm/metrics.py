"""Evaluation metrics for humans (three alignment levels) and cameras.

Human metrics: W-MPJPE (rigid alignment fitted on camera centers), GA-MPJPE
(one similarity fit over the union of all humans' joints), PA-MPJPE (per-human
similarity fit). Camera metrics: TE / s-TE (center error after rigid /
similarity alignment), AE and RRA over unordered camera pairs, CCA / s-CCA
against a fraction of the scene scale. Scene scale is the furthest distance
between a ground-truth camera and the centroid of the ground-truth cameras.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .body import forward_kinematics
from .errors import DegenerateConfiguration, UndefinedMetric
from .geometry import (
    Rotation3,
    alignment_is_degenerate,
    relative_rotation_angle,
    umeyama_align,
)

logger = logging.getLogger(__name__)

DEFAULT_TAUS = (10, 15)

# slack for the alignment-monotonicity asserts; the chains hold exactly up to
# solver round-off
_CHAIN_SLACK = 1e-9


@dataclass
class EvalReport:
    w_mpjpe: float
    ga_mpjpe: float | None
    pa_mpjpe: float
    te: float
    s_te: float | None
    ae: float
    rra: dict
    cca: dict
    s_cca: dict | None
    scene_scale: float
    per_camera: dict = field(default_factory=dict)
    per_human: dict = field(default_factory=dict)
    degenerate_alignment: bool = False

    def to_dict(self):
        return {
            "w_mpjpe": self.w_mpjpe,
            "ga_mpjpe": self.ga_mpjpe,
            "pa_mpjpe": self.pa_mpjpe,
            "te": self.te,
            "s_te": self.s_te,
            "ae": self.ae,
            "rra": {str(k): v for k, v in self.rra.items()},
            "cca": {str(k): v for k, v in self.cca.items()},
            "s_cca": None if self.s_cca is None else
                     {str(k): v for k, v in self.s_cca.items()},
            "scene_scale": self.scene_scale,
            "per_camera": self.per_camera,
            "per_human": self.per_human,
            "degenerate_alignment": self.degenerate_alignment,
        }


def camera_centers(cameras, alpha):
    return np.array([c.center(alpha) for c in cameras])


def scene_scale_of(gt_centers):
    gt_centers = np.asarray(gt_centers, dtype=float)
    return float(np.linalg.norm(gt_centers - gt_centers.mean(axis=0),
                                axis=1).max())


def w_mpjpe(pred_joints, gt_joints, pred_centers, gt_centers):
    """World MPJPE after rigid alignment fitted on the camera centers.

    Joints are pooled over all humans. Returns (value, degenerate flag).
    """
    degenerate = alignment_is_degenerate(pred_centers, gt_centers)
    T = umeyama_align(pred_centers, gt_centers, with_scale=False,
                      allow_degenerate=True)
    pred = np.concatenate([np.asarray(j, dtype=float) for j in pred_joints])
    gt = np.concatenate([np.asarray(j, dtype=float) for j in gt_joints])
    err = np.linalg.norm(T.apply(pred) - gt, axis=1)
    return float(err.mean()), degenerate


def ga_mpjpe(pred_joints, gt_joints, fallback_transforms=()):
    """Group-aligned MPJPE: one Sim(3) over the union of all humans' joints.

    The fit minimizes squared error while the metric reports mean error, so a
    more constrained alignment (e.g. the W-MPJPE one, itself a Sim(3)) can
    occasionally score lower; passing it through ``fallback_transforms`` keeps
    whichever alignment is best and preserves the freedom ordering.
    """
    if len(pred_joints) < 2:
        raise UndefinedMetric("group alignment needs at least two humans")
    pred = np.concatenate([np.asarray(j, dtype=float) for j in pred_joints])
    gt = np.concatenate([np.asarray(j, dtype=float) for j in gt_joints])
    T = umeyama_align(pred, gt, with_scale=True, allow_degenerate=True)
    best = float(np.linalg.norm(T.apply(pred) - gt, axis=1).mean())
    best_T = T
    for F in fallback_transforms:
        v = float(np.linalg.norm(F.apply(pred) - gt, axis=1).mean())
        if v < best:
            best, best_T = v, F
    return best, best_T


def pa_mpjpe(pred_joints, gt_joints, fallback_transforms=()):
    """Per-human Procrustes (Sim(3)) MPJPE, averaged over humans.

    Same better-of rule as :func:`ga_mpjpe`, applied per human.
    """
    vals = []
    for p, g in zip(pred_joints, gt_joints):
        p = np.asarray(p, dtype=float)
        g = np.asarray(g, dtype=float)
        T = umeyama_align(p, g, with_scale=True, allow_degenerate=True)
        v = float(np.linalg.norm(T.apply(p) - g, axis=1).mean())
        for F in fallback_transforms:
            v = min(v, float(np.linalg.norm(F.apply(p) - g, axis=1).mean()))
        vals.append(v)
    return float(np.mean(vals)), vals


def camera_metrics(pred_centers, pred_rotations, gt_centers, gt_rotations,
                   taus=DEFAULT_TAUS):
    """TE, s-TE, AE, RRA@tau, CCA@tau, s-CCA@tau for one camera set.

    Scaled variants are undefined (None) for 2-camera scenes: similarity
    alignment makes two centers match the ground truth exactly.
    """
    pred_centers = np.asarray(pred_centers, dtype=float)
    gt_centers = np.asarray(gt_centers, dtype=float)
    C = len(pred_centers)
    if C < 2:
        raise DegenerateConfiguration("camera metrics need at least 2 cameras")
    degenerate = alignment_is_degenerate(pred_centers, gt_centers)

    scale = scene_scale_of(gt_centers)
    T_rigid = umeyama_align(pred_centers, gt_centers, with_scale=False,
                            allow_degenerate=True)
    rigid_err = np.linalg.norm(T_rigid.apply(pred_centers) - gt_centers, axis=1)
    te = float(rigid_err.mean())
    cca = {tau: float(np.mean(rigid_err <= tau / 100.0 * scale)) for tau in taus}

    if C > 2:
        # rigid is a Sim(3) too; keep whichever scores the lower mean error
        # (the SSE fit can lose on mean error by solver-level margins)
        T_sim = umeyama_align(pred_centers, gt_centers, with_scale=True,
                              allow_degenerate=True)
        sim_err = np.linalg.norm(T_sim.apply(pred_centers) - gt_centers, axis=1)
        if float(sim_err.mean()) > te:
            sim_err = rigid_err
        s_te = float(sim_err.mean())
        s_cca = {tau: float(np.mean(sim_err <= tau / 100.0 * scale))
                 for tau in taus}
    else:
        s_te = None
        s_cca = None

    pair_angles = []
    for a in range(C):
        for b in range(a + 1, C):
            rel_pred = pred_rotations[a] @ pred_rotations[b].T
            rel_gt = gt_rotations[a] @ gt_rotations[b].T
            pair_angles.append(relative_rotation_angle(rel_pred, rel_gt))
    pair_angles = np.array(pair_angles)
    ae = float(pair_angles.mean())
    rra = {tau: float(np.mean(pair_angles <= tau)) for tau in taus}

    return {
        "te": te, "s_te": s_te, "ae": ae, "rra": rra, "cca": cca,
        "s_cca": s_cca, "scene_scale": scale, "rigid_errors": rigid_err,
        "degenerate": degenerate,
    }


def evaluate_world(pred_state, template, gt_cameras_metric, gt_joints_by_human,
                   taus=DEFAULT_TAUS):
    """Full EvalReport for a predicted WorldState against ground truth.

    ``gt_cameras_metric`` carry metric translations (alpha already applied);
    ``gt_joints_by_human`` maps human id to (J, 3) world joints. Humans and
    cameras are matched by id, so consistent relabeling cannot change any
    value.
    """
    pred_centers = camera_centers(pred_state.cameras, pred_state.alpha)
    pred_rots = [c.rotation.matrix for c in pred_state.cameras]
    gt_by_id = {c.cam_id: c for c in gt_cameras_metric}
    gt_centers = np.array([gt_by_id[c.cam_id].center(1.0)
                           for c in pred_state.cameras])
    gt_rots = [gt_by_id[c.cam_id].rotation.matrix for c in pred_state.cameras]

    pred_joints, gt_joints, human_ids = [], [], []
    for h in pred_state.humans:
        if h.human_id not in gt_joints_by_human:
            continue
        pred_joints.append(forward_kinematics(h, template))
        gt_joints.append(np.asarray(gt_joints_by_human[h.human_id], dtype=float))
        human_ids.append(h.human_id)

    cam = camera_metrics(pred_centers, pred_rots, gt_centers, gt_rots, taus)
    w, degenerate_w = w_mpjpe(pred_joints, gt_joints, pred_centers, gt_centers)
    T_w = umeyama_align(pred_centers, gt_centers, with_scale=False,
                        allow_degenerate=True)
    try:
        ga, T_ga = ga_mpjpe(pred_joints, gt_joints, fallback_transforms=(T_w,))
        pa_fallbacks = (T_ga, T_w)
    except UndefinedMetric:
        ga = None
        pa_fallbacks = (T_w,)
    pa, pa_each = pa_mpjpe(pred_joints, gt_joints,
                           fallback_transforms=pa_fallbacks)

    # alignment freedom only grows along each chain
    assert pa <= (ga if ga is not None else w) + _CHAIN_SLACK * (1.0 + pa)
    if ga is not None:
        assert ga <= w + _CHAIN_SLACK * (1.0 + ga)
    if cam["s_te"] is not None:
        assert cam["s_te"] <= cam["te"] + _CHAIN_SLACK * (1.0 + cam["te"])

    per_camera = {str(c.cam_id): float(e) for c, e in
                  zip(pred_state.cameras, cam["rigid_errors"])}
    per_human = {str(h): float(v) for h, v in zip(human_ids, pa_each)}

    return EvalReport(
        w_mpjpe=w, ga_mpjpe=ga, pa_mpjpe=pa,
        te=cam["te"], s_te=cam["s_te"], ae=cam["ae"],
        rra=cam["rra"], cca=cam["cca"], s_cca=cam["s_cca"],
        scene_scale=cam["scene_scale"],
        per_camera=per_camera, per_human=per_human,
        degenerate_alignment=bool(cam["degenerate"] or degenerate_w),
    )


def load_gt(gt_dir):
    """Read a gt/ directory: metric cameras and world joints keyed by human id."""
    import json
    from pathlib import Path

    from .observations import camera_from_dict

    gt_dir = Path(gt_dir)
    cam_doc = json.loads((gt_dir / "cameras.json").read_text())
    cameras = [camera_from_dict(d, gt_dir / "cameras.json")
               for d in cam_doc["cameras"]]
    hum_doc = json.loads((gt_dir / "humans.json").read_text())
    joints = {int(d["id"]): np.array(d["joints"], dtype=float)
              for d in hum_doc["humans"]}
    meta = json.loads((gt_dir / "meta.json").read_text()) \
        if (gt_dir / "meta.json").exists() else {}
    return cameras, joints, meta
