"""Two-stage joint optimization of humans, cameras, depths, and pair poses.

Stage 1 descends the human bundle-adjustment loss over {alpha, gamma, beta}
with the places weight at zero; stage 2 adds the global pointmap alignment
loss and opens up {gamma, beta, phi, theta, R, t, K, D} plus each pair's
(pose, sigma). All gradients are analytic; rotations move through axis-angle
tangent increments folded onto the stored matrices each step. Positive
quantities (alpha, sigma, focal multiplier, depths) are optimized in log
space.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .body import HumanParams, fk_backward, fk_with_cache
from .errors import Diverged, NonFiniteGradient
from .geometry import EPS_DEPTH, CameraModel, Rotation3, orthonormalize, so3_exp
from .observations import PAIR_CONFIDENCE_FLOOR, WorldState
from .world_init import fit_pair_poses

logger = logging.getLogger(__name__)

# guards the non-differentiable tip of each L2 norm; zero residuals get zero
# gradient instead of a blow-up
_NORM_EPS = 1e-12

STAGE1_BLOCKS = ("alpha", "gamma", "beta")
STAGE2_BLOCKS = ("gamma", "beta", "phi", "theta", "cam_rot", "cam_t",
                 "focal", "depth", "pair_rot", "pair_t", "sigma")


@dataclass
class OptimConfig:
    """Optimizer settings. Defaults follow the two-stage recipe."""

    lam: float = 1.0                  # places weight after sum-Q normalization
    lr: float = 0.015
    steps: int | None = None          # per stage; None -> max(min_steps, k * scene scale)
    steps_per_meter: float = 100.0
    min_steps: int = 500
    optimize_alpha_stage2: bool = False
    optimize_focal: bool = True
    optimize_depths: bool = True
    no_places: bool = False           # ablation: drop the places loss entirely
    detach_human_grads: bool = False  # ablation: human loss stops driving cameras/scene
    seed: int = 0
    workers: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    renorm_every: int = 25            # rotation re-orthonormalization cadence

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d):
        known = {k: v for k, v in d.items() if k in OptimConfig.__dataclass_fields__}
        return OptimConfig(**known)


@dataclass
class LossBreakdown:
    """One evaluation of Eq.-6-style total = L_humans + lambda * L_places."""

    l_humans: float
    l_places: float
    lam: float
    e_joint: np.ndarray          # (C, H) per-term reprojection errors
    e_beta: np.ndarray           # (H,) shape regularizers
    pair_residuals: dict         # (ci, cj) -> normalized contribution

    @property
    def total(self):
        return self.l_humans + self.lam * self.l_places


@dataclass
class TraceRow:
    step: int
    stage: int
    l_humans: float
    l_places: float
    total: float
    lr: float

    def csv(self):
        return (f"{self.step},{self.stage},{self.l_humans!r},"
                f"{self.l_places!r},{self.total!r},{self.lr!r}")


TRACE_HEADER = "step,stage,l_humans,l_places,total,lr"


# ---------------------------------------------------------------------------
# Static problem data


@dataclass
class KpTerm:
    cam: int       # camera index
    hum: int       # human index
    kp: np.ndarray
    conf: np.ndarray
    b2d: float


@dataclass
class PairTerm:
    idx: int
    ci: int        # camera index of the content camera
    key: tuple     # (ci, cj) camera ids for reporting
    au: np.ndarray  # (N,) (u - cx) / fx0 per pixel
    av: np.ndarray
    X: np.ndarray   # (N, 3) cross-view points
    Q: np.ndarray   # (N,)
    depth_sel: np.ndarray  # (N,) indices into the camera's depth parameter vector


@dataclass
class Problem:
    template: object
    C: int
    H: int
    fx0: np.ndarray
    fy0: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    kp_terms: list
    pair_terms: list
    q_norm: float
    depth_valid_idx: list   # per camera: flat indices of valid grid cells
    depth_shape: list       # per camera: (Hs, Ws)
    cam_ids: list
    human_ids: list

    @staticmethod
    def build(state, keypoints, template):
        cams = state.cameras
        cam_ids = [c.cam_id for c in cams]
        human_ids = [h.human_id for h in state.humans]
        C, H = len(cams), len(state.humans)
        fx0 = np.array([c.intrinsics.fx for c in cams])
        fy0 = np.array([c.intrinsics.fy for c in cams])
        cx = np.array([c.intrinsics.cx for c in cams])
        cy = np.array([c.intrinsics.cy for c in cams])

        kp_terms = []
        for obs in keypoints:
            if obs.camera_id not in cam_ids or obs.human_id not in human_ids:
                continue
            kp_terms.append(KpTerm(cam_ids.index(obs.camera_id),
                                   human_ids.index(obs.human_id),
                                   obs.joints_2d, obs.confidence,
                                   float(obs.bbox_height)))

        depth_valid_idx, depth_shape, rank = [], [], []
        depth_by_cam = {d.camera_id: d for d in state.depths}
        for cid in cam_ids:
            d = depth_by_cam[cid]
            flat_valid = np.flatnonzero(d.valid.ravel())
            depth_valid_idx.append(flat_valid)
            depth_shape.append(d.values.shape)
            r = np.full(d.values.size, -1, dtype=int)
            r[flat_valid] = np.arange(len(flat_valid))
            rank.append(r)

        pair_terms = []
        q_norm = 0.0
        for k, pair in enumerate(state.pairs):
            ci = cam_ids.index(pair.ci)
            d = depth_by_cam[pair.ci]
            if pair.points.shape[:2] != d.values.shape:
                raise ValueError(f"pair ({pair.ci}, {pair.cj}) grid does not "
                                 "match the content camera's depth grid")
            mask = d.valid & (pair.confidence > PAIR_CONFIDENCE_FLOOR) & \
                np.isfinite(pair.points).all(axis=2)
            flat = np.flatnonzero(mask.ravel())
            if len(flat) == 0:
                continue
            hs, ws = d.values.shape
            vu = (flat % ws) * d.stride
            vv = (flat // ws) * d.stride
            Q = pair.confidence.ravel()[flat]
            pair_terms.append(PairTerm(
                idx=k, ci=ci, key=(pair.ci, pair.cj),
                au=(vu - cx[ci]) / fx0[ci],
                av=(vv - cy[ci]) / fy0[ci],
                X=pair.points.reshape(-1, 3)[flat],
                Q=Q,
                depth_sel=rank[ci][flat],
            ))
            q_norm += float(Q.sum())

        return Problem(template=template, C=C, H=H, fx0=fx0, fy0=fy0, cx=cx,
                       cy=cy, kp_terms=kp_terms, pair_terms=pair_terms,
                       q_norm=max(q_norm, 1e-12),
                       depth_valid_idx=depth_valid_idx,
                       depth_shape=depth_shape, cam_ids=cam_ids,
                       human_ids=human_ids)


# ---------------------------------------------------------------------------
# Mutable optimization variables


@dataclass
class OptVars:
    log_alpha: float
    cam_R: np.ndarray       # (C, 3, 3)
    cam_t: np.ndarray       # (C, 3)
    cam_logf: np.ndarray    # (C,)
    gamma: np.ndarray       # (H, 3)
    beta: np.ndarray        # (H, B)
    phi: np.ndarray         # (H, 3, 3)
    theta: np.ndarray       # (H, J, 3, 3)
    log_depth: list         # per camera (N_c,)
    pair_R: np.ndarray      # (P, 3, 3)
    pair_t: np.ndarray      # (P, 3)
    pair_logsig: np.ndarray  # (P,)

    @staticmethod
    def from_state(state, problem):
        C = len(state.cameras)
        H = len(state.humans)
        J = problem.template.num_joints
        vars_ = OptVars(
            log_alpha=float(np.log(state.alpha)),
            cam_R=np.stack([c.rotation.matrix for c in state.cameras]),
            cam_t=np.stack([c.translation for c in state.cameras]),
            cam_logf=np.zeros(C),
            gamma=np.stack([h.gamma for h in state.humans]),
            beta=np.stack([h.beta for h in state.humans]),
            phi=np.stack([h.phi.matrix for h in state.humans]),
            theta=np.stack([np.stack([r.matrix for r in h.theta])
                            for h in state.humans]),
            log_depth=[np.log(state.depths[i].values.ravel()[idx])
                       for i, idx in enumerate(problem.depth_valid_idx)],
            pair_R=np.stack([p.pose_rotation.matrix for p in state.pairs])
            if state.pairs else np.zeros((0, 3, 3)),
            pair_t=np.stack([p.pose_translation for p in state.pairs])
            if state.pairs else np.zeros((0, 3)),
            pair_logsig=np.array([np.log(p.sigma) for p in state.pairs]),
        )
        return vars_

    def write_back(self, state, problem):
        """New WorldState carrying the optimized values."""
        out = state.copy()
        out.alpha = float(np.exp(self.log_alpha))
        for i, cam in enumerate(out.cameras):
            k = cam.intrinsics.scaled_focal(self.cam_logf[i])
            out.cameras[i] = CameraModel(k, Rotation3(orthonormalize(self.cam_R[i])),
                                         self.cam_t[i].copy(), cam.cam_id)
        for i, h in enumerate(out.humans):
            h.phi = Rotation3(orthonormalize(self.phi[i]))
            h.theta = [Rotation3(orthonormalize(self.theta[i, j]))
                       for j in range(self.theta.shape[1])]
            h.beta = self.beta[i].copy()
            h.gamma = self.gamma[i].copy()
        for i, d in enumerate(out.depths):
            flat = d.values.ravel()
            flat[problem.depth_valid_idx[i]] = np.exp(self.log_depth[i])
            d.values = flat.reshape(problem.depth_shape[i])
        for k, p in enumerate(out.pairs):
            p.pose_rotation = Rotation3(orthonormalize(self.pair_R[k]))
            p.pose_translation = self.pair_t[k].copy()
            p.sigma = float(np.exp(self.pair_logsig[k]))
        return out

    def renormalize(self):
        for i in range(len(self.cam_R)):
            self.cam_R[i] = orthonormalize(self.cam_R[i])
        for i in range(len(self.phi)):
            self.phi[i] = orthonormalize(self.phi[i])
            for j in range(self.theta.shape[1]):
                self.theta[i, j] = orthonormalize(self.theta[i, j])
        for k in range(len(self.pair_R)):
            self.pair_R[k] = orthonormalize(self.pair_R[k])


def zero_grads(problem, vars_):
    H, B = vars_.beta.shape
    J = vars_.theta.shape[1]
    C = len(vars_.cam_R)
    P = len(vars_.pair_R)
    return {
        "alpha": 0.0,
        "gamma": np.zeros((H, 3)),
        "beta": np.zeros((H, B)),
        "phi": np.zeros((H, 3)),
        "theta": np.zeros((H, J, 3)),
        "cam_rot": np.zeros((C, 3)),
        "cam_t": np.zeros((C, 3)),
        "focal": np.zeros(C),
        "depth": [np.zeros_like(ld) for ld in vars_.log_depth],
        "pair_rot": np.zeros((P, 3)),
        "pair_t": np.zeros((P, 3)),
        "sigma": np.zeros(P),
    }


# ---------------------------------------------------------------------------
# Loss and analytic gradients


def _human_params(vars_, problem, h):
    J = vars_.theta.shape[1]
    return HumanParams(
        phi=Rotation3(vars_.phi[h]),
        theta=[Rotation3(vars_.theta[h, j]) for j in range(J)],
        beta=vars_.beta[h],
        gamma=vars_.gamma[h],
        human_id=problem.human_ids[h])


def evaluate(problem, vars_, lam, want_grads=True, detach=False, workers=1,
             skip_places=False):
    """Loss breakdown and (optionally) analytic gradients for every block.

    ``detach`` stops the human loss from contributing gradients to alpha,
    camera, and focal parameters (ablation M1). Places gradients are computed
    only when lam > 0; the places value itself is always reported unless
    ``skip_places``.
    """
    alpha = math.exp(vars_.log_alpha)
    C, H = problem.C, problem.H
    grads = zero_grads(problem, vars_) if want_grads else None

    fx = problem.fx0 * np.exp(vars_.cam_logf)
    fy = problem.fy0 * np.exp(vars_.cam_logf)

    # --- human bundle adjustment -------------------------------------------
    e_joint = np.zeros((C, H))
    e_beta = np.zeros(H)
    joints_all, caches, g_joints = [], [], []
    for h in range(H):
        params = _human_params(vars_, problem, h)
        joints, cache = fk_with_cache(params, problem.template)
        joints_all.append(joints)
        caches.append(cache)
        g_joints.append(np.zeros_like(joints))

    for term in problem.kp_terms:
        c, h = term.cam, term.hum
        R = vars_.cam_R[c]
        t = vars_.cam_t[c]
        joints = joints_all[h]
        y = joints @ R.T
        x_cam = y + alpha * t
        z = x_cam[:, 2]
        vis = (z > EPS_DEPTH) & (term.conf > 0)
        zs = np.where(vis, z, 1.0)
        u = fx[c] * x_cam[:, 0] / zs + problem.cx[c]
        v = fy[c] * x_cam[:, 1] / zs + problem.cy[c]
        w = np.where(vis, term.conf, 0.0)
        rx = w * (term.kp[:, 0] - u)
        ry = w * (term.kp[:, 1] - v)
        n = math.sqrt(float(rx @ rx + ry @ ry))
        e_joint[c, h] = n / term.b2d
        if not want_grads:
            continue
        scale = 1.0 / (H * C * term.b2d * max(n, _NORM_EPS))
        gu = -(w * rx) * scale
        gv = -(w * ry) * scale
        gx = gu * fx[c] / zs
        gy = gv * fy[c] / zs
        gz = -(gu * fx[c] * x_cam[:, 0] + gv * fy[c] * x_cam[:, 1]) / zs ** 2
        gx = np.where(vis, gx, 0.0)
        gy = np.where(vis, gy, 0.0)
        gz = np.where(vis, gz, 0.0)
        g_cam = np.stack([gx, gy, gz], axis=1)
        g_joints[h] += g_cam @ R
        if not detach:
            grads["cam_rot"][c] += np.cross(y, g_cam).sum(axis=0)
            grads["cam_t"][c] += alpha * g_cam.sum(axis=0)
            grads["alpha"] += alpha * float(t @ g_cam.sum(axis=0))
            grads["focal"][c] += float(gu @ (u - problem.cx[c]) +
                                       gv @ (v - problem.cy[c]))

    for h in range(H):
        b = vars_.beta[h]
        nb = float(np.linalg.norm(b))
        e_beta[h] = nb
        if want_grads:
            if nb > _NORM_EPS:
                grads["beta"][h] += b / (H * nb)
            params = _human_params(vars_, problem, h)
            bk = fk_backward(params, problem.template, caches[h], g_joints[h])
            grads["gamma"][h] += bk["gamma"]
            grads["phi"][h] += bk["phi"]
            grads["theta"][h] += bk["theta"]
            grads["beta"][h] += bk["beta"]

    l_humans = float(e_joint.sum() / (H * C) + e_beta.sum() / H)

    # --- global pointmap alignment ------------------------------------------
    pair_residuals = {}
    l_places = 0.0
    if problem.pair_terms and not skip_places:
        places_grads = lam > 0 and want_grads

        def eval_pair(term):
            c = term.ci
            k = term.idx
            inv_f = math.exp(-vars_.cam_logf[c])
            d = np.exp(vars_.log_depth[c][term.depth_sel])
            rays = np.stack([term.au * inv_f, term.av * inv_f,
                             np.ones(len(d))], axis=1)
            y = rays * d[:, None]
            ymt = y - vars_.cam_t[c]
            S = alpha * (ymt @ vars_.cam_R[c])
            sigma = math.exp(vars_.pair_logsig[k])
            RPX = term.X @ vars_.pair_R[k].T
            W = sigma * RPX + sigma * vars_.pair_t[k]
            r = S - W
            n = np.linalg.norm(r, axis=1)
            value = float(term.Q @ n)
            if not places_grads:
                return value, None
            gr = (lam / problem.q_norm) * (term.Q / np.maximum(n, _NORM_EPS))[:, None] * r
            RgS = gr @ vars_.cam_R[c].T
            local = {
                "alpha": float(np.einsum("nk,nk->", gr, S)),
                "cam_t": -alpha * (vars_.cam_R[c] @ gr.sum(axis=0)),
                "cam_rot": -alpha * np.cross(ymt, RgS).sum(axis=0),
                "focal": -alpha * float(np.einsum("n,n->", RgS[:, 0], y[:, 0]) +
                                        np.einsum("n,n->", RgS[:, 1], y[:, 1])),
                "depth": alpha * np.einsum("nk,nk->n", gr, y @ vars_.cam_R[c]),
                "pair_t": -sigma * gr.sum(axis=0),
                "pair_rot": -sigma * np.cross(RPX, gr).sum(axis=0),
                "sigma": -float(np.einsum("nk,nk->", gr, W)),
            }
            return value, local

        if workers > 1 and len(problem.pair_terms) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(eval_pair, problem.pair_terms))
        else:
            results = [eval_pair(t) for t in problem.pair_terms]

        # fixed-order reduction keeps results identical at any worker count
        for term, (value, local) in zip(problem.pair_terms, results):
            l_places += value
            pair_residuals[term.key] = value / problem.q_norm
            if local is None:
                continue
            c, k = term.ci, term.idx
            grads["alpha"] += local["alpha"]
            grads["cam_t"][c] += local["cam_t"]
            grads["cam_rot"][c] += local["cam_rot"]
            grads["focal"][c] += local["focal"]
            np.add.at(grads["depth"][c], term.depth_sel, local["depth"])
            grads["pair_t"][k] += local["pair_t"]
            grads["pair_rot"][k] += local["pair_rot"]
            grads["sigma"][k] += local["sigma"]
        l_places /= problem.q_norm

    return LossBreakdown(l_humans=l_humans, l_places=float(l_places), lam=lam,
                         e_joint=e_joint, e_beta=e_beta,
                         pair_residuals=pair_residuals), grads


def apply_step(vars_, deltas, blocks):
    """Apply per-block deltas: linear blocks add, rotations fold tangents."""
    if "alpha" in blocks:
        vars_.log_alpha += deltas["alpha"]
    if "gamma" in blocks:
        vars_.gamma += deltas["gamma"]
    if "beta" in blocks:
        vars_.beta += deltas["beta"]
    if "phi" in blocks:
        for h in range(len(vars_.phi)):
            vars_.phi[h] = so3_exp(deltas["phi"][h]) @ vars_.phi[h]
    if "theta" in blocks:
        for h in range(vars_.theta.shape[0]):
            for j in range(vars_.theta.shape[1]):
                vars_.theta[h, j] = so3_exp(deltas["theta"][h, j]) @ vars_.theta[h, j]
    if "cam_rot" in blocks:
        for c in range(len(vars_.cam_R)):
            vars_.cam_R[c] = so3_exp(deltas["cam_rot"][c]) @ vars_.cam_R[c]
    if "cam_t" in blocks:
        vars_.cam_t += deltas["cam_t"]
    if "focal" in blocks:
        vars_.cam_logf += deltas["focal"]
    if "depth" in blocks:
        for c in range(len(vars_.log_depth)):
            vars_.log_depth[c] += deltas["depth"][c]
    if "pair_rot" in blocks:
        for k in range(len(vars_.pair_R)):
            vars_.pair_R[k] = so3_exp(deltas["pair_rot"][k]) @ vars_.pair_R[k]
    if "pair_t" in blocks:
        vars_.pair_t += deltas["pair_t"]
    if "sigma" in blocks:
        vars_.pair_logsig += deltas["sigma"]


def _grads_finite(grads, blocks):
    for b in blocks:
        g = grads[b]
        if b == "depth":
            if any(not np.isfinite(x).all() for x in g):
                return False
        elif isinstance(g, float):
            if not math.isfinite(g):
                return False
        elif not np.isfinite(g).all():
            return False
    return True


class _Adam:
    """Per-block Adam with bias correction; moments live in tangent coords."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, grads, blocks, lr):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        deltas = {}
        for b in blocks:
            g = grads[b]
            if b == "depth":
                if b not in self.m:
                    self.m[b] = [np.zeros_like(x) for x in g]
                    self.v[b] = [np.zeros_like(x) for x in g]
                out = []
                for i, gi in enumerate(g):
                    self.m[b][i] = cfg.beta1 * self.m[b][i] + (1 - cfg.beta1) * gi
                    self.v[b][i] = cfg.beta2 * self.v[b][i] + (1 - cfg.beta2) * gi * gi
                    out.append(-lr * (self.m[b][i] / c1) /
                               (np.sqrt(self.v[b][i] / c2) + cfg.adam_eps))
                deltas[b] = out
            else:
                g = np.asarray(g, dtype=float)
                if b not in self.m:
                    self.m[b] = np.zeros_like(g)
                    self.v[b] = np.zeros_like(g)
                self.m[b] = cfg.beta1 * self.m[b] + (1 - cfg.beta1) * g
                self.v[b] = cfg.beta2 * self.v[b] + (1 - cfg.beta2) * g * g
                step = -lr * (self.m[b] / c1) / (np.sqrt(self.v[b] / c2) + cfg.adam_eps)
                deltas[b] = float(step) if b == "alpha" else step
        return deltas


def scene_scale_estimate(state):
    """Max distance of a camera center to the centroid, in current metric units."""
    centers = np.array([c.center(state.alpha) for c in state.cameras])
    if len(centers) < 2:
        return 1.0
    return float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())


def _run_stage(vars_, problem, cfg, lam, blocks, steps, stage_idx, trace,
               step_offset, detach=False):
    adam = _Adam(cfg)
    lr_scale = 1.0
    retried = False
    for k in range(steps):
        lr = cfg.lr * (1.0 - k / steps) * lr_scale
        bd, grads = evaluate(problem, vars_, lam, want_grads=True,
                             detach=detach, workers=cfg.workers)
        trace.append(TraceRow(step_offset + k, stage_idx, bd.l_humans,
                              bd.l_places, bd.total, lr))
        if not math.isfinite(bd.total):
            if retried:
                raise Diverged(f"total loss non-finite at step {step_offset + k}")
            retried = True
            lr_scale *= 0.5
            logger.warning("non-finite loss at step %d; halving lr once",
                           step_offset + k)
            continue
        if not _grads_finite(grads, blocks):
            if retried:
                raise NonFiniteGradient(
                    f"gradient non-finite at step {step_offset + k}")
            retried = True
            lr_scale *= 0.5
            logger.warning("non-finite gradient at step %d; halving lr once",
                           step_offset + k)
            continue
        deltas = adam.step(grads, blocks, lr)
        apply_step(vars_, deltas, blocks)
        if (k + 1) % cfg.renorm_every == 0:
            vars_.renormalize()
    vars_.renormalize()
    return step_offset + steps


def run_hsfm(state, keypoints, template, cfg=None):
    """Two-stage joint optimization; returns (optimized state, trace, final loss).

    Stage 1: {alpha, gamma, beta} with lambda = 0. Stage 2: the full set with
    lambda = cfg.lam (alpha stays fixed unless cfg.optimize_alpha_stage2).
    Deterministic for a given config at any worker count.
    """
    cfg = cfg or OptimConfig()
    problem = Problem.build(state, keypoints, template)
    vars_ = OptVars.from_state(state, problem)
    steps = cfg.steps
    if steps is None:
        steps = max(cfg.min_steps,
                    int(math.ceil(cfg.steps_per_meter * scene_scale_estimate(state))))
    trace = []

    stage1_blocks = [b for b in STAGE1_BLOCKS]
    offset = _run_stage(vars_, problem, cfg, lam=0.0, blocks=stage1_blocks,
                        steps=steps, stage_idx=1, trace=trace, step_offset=0,
                        detach=cfg.detach_human_grads)

    lam = 0.0 if cfg.no_places else cfg.lam
    blocks = ["gamma", "beta", "phi", "theta", "cam_rot", "cam_t"]
    if cfg.optimize_focal:
        blocks.append("focal")
    if cfg.optimize_alpha_stage2:
        blocks.append("alpha")
    if lam > 0:
        if cfg.optimize_depths:
            blocks.append("depth")
        blocks += ["pair_rot", "pair_t", "sigma"]
        # refresh pair poses against the stage-1 state (alpha may have moved)
        interim = vars_.write_back(state, problem)
        fit_pair_poses(interim)
        vars_ = OptVars.from_state(interim, problem)

    offset = _run_stage(vars_, problem, cfg, lam=lam, blocks=blocks,
                        steps=steps, stage_idx=2, trace=trace,
                        step_offset=offset, detach=cfg.detach_human_grads)

    final_state = vars_.write_back(state, problem)
    final_bd, _ = evaluate(problem, vars_, lam, want_grads=False,
                           workers=cfg.workers)
    trace.append(TraceRow(offset, 2, final_bd.l_humans, final_bd.l_places,
                          final_bd.total, 0.0))
    return final_state, trace, final_bd


def human_loss(state, keypoints, template):
    """Eq.-7/8 style value only: (breakdown with lambda = 0)."""
    problem = Problem.build(state, keypoints, template)
    vars_ = OptVars.from_state(state, problem)
    bd, _ = evaluate(problem, vars_, lam=0.0, want_grads=False, skip_places=True)
    return bd


def places_loss(state, keypoints, template):
    """Eq.-9 style normalized value in a breakdown (lambda = 1)."""
    problem = Problem.build(state, keypoints, template)
    vars_ = OptVars.from_state(state, problem)
    bd, _ = evaluate(problem, vars_, lam=1.0, want_grads=False)
    return bd


def write_trace_csv(path, trace):
    lines = [TRACE_HEADER] + [row.csv() for row in trace]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
