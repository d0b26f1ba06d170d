"""Scene observation data model and on-disk formats.

A scene directory holds everything the upstream networks would supply:

- ``manifest.json``      scene-level metadata (C, H, J, B, image sizes, stride,
                         pair list, file references)
- ``template.json``      the skeleton template
- ``cameras.json``       per-camera intrinsics and pre-scale extrinsics
- ``keypoints.json``     per camera, per human 2D joints with confidences
- ``humans_init.json``   per human, per view parameter estimates (camera frame)
- ``depth_<c>.bin``      strided per-view depth grid, f32, NaN = invalid
- ``pointmap_<ci>_<cj>.bin``  strided cross-view pointmap + confidence, f32

Binary layout: 16-byte header (magic "HSFM", u32 version, u32 W, u32 H) then
W*H row-major records, little-endian. W/H in the header are the *stored grid*
dimensions; the manifest carries the full image size and the sampling stride.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import HumanParams, SkeletonTemplate
from .errors import (
    MissingCamera,
    ParseError,
    SchemaMismatch,
    UnknownCamera,
)
from .geometry import CameraModel, Intrinsics, Rotation3, unproject_grid

MAGIC = b"HSFM"
FORMAT_VERSION = 1

# Pair confidences below this contribute zero weight to the alignment loss.
PAIR_CONFIDENCE_FLOOR = 1e-3

DEFAULT_STRIDE = 4


@dataclass
class KeypointObservation:
    """2D joints of one human in one camera with per-joint confidences."""

    camera_id: int
    human_id: int
    joints_2d: np.ndarray   # (J, 2) pixels
    confidence: np.ndarray  # (J,) in [0, 1]
    bbox_height: float      # pixels

    def __post_init__(self):
        self.joints_2d = np.asarray(self.joints_2d, dtype=float)
        self.confidence = np.clip(np.asarray(self.confidence, dtype=float), 0.0, 1.0)
        if self.joints_2d.shape != (len(self.confidence), 2):
            raise ValueError("joints_2d must be (J, 2) matching confidence")
        if not self.bbox_height > 0:
            raise ValueError("bbox_height must be positive")


@dataclass
class DepthMap:
    """Strided per-view depth grid in pre-scale units; NaN marks invalid pixels."""

    camera_id: int
    values: np.ndarray  # (Hs, Ws)
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        finite = self.values[np.isfinite(self.values)]
        if finite.size and finite.min() <= 0:
            raise ValueError("valid depth entries must be positive")

    @property
    def valid(self):
        return np.isfinite(self.values)

    def pixel_grid(self):
        """Full-resolution pixel coordinates (us, vs) of every grid cell."""
        hs, ws = self.values.shape
        us = np.arange(ws) * self.stride
        vs = np.arange(hs) * self.stride
        return np.meshgrid(us, vs)


@dataclass
class PairwiseObservation:
    """Cross-view pointmap for an ordered camera pair (ci, cj).

    ``points`` holds camera ci's content expressed in cj's frame (pre-scale
    units). ``pose``/``sigma`` are the optimizable pair transform and scale
    that bring that content into the world frame.
    """

    ci: int
    cj: int
    points: np.ndarray       # (Hs, Ws, 3)
    confidence: np.ndarray   # (Hs, Ws) >= 0
    pose_rotation: Rotation3 = field(default_factory=Rotation3.identity)
    pose_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma: float = 1.0
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if self.ci == self.cj:
            raise ValueError("pair cameras must differ")
        self.points = np.asarray(self.points, dtype=float)
        self.confidence = np.asarray(self.confidence, dtype=float)
        if np.any(self.confidence < 0) or not np.isfinite(self.confidence).all():
            raise ValueError("pair confidence must be finite and non-negative")
        self.pose_translation = np.asarray(self.pose_translation, dtype=float).reshape(3)
        if not self.sigma > 0:
            raise ValueError("pair scale sigma must stay positive")


@dataclass
class PerViewEstimate:
    """A single-view human parameter estimate, expressed in that camera's frame."""

    camera_id: int
    human_id: int
    phi_cam: Rotation3
    theta: list
    beta: np.ndarray
    gamma_cam: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.gamma_cam = np.asarray(self.gamma_cam, dtype=float).reshape(3)


@dataclass
class WorldState:
    """Full optimization state: one scale, all cameras, humans, depths, pairs.

    Per-view world pointmaps are always derived from (depths, cameras, alpha)
    via :func:`world_pointmap`; they are never stored independently.
    """

    alpha: float
    cameras: list
    humans: list
    depths: list
    pairs: list

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def camera_index(self, cam_id):
        for i, cam in enumerate(self.cameras):
            if cam.cam_id == cam_id:
                return i
        raise UnknownCamera(f"camera {cam_id} not in state")

    def human_index(self, human_id):
        for i, h in enumerate(self.humans):
            if h.human_id == human_id:
                return i
        raise KeyError(f"human {human_id} not in state")

    def copy(self):
        return WorldState(
            alpha=self.alpha,
            cameras=[CameraModel(c.intrinsics, c.rotation, c.translation.copy(), c.cam_id)
                     for c in self.cameras],
            humans=[h.copy() for h in self.humans],
            depths=[DepthMap(d.camera_id, d.values.copy(), d.stride) for d in self.depths],
            pairs=[PairwiseObservation(p.ci, p.cj, p.points, p.confidence,
                                       p.pose_rotation, p.pose_translation.copy(),
                                       p.sigma, p.stride)
                   for p in self.pairs],
        )


@dataclass
class Scene:
    """A loaded scene directory."""

    path: Path
    manifest: dict
    template: SkeletonTemplate
    state: WorldState
    keypoints: list
    humans_init: dict  # (camera_id, human_id) -> PerViewEstimate

    def keypoint(self, camera_id, human_id):
        for obs in self.keypoints:
            if obs.camera_id == camera_id and obs.human_id == human_id:
                return obs
        return None

    @property
    def gt_dir(self):
        p = self.path / "gt"
        return p if p.is_dir() else None


def world_pointmap(state, camera_id, template=None):
    """Per-view world pointmap S^c from Eq.-style unprojection of the depth grid.

    Returns (points (Hs, Ws, 3) with NaN at invalid pixels, valid mask).
    """
    idx = state.camera_index(camera_id)
    cam = state.cameras[idx]
    depth = None
    for d in state.depths:
        if d.camera_id == camera_id:
            depth = d
            break
    if depth is None:
        raise UnknownCamera(f"camera {camera_id} has no depth map")
    us, vs = depth.pixel_grid()
    mask = depth.valid
    pts = np.full(depth.values.shape + (3,), np.nan)
    if mask.any():
        pts[mask] = unproject_grid(us[mask], vs[mask], depth.values[mask],
                                   cam, state.alpha)
    return pts, mask


# ---------------------------------------------------------------------------
# Binary grid formats


def _pack_header(width, height):
    return struct.pack("<4sIII", MAGIC, FORMAT_VERSION, int(width), int(height))


def _read_header(path, data):
    if len(data) < 16:
        raise ParseError(path, f"truncated header ({len(data)} bytes)")
    magic, version, width, height = struct.unpack("<4sIII", data[:16])
    if magic != MAGIC:
        raise ParseError(path, f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise ParseError(path, f"unsupported version {version} at offset 4")
    return width, height


def write_depth_binary(path, values):
    """values: (Hs, Ws) float array, NaN = invalid."""
    values = np.asarray(values)
    hs, ws = values.shape
    with open(path, "wb") as fh:
        fh.write(_pack_header(ws, hs))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_depth_binary(path):
    data = Path(path).read_bytes()
    ws, hs = _read_header(path, data)
    want = 16 + 4 * ws * hs
    if len(data) != want:
        raise ParseError(path, f"expected {want} bytes, found {len(data)} "
                               f"(truncation at offset {len(data)})")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(hs, ws)
    return values.astype(float)


def write_pointmap_binary(path, points, confidence):
    """points: (Hs, Ws, 3); confidence: (Hs, Ws). Interleaved xyzc records."""
    points = np.asarray(points)
    confidence = np.asarray(confidence)
    hs, ws = confidence.shape
    rec = np.concatenate([points, confidence[..., None]], axis=2)
    with open(path, "wb") as fh:
        fh.write(_pack_header(ws, hs))
        fh.write(np.ascontiguousarray(rec, dtype="<f4").tobytes())


def read_pointmap_binary(path):
    data = Path(path).read_bytes()
    ws, hs = _read_header(path, data)
    want = 16 + 16 * ws * hs
    if len(data) != want:
        raise ParseError(path, f"expected {want} bytes, found {len(data)} "
                               f"(truncation at offset {len(data)})")
    rec = np.frombuffer(data, dtype="<f4", offset=16).reshape(hs, ws, 4)
    return rec[..., :3].astype(float), rec[..., 3].astype(float)


# ---------------------------------------------------------------------------
# JSON pieces


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingCamera(f"{path} does not exist")
    except json.JSONDecodeError as e:
        raise ParseError(path, f"invalid JSON at offset {e.pos}: {e.msg}")


def camera_to_dict(cam):
    k = cam.intrinsics
    return {
        "id": int(cam.cam_id),
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
        "width": k.width, "height": k.height,
        "rotation": cam.rotation.matrix.reshape(-1).tolist(),
        "translation": cam.translation.tolist(),
    }


def camera_from_dict(d, path="cameras.json"):
    try:
        k = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                       float(d["cy"]), int(d["width"]), int(d["height"]))
        R = np.array(d["rotation"], dtype=float).reshape(3, 3)
        t = np.array(d["translation"], dtype=float)
    except (KeyError, ValueError) as e:
        raise ParseError(path, f"bad camera entry: {e}")
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-3:
        raise ParseError(path, f"camera {d.get('id')}: rotation is not orthonormal")
    return CameraModel(k, Rotation3.from_matrix(R, fix=True), t,
                       cam_id=int(d["id"]))


def human_to_dict(h, joints=None):
    d = {
        "id": int(h.human_id),
        "phi": h.phi.log().tolist(),
        "theta": [r.log().tolist() for r in h.theta],
        "beta": h.beta.tolist(),
        "gamma": h.gamma.tolist(),
    }
    if joints is not None:
        d["joints"] = np.asarray(joints).tolist()
    return d


def human_from_dict(d, num_joints, path="humans.json"):
    theta = [Rotation3.from_axis_angle(w) for w in d["theta"]]
    if len(theta) != num_joints:
        raise SchemaMismatch(f"{path}: human {d.get('id')} has {len(theta)} "
                             f"joint rotations, template has {num_joints}")
    return HumanParams(
        phi=Rotation3.from_axis_angle(d["phi"]),
        theta=theta,
        beta=np.array(d["beta"], dtype=float),
        gamma=np.array(d["gamma"], dtype=float),
        human_id=int(d["id"]),
    )


# ---------------------------------------------------------------------------
# Scene directory IO


def save_scene(path, manifest, template, cameras, keypoints, humans_init,
               depths, pairs):
    """Write a full scene directory in the documented formats."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    template.save(path / "template.json")

    (path / "cameras.json").write_text(json.dumps(
        {"cameras": [camera_to_dict(c) for c in cameras]}))

    kp_doc = {}
    for obs in keypoints:
        per_cam = kp_doc.setdefault(str(obs.camera_id), {})
        per_cam[str(obs.human_id)] = {
            "joints": np.concatenate(
                [obs.joints_2d, obs.confidence[:, None]], axis=1).tolist(),
            "bbox_height": float(obs.bbox_height),
        }
    (path / "keypoints.json").write_text(json.dumps(kp_doc))

    hi_doc = {}
    for (c, h), est in humans_init.items():
        per_h = hi_doc.setdefault(str(h), {})
        per_h[str(c)] = {
            "phi": est.phi_cam.log().tolist(),
            "theta": [r.log().tolist() for r in est.theta],
            "beta": est.beta.tolist(),
            "gamma": est.gamma_cam.tolist(),
        }
    (path / "humans_init.json").write_text(json.dumps(hi_doc))

    files = {"depths": {}, "pointmaps": {}}
    for d in depths:
        name = f"depth_{d.camera_id}.bin"
        write_depth_binary(path / name, d.values)
        files["depths"][str(d.camera_id)] = name
    for p in pairs:
        name = f"pointmap_{p.ci}_{p.cj}.bin"
        write_pointmap_binary(path / name, p.points, p.confidence)
        files["pointmaps"][f"{p.ci},{p.cj}"] = name

    manifest = dict(manifest)
    manifest.setdefault("version", FORMAT_VERSION)
    manifest["files"] = files
    manifest["pairs"] = [[p.ci, p.cj] for p in pairs]
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def load_scene(path):
    """Load and validate a scene directory. See module docstring for formats."""
    path = Path(path)
    manifest = _load_json(path / "manifest.json")
    template = SkeletonTemplate.from_dict(_load_json(path / "template.json"))
    J = int(manifest.get("num_joints", template.num_joints))
    if J != template.num_joints:
        raise SchemaMismatch(
            f"manifest J={J} but template has {template.num_joints} joints")
    B = int(manifest.get("num_shape_coeffs", template.num_coeffs))
    if B != template.num_coeffs:
        raise SchemaMismatch(
            f"manifest B={B} but template has {template.num_coeffs} coeffs")
    stride = int(manifest.get("stride", DEFAULT_STRIDE))

    cam_doc = _load_json(path / "cameras.json")
    cameras = [camera_from_dict(d, path / "cameras.json")
               for d in cam_doc["cameras"]]
    cam_ids = {c.cam_id for c in cameras}
    sizes = manifest.get("image_sizes", {})
    for cam in cameras:
        size = sizes.get(str(cam.cam_id))
        if size is not None and (cam.intrinsics.width, cam.intrinsics.height) != tuple(size):
            raise SchemaMismatch(f"camera {cam.cam_id} image size "
                                 f"{size} != intrinsics")

    kp_doc = _load_json(path / "keypoints.json")
    keypoints = []
    for c_key, per_cam in kp_doc.items():
        c = int(c_key)
        if c not in cam_ids:
            raise SchemaMismatch(f"keypoints reference unknown camera {c}")
        for h_key, entry in per_cam.items():
            arr = np.array(entry["joints"], dtype=float)
            if arr.shape != (J, 3):
                raise SchemaMismatch(
                    f"keypoints for camera {c} human {h_key}: expected "
                    f"{J}x3 joints, found {arr.shape[0]}x{arr.shape[1]}")
            keypoints.append(KeypointObservation(
                camera_id=c, human_id=int(h_key),
                joints_2d=arr[:, :2], confidence=arr[:, 2],
                bbox_height=float(entry["bbox_height"])))
    keypoints.sort(key=lambda o: (o.camera_id, o.human_id))

    hi_doc = _load_json(path / "humans_init.json")
    humans_init = {}
    human_ids = set()
    for h_key, per_h in hi_doc.items():
        h = int(h_key)
        human_ids.add(h)
        for c_key, entry in per_h.items():
            c = int(c_key)
            theta = [Rotation3.from_axis_angle(w) for w in entry["theta"]]
            if len(theta) != J:
                raise SchemaMismatch(
                    f"humans_init human {h} camera {c}: {len(theta)} joint "
                    f"rotations, template has {J}")
            humans_init[(c, h)] = PerViewEstimate(
                camera_id=c, human_id=h,
                phi_cam=Rotation3.from_axis_angle(entry["phi"]),
                theta=theta,
                beta=np.array(entry["beta"], dtype=float),
                gamma_cam=np.array(entry["gamma"], dtype=float))

    depths = []
    for cam in cameras:
        ref = manifest["files"]["depths"].get(str(cam.cam_id))
        if ref is None or not (path / ref).exists():
            raise MissingCamera(f"depth file for camera {cam.cam_id} missing")
        values = read_depth_binary(path / ref)
        depths.append(DepthMap(cam.cam_id, values, stride))

    pairs = []
    pose_doc = manifest.get("pair_poses", {})
    for ci, cj in manifest.get("pairs", []):
        ref = manifest["files"]["pointmaps"].get(f"{ci},{cj}")
        if ref is None or not (path / ref).exists():
            raise MissingCamera(f"pointmap file for pair ({ci}, {cj}) missing")
        points, conf = read_pointmap_binary(path / ref)
        pose = pose_doc.get(f"{ci},{cj}")
        if pose is not None:
            rot = Rotation3.from_axis_angle(pose["rotation"])
            trans = np.array(pose["translation"], dtype=float)
            sigma = float(pose["sigma"])
        else:
            rot, trans, sigma = Rotation3.identity(), np.zeros(3), 1.0
        pairs.append(PairwiseObservation(ci, cj, points, conf, rot, trans,
                                         sigma, stride))

    # humans before initialization: rest placeholders, replaced by init
    humans = [HumanParams.rest(template, human_id=h) for h in sorted(human_ids)]
    state = WorldState(alpha=float(manifest.get("alpha", 1.0)),
                       cameras=cameras, humans=humans, depths=depths,
                       pairs=pairs)
    return Scene(path=path, manifest=manifest, template=template, state=state,
                 keypoints=keypoints, humans_init=humans_init)


# ---------------------------------------------------------------------------
# State snapshots (initialization / optimization results)


def save_state(path, state, template, joints_by_human=None, scene_dir=None):
    """Persist a WorldState: cameras + alpha + humans as JSON, depths as binaries.

    Pair pointmaps are not copied; the snapshot records pair poses/scales and a
    reference to the originating scene directory for anything that needs the
    raw pair data again.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    template.save(path / "template.json")

    doc = {
        "alpha": state.alpha,
        "scene_dir": str(scene_dir) if scene_dir else None,
        "cameras": [camera_to_dict(c) for c in state.cameras],
        "humans": [human_to_dict(h,
                                 None if joints_by_human is None
                                 else joints_by_human.get(h.human_id))
                   for h in state.humans],
        "pair_poses": {
            f"{p.ci},{p.cj}": {
                "rotation": p.pose_rotation.log().tolist(),
                "translation": p.pose_translation.tolist(),
                "sigma": p.sigma,
            } for p in state.pairs
        },
        "strides": {str(d.camera_id): d.stride for d in state.depths},
    }
    (path / "state.json").write_text(json.dumps(doc))
    for d in state.depths:
        write_depth_binary(path / f"depth_{d.camera_id}.bin", d.values)
    return path


def load_state(path, scene=None):
    """Rebuild a WorldState from a snapshot directory.

    When ``scene`` is given (or the snapshot records its scene directory),
    pair pointmaps are re-attached from the original scene files.
    """
    path = Path(path)
    doc = _load_json(path / "state.json")
    template = SkeletonTemplate.load(path / "template.json")
    cameras = [camera_from_dict(d, path / "state.json") for d in doc["cameras"]]
    humans = [human_from_dict(d, template.num_joints) for d in doc["humans"]]
    depths = []
    for cam in cameras:
        f = path / f"depth_{cam.cam_id}.bin"
        if not f.exists():
            raise MissingCamera(f"snapshot depth file for camera {cam.cam_id} missing")
        stride = int(doc.get("strides", {}).get(str(cam.cam_id), DEFAULT_STRIDE))
        depths.append(DepthMap(cam.cam_id, read_depth_binary(f), stride))

    pairs = []
    if scene is None and doc.get("scene_dir"):
        candidate = Path(doc["scene_dir"])
        if (candidate / "manifest.json").exists():
            scene = load_scene(candidate)
    if scene is not None:
        by_key = {(p.ci, p.cj): p for p in scene.state.pairs}
        for key, pose in doc.get("pair_poses", {}).items():
            ci, cj = (int(x) for x in key.split(","))
            src = by_key.get((ci, cj))
            if src is None:
                continue
            pairs.append(PairwiseObservation(
                ci, cj, src.points, src.confidence,
                Rotation3.from_axis_angle(pose["rotation"]),
                np.array(pose["translation"], dtype=float),
                float(pose["sigma"]), src.stride))

    state = WorldState(alpha=float(doc["alpha"]), cameras=cameras,
                       humans=humans, depths=depths, pairs=pairs)
    joints = {int(d["id"]): np.array(d["joints"], dtype=float)
              for d in doc["humans"] if "joints" in d}
    return state, template, joints
