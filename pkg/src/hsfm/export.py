"""Inspection exports: colored point clouds, skeleton line sets, camera frusta.

Everything lands in the shared metric world frame. PLY files are binary
little-endian by default with an ascii toggle for debugging. Vertex layout is
documented per file so a reader can recover structured data: the skeleton file
stores J vertices per human in template order, the frustum file stores five
vertices per camera with the apex (camera center) first.
"""

from __future__ import annotations

import numpy as np

from pathlib import Path

from .body import forward_kinematics
from .observations import world_pointmap

# qualitative palette, cycled per camera / per human
PALETTE = [
    (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
    (255, 127, 0), (255, 255, 51), (166, 86, 40), (247, 129, 191),
]


def write_ply(path, vertices, colors=None, edges=None, binary=True):
    """Write vertices (+ optional uchar colors and edge list) as PLY.

    Non-finite vertices are dropped (edges referencing them as well).
    """
    vertices = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    keep = np.isfinite(vertices).all(axis=1)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        colors = colors[keep]
    if edges is not None and len(edges):
        remap = np.full(len(vertices), -1, dtype=np.int64)
        remap[np.flatnonzero(keep)] = np.arange(int(keep.sum()))
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= len(vertices)):
            raise ValueError("edge indices out of range")
        edges = remap[edges]
        edges = edges[(edges >= 0).all(axis=1)].astype(np.int32)
    else:
        edges = np.zeros((0, 2), dtype=np.int32)
    vertices = vertices[keep]

    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0",
              f"element vertex {len(vertices)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += [f"element edge {len(edges)}",
               "property int vertex1", "property int vertex2", "end_header"]

    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if colors is not None:
                vrec = np.zeros(len(vertices),
                                dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                       ("r", "u1"), ("g", "u1"), ("b", "u1")])
                vrec["x"], vrec["y"], vrec["z"] = vertices.T
                vrec["r"], vrec["g"], vrec["b"] = colors.T
            else:
                vrec = np.zeros(len(vertices),
                                dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
                vrec["x"], vrec["y"], vrec["z"] = vertices.T
            fh.write(vrec.tobytes())
            erec = np.ascontiguousarray(edges, dtype="<i4")
            fh.write(erec.tobytes())
        else:
            for i, v in enumerate(vertices):
                row = f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
                if colors is not None:
                    c = colors[i]
                    row += f" {c[0]} {c[1]} {c[2]}"
                fh.write((row + "\n").encode("ascii"))
            for e in edges:
                fh.write(f"{e[0]} {e[1]}\n".encode("ascii"))
    return path


def frustum_vertices(cam, alpha, depth):
    """Apex (camera center) followed by the four unprojected image corners."""
    k = cam.intrinsics
    corners_px = [(0.0, 0.0), (k.width, 0.0), (k.width, k.height), (0.0, k.height)]
    apex = cam.center(alpha)
    R = cam.rotation.matrix
    verts = [apex]
    for u, v in corners_px:
        ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
        verts.append(alpha * (R.T @ (depth * ray) - R.T @ cam.translation))
    return np.array(verts)


FRUSTUM_EDGES = np.array([[0, 1], [0, 2], [0, 3], [0, 4],
                          [1, 2], [2, 3], [3, 4], [4, 1]])


def export_world(state, template, out_dir, binary=True, frustum_depth=None):
    """Write scene points, per-human skeletons, and camera frusta as PLY files.

    Returns {"scene": path, "skeletons": path, "cameras": path}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    verts, cols = [], []
    for cam in state.cameras:
        pts, valid = world_pointmap(state, cam.cam_id)
        color = PALETTE[cam.cam_id % len(PALETTE)]
        p = pts[valid]
        verts.append(p)
        cols.append(np.tile(color, (len(p), 1)))
    scene_pts = np.concatenate(verts) if verts else np.zeros((0, 3))
    scene_cols = np.concatenate(cols) if cols else np.zeros((0, 3))
    scene_path = write_ply(out_dir / "scene_points.ply", scene_pts, scene_cols,
                           binary=binary)

    sk_verts, sk_cols, sk_edges = [], [], []
    J = template.num_joints
    for i, h in enumerate(state.humans):
        joints = forward_kinematics(h, template)
        base = i * J
        color = PALETTE[h.human_id % len(PALETTE)]
        sk_verts.append(joints)
        sk_cols.append(np.tile(color, (J, 1)))
        sk_edges.append(np.array([[base + p, base + j]
                                  for p, j in template.bones]))
    skel_path = write_ply(
        out_dir / "skeletons.ply",
        np.concatenate(sk_verts) if sk_verts else np.zeros((0, 3)),
        np.concatenate(sk_cols) if sk_cols else np.zeros((0, 3)),
        np.concatenate(sk_edges) if sk_edges else None,
        binary=binary)

    centers = np.array([c.center(state.alpha) for c in state.cameras])
    if frustum_depth is None:
        if len(centers) >= 2:
            spread = float(np.linalg.norm(
                centers - centers.mean(axis=0), axis=1).max())
        else:
            spread = 1.0
        frustum_depth = max(0.05, 0.12 * spread)
    fr_verts, fr_cols, fr_edges = [], [], []
    for i, cam in enumerate(state.cameras):
        v = frustum_vertices(cam, state.alpha, frustum_depth)
        fr_verts.append(v)
        fr_cols.append(np.tile(PALETTE[cam.cam_id % len(PALETTE)], (5, 1)))
        fr_edges.append(FRUSTUM_EDGES + 5 * i)
    cam_path = write_ply(out_dir / "cameras.ply",
                         np.concatenate(fr_verts),
                         np.concatenate(fr_cols),
                         np.concatenate(fr_edges), binary=binary)

    return {"scene": scene_path, "skeletons": skel_path, "cameras": cam_path}
