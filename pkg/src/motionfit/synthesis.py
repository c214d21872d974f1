"""Synthetic clip generation: seeded smooth motions that are
biomechanically valid by construction, plus their projected keypoints.

Used as the round-trip oracle for the fitting pipeline and exposed through
the ``synth`` CLI command.
"""

from __future__ import annotations

import numpy as np

from .body_model import (
    CameraIntrinsics,
    MotionSequence,
    SkeletonModel,
    axis_angle_to_rot6d,
    fk_forward,
    project,
    IDENTITY_6D,
)
from .keypoints import GROUPS, KeypointFrame, KeypointSequence, default_layout


def catmull_rom(values: np.ndarray, T: int) -> np.ndarray:
    """Evaluate a Catmull-Rom spline through ``values`` at T uniform samples."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n == 1:
        return np.full(T, v[0])
    padded = np.concatenate([[v[0]], v, [v[-1]]])
    ts = np.linspace(0.0, n - 1.0, T)
    seg = np.clip(ts.astype(int), 0, n - 2)
    u = ts - seg
    p0, p1, p2, p3 = padded[seg], padded[seg + 1], padded[seg + 2], padded[seg + 3]
    return 0.5 * (
        2 * p1
        + (-p0 + p2) * u
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u**2
        + (-p0 + 3 * p1 - 3 * p2 + p3) * u**3
    )


def _spline_angles(rng, T, lo, hi, n_ctrl=4):
    """Smooth angle track inside [lo, hi] with margin against overshoot."""
    margin = 0.12 * (hi - lo)
    ctrl = rng.uniform(lo + margin, hi - margin, n_ctrl)
    return catmull_rom(ctrl, T)


def _flex_axis(model: SkeletonModel, rest, normals, joint: int) -> np.ndarray:
    """Axis whose positive rotation curls the child bone toward the palm."""
    child = model.children[joint][0]
    x = rest[child] - rest[joint]
    x = x / np.linalg.norm(x)
    hand = "left" if joint in model.hand_joint_indices[0] else "right"
    n = normals[hand]
    z = n - (n @ x) * x
    z = z / np.linalg.norm(z)
    return np.cross(x, z)


def synthesize_motion(model: SkeletonModel, T: int = 30, fps: float = 25.0,
                      seed: int = 1, shape_mag: float = 0.0,
                      depth: float = 2.0) -> MotionSequence:
    """Seeded smooth motion around the rest pose.

    Finger joints flex along their palm-curl axes within the default hull
    rectangles, elbows bend only in natural flexion, and bone lengths are
    rigid, so the output passes the default biomechanical checks with zero
    violations.
    """
    from .objective import _palm_subsets, _rest_palm_normal  # limits-free helpers

    rng = np.random.default_rng(seed)
    rest = model.rest_positions()
    normals = {
        hand: _rest_palm_normal(model, rest, roots)
        for hand, roots in _palm_subsets(model)
    }

    R = model.n_pose_rows
    poses = np.tile(IDENTITY_6D, (T, R, 1))
    trans = np.zeros((T, 3))
    trans[:, 0] = catmull_rom(rng.uniform(-0.05, 0.05, 4), T)
    trans[:, 1] = catmull_rom(rng.uniform(-0.04, 0.04, 4), T)
    trans[:, 2] = depth + catmull_rom(rng.uniform(-0.08, 0.08, 4), T)

    def set_track(row, axis, angles):
        for t in range(T):
            poses[t, row] = axis_angle_to_rot6d(axis, angles[t])

    # global orientation: gentle sway about the vertical plus a slight lean
    sway = _spline_angles(rng, T, -0.15, 0.15)
    lean = _spline_angles(rng, T, -0.08, 0.08)
    for t in range(T):
        cy, sy = np.cos(sway[t]), np.sin(sway[t])
        cx, sx = np.cos(lean[t]), np.sin(lean[t])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        R = Ry @ Rx
        poses[t, 0] = np.concatenate([R[:, 0], R[:, 1]])
    # torso and head
    for name, amp in (("spine1", 0.06), ("spine2", 0.06), ("spine3", 0.06),
                      ("neck", 0.1), ("head", 0.1)):
        if name not in model.name_to_index:
            continue
        j = model.name_to_index[name]
        axis = rng.normal(0, 1, 3)
        axis /= np.linalg.norm(axis)
        set_track(model.pose_row[j], axis, _spline_angles(rng, T, -amp, amp))
    # shoulders swing the arms forward/down
    for name in ("left_shoulder", "right_shoulder"):
        if name not in model.name_to_index:
            continue
        j = model.name_to_index[name]
        sgn = 1.0 if name.startswith("left") else -1.0
        set_track(model.pose_row[j], [0, 0, sgn], _spline_angles(rng, T, 0.1, 0.6))
    # elbows and knees: natural flexion only (negative about the hinge axis)
    for j in model.subsets.get("bend", []):
        name = model.names[j]
        axis = np.asarray(model.bend_axes.get(name, [1.0, 0, 0]), dtype=float)
        hi = -0.1 if "knee" in name else -0.15
        lo = -0.25 if "knee" in name else -0.9
        set_track(model.pose_row[j], axis, _spline_angles(rng, T, lo, hi))
    # wrists
    for name in ("left_wrist", "right_wrist"):
        if name not in model.name_to_index:
            continue
        j = model.name_to_index[name]
        axis = rng.normal(0, 1, 3)
        axis /= np.linalg.norm(axis)
        set_track(model.pose_row[j], axis, _spline_angles(rng, T, -0.3, 0.3))
    # fingers: flex toward the palm inside the default hulls
    for j in model.hand_joints():
        if not model.children[j]:
            continue
        name = model.names[j]
        axis = _flex_axis(model, rest, normals, j)
        hi = 0.7 if "thumb" in name else 1.05
        set_track(model.pose_row[j], axis, _spline_angles(rng, T, 0.05, hi))
    # jaw: small opening
    if model.jaw_joint_index is not None:
        row = model.pose_row[model.jaw_joint_index]
        set_track(row, [1, 0, 0], _spline_angles(rng, T, 0.0, 0.1))

    shape = (
        rng.normal(0.0, shape_mag, model.shape_dim)
        if shape_mag > 0
        else np.zeros(model.shape_dim)
    )
    expr = np.zeros((T, model.expr_dim))
    return MotionSequence.from_arrays(model, poses, trans, expr, shape, fps)


def project_motion(model: SkeletonModel, cam: CameraIntrinsics,
                   seq: MotionSequence) -> np.ndarray:
    """(T, K, 2) pixel positions of every joint."""
    poses, trans, expr, shape = seq.to_arrays(model)
    fk = fk_forward(model, poses, trans, shape)
    return project(fk.positions, cam)


def keypoints_from_motion(model: SkeletonModel, cam: CameraIntrinsics,
                          seq: MotionSequence, noise: float = 0.0,
                          dropout: float = 0.0, seed: int = 0,
                          layout: dict | None = None) -> KeypointSequence:
    """Project a motion into a keypoint sequence under a slot layout.

    ``noise`` is the pixel standard deviation added to observed slots;
    ``dropout`` the probability a slot is unobserved (confidence 0).
    Noiseless, dropout-free output reprojects exactly from the motion.
    """
    rng = np.random.default_rng(seed)
    layout = layout or default_layout(model)
    uv = project_motion(model, cam, seq)
    T = len(seq)
    frames = []
    for t in range(T):
        groups = {}
        for g in GROUPS:
            slots = layout.get(g, [])
            arr = np.zeros((len(slots), 3))
            for s, jname in enumerate(slots):
                if jname is None:
                    continue
                j = model.name_to_index[jname]
                pt = uv[t, j].copy()
                conf = 1.0 if noise == 0.0 else float(rng.uniform(0.5, 1.0))
                if noise > 0.0:
                    pt = pt + rng.normal(0.0, noise, 2)
                if dropout > 0.0 and rng.uniform() < dropout:
                    arr[s] = 0.0
                    continue
                arr[s] = [pt[0], pt[1], conf]
            groups[g] = arr
        frames.append(KeypointFrame(frame_index=t, groups=groups))
    return KeypointSequence(source_name="synthetic", frames=frames, group_layout=layout)


def default_camera(width: int = 1280, height: int = 960) -> CameraIntrinsics:
    f = float(max(width, height))
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0)
