"""Parametric skeleton: 6D joint rotations, shape-dependent rest offsets,
forward kinematics, and pinhole projection.

The skeleton is a pure joint hierarchy (no mesh): each joint stores a rest
offset from its parent plus a linear shape basis, and is optionally driven
by one row of the stacked pose matrix (body rows, then hand rows, then an
optional jaw row).  Unposed joints (fingertips, face landmarks) follow their
parent rigidly.

All arrays are float64.  Batched helpers (``fk_forward``/``fk_backward``)
carry the intermediates needed for exact reverse-mode gradients; the public
single-state operations wrap them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, DegenerateRotation, ModelMismatch
from .validation import as_float_array, check_positive

_EPS_NORM = 1e-9
_MIN_DEPTH = 1e-6

# 6D encoding of the identity rotation; the neutral value for pose rows.
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# 6D rotation representation


def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt a 6-vector (two stacked 3-vectors) into a rotation matrix.

    The first 3-vector is normalized into column x, the second is
    orthogonalized against it into column y, and z = x cross y.
    """
    r = as_float_array(r, "rot6d", (6,))
    R, _ = _rot6d_forward(r[None, :])
    return R[0]


def _rot6d_forward(r: np.ndarray):
    """Batched 6D -> rotation. Returns (R (n,3,3), cache for backward)."""
    a = r[..., :3]
    b = r[..., 3:]
    na = np.linalg.norm(a, axis=-1)
    if np.any(na < _EPS_NORM):
        idx = int(np.argmin(na))
        raise DegenerateRotation(f"first 6D column has near-zero norm at row {idx}")
    x = a / na[..., None]
    pb = np.einsum("...i,...i->...", x, b)
    u = b - pb[..., None] * x
    nu = np.linalg.norm(u, axis=-1)
    if np.any(nu < _EPS_NORM):
        idx = int(np.argmin(nu))
        raise DegenerateRotation(f"6D columns are parallel at row {idx}")
    y = u / nu[..., None]
    z = np.cross(x, y)
    R = np.stack([x, y, z], axis=-1)
    cache = (b, na, x, pb, nu, y)
    return R, cache


def _rot6d_backward(cache, dR: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_rot6d_forward`; maps dL/dR to dL/dr."""
    b, na, x, pb, nu, y = cache
    gx = dR[..., :, 0].copy()
    gy = dR[..., :, 1].copy()
    gz = dR[..., :, 2]
    # z = x cross y
    gx += np.cross(y, gz)
    gy += np.cross(gz, x)
    # y = u / |u|
    gu = (gy - np.einsum("...i,...i->...", y, gy)[..., None] * y) / nu[..., None]
    # u = b - (x.b) x
    xgu = np.einsum("...i,...i->...", x, gu)
    gb = gu - xgu[..., None] * x
    gx += -xgu[..., None] * b - pb[..., None] * gu
    # x = a / |a|
    ga = (gx - np.einsum("...i,...i->...", x, gx)[..., None] * x) / na[..., None]
    return np.concatenate([ga, gb], axis=-1)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Geodesic angle of rotation matrices, batched over leading dims."""
    tr = np.einsum("...ii->...", R)
    c = np.clip((tr - 1.0) / 2.0, -1.0 + 1e-12, 1.0 - 1e-12)
    return np.arccos(c)


def rotation_vector(R: np.ndarray):
    """Axis-angle (log map) of rotation matrices.

    Returns (vec, cache); stable near the identity via series expansion.
    Not intended for angles at pi.
    """
    tr = np.einsum("...ii->...", R)
    c = np.clip((tr - 1.0) / 2.0, -1.0 + 1e-12, 1.0 - 1e-12)
    theta = np.arccos(c)
    a = np.stack(
        [
            R[..., 2, 1] - R[..., 1, 2],
            R[..., 0, 2] - R[..., 2, 0],
            R[..., 1, 0] - R[..., 0, 1],
        ],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 - c * c, 1e-30))
    g = np.where(theta < 1e-4, 0.5 + theta**2 / 12.0, theta / (2.0 * s))
    vec = g[..., None] * a
    cache = (a, c, theta, s, g)
    return vec, cache


def rotation_vector_backward(cache, dvec: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`rotation_vector`: maps dL/dvec to dL/dR."""
    a, c, theta, s, g = cache
    # dg/dc has a finite limit of -1/6 at theta -> 0.
    dg_dc = np.where(
        theta < 1e-4,
        -1.0 / 6.0 - theta**2 / 15.0,
        (theta * c / s - 1.0) / (2.0 * s * s),
    )
    ga_dot = np.einsum("...i,...i->...", dvec, a)
    dc = dg_dc * ga_dot
    dR = np.zeros(a.shape[:-1] + (3, 3))
    # c = (tr R - 1)/2
    half = 0.5 * dc
    dR[..., 0, 0] += half
    dR[..., 1, 1] += half
    dR[..., 2, 2] += half
    # a components are antisymmetric differences of R
    gva = g[..., None] * dvec
    dR[..., 2, 1] += gva[..., 0]
    dR[..., 1, 2] -= gva[..., 0]
    dR[..., 0, 2] += gva[..., 1]
    dR[..., 2, 0] -= gva[..., 1]
    dR[..., 1, 0] += gva[..., 2]
    dR[..., 0, 1] -= gva[..., 2]
    return dR


def axis_angle_to_rot6d(axis, angle: float) -> np.ndarray:
    """6D encoding of the rotation by ``angle`` about ``axis`` (Rodrigues)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    return np.concatenate([R[:, 0], R[:, 1]])


# ---------------------------------------------------------------------------
# Camera


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        check_positive(self.fx, "fx")
        check_positive(self.fy, "fy")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def load_camera(path) -> CameraIntrinsics:
    with open(path, "r", encoding="utf-8") as fh:
        return CameraIntrinsics.from_dict(json.load(fh))


def save_camera(cam: CameraIntrinsics, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=1), encoding="utf-8")


def project(points, cam: CameraIntrinsics) -> np.ndarray:
    """Perspective projection of 3D points to pixel coordinates.

    Raises :class:`BehindCamera` for any depth <= 1e-6, naming the point.
    """
    pts = as_float_array(points, "points")
    if pts.ndim == 1:
        pts = pts[None, :]
    z = pts[..., 2]
    if np.any(z <= _MIN_DEPTH):
        bad = np.argwhere(z <= _MIN_DEPTH)[0]
        raise BehindCamera(
            f"point {tuple(int(i) for i in bad)} has nonpositive depth {z[tuple(bad)]:.3g}",
            frame=int(bad[0]) if len(bad) > 1 else None,
            joint=int(bad[-1]),
        )
    u = cam.fx * pts[..., 0] / z + cam.cx
    v = cam.fy * pts[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project_backward(points: np.ndarray, cam: CameraIntrinsics, duv: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`project` for already-validated points."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    du, dv = duv[..., 0], duv[..., 1]
    dx = du * cam.fx / z
    dy = dv * cam.fy / z
    dz = -(du * cam.fx * x + dv * cam.fy * y) / (z * z)
    return np.stack([dx, dy, dz], axis=-1)


# ---------------------------------------------------------------------------
# Skeleton model


@dataclass
class Joint:
    name: str
    parent: int | None
    rest_offset: np.ndarray  # (3,) meters
    shape_basis: np.ndarray  # (shape_dim, 3) meters per shape unit


class SkeletonModel:
    """Immutable joint hierarchy with shape basis and objective metadata.

    Joint ordering is topological (parents precede children).  Pose rows are
    assigned: rows [0, body_joint_count) to body joints 0..count-1 in order
    (row 0 is the global orientation at the root), the next rows to the left
    then right hand joints, and one final row to the jaw joint if present.
    """

    def __init__(
        self,
        joints: list[Joint],
        body_joint_count: int,
        hand_joint_indices: tuple[list[int], list[int]],
        jaw_joint_index: int | None,
        subsets: dict[str, list[int]],
        bend_axes: dict[str, list[float]] | None = None,
        pose_prior_mean: np.ndarray | None = None,
        pose_prior_precision: np.ndarray | None = None,
        pose_limits: dict[str, tuple[float, float]] | None = None,
        shape_dim: int = 10,
        expr_dim: int = 10,
        name: str = "skeleton",
    ):
        self.name = name
        self.joints = joints
        self.body_joint_count = int(body_joint_count)
        self.hand_joint_indices = (list(hand_joint_indices[0]), list(hand_joint_indices[1]))
        self.jaw_joint_index = jaw_joint_index
        self.subsets = {k: list(v) for k, v in subsets.items()}
        self.bend_axes = {k: list(v) for k, v in (bend_axes or {}).items()}
        self.pose_limits = dict(pose_limits or {})
        self.shape_dim = int(shape_dim)
        self.expr_dim = int(expr_dim)

        self._validate_tree()
        self._build_arrays()
        self._build_pose_rows()
        self._build_prior(pose_prior_mean, pose_prior_precision)

    # -- construction -----------------------------------------------------

    def _validate_tree(self):
        roots = [i for i, j in enumerate(self.joints) if j.parent is None]
        if len(roots) != 1 or roots[0] != 0:
            raise ModelMismatch(f"expected exactly one root at index 0, found {roots}")
        for i, j in enumerate(self.joints):
            if j.parent is not None and not (0 <= j.parent < i):
                raise ModelMismatch(
                    f"joint {i} ({j.name}): parent {j.parent} violates topological order"
                )
            if np.asarray(j.shape_basis).shape != (self.shape_dim, 3):
                raise ModelMismatch(
                    f"joint {j.name}: shape_basis must be ({self.shape_dim}, 3)"
                )
        names = [j.name for j in self.joints]
        if len(set(names)) != len(names):
            raise ModelMismatch("joint names must be unique")
        n = len(self.joints)
        for key, idxs in self.subsets.items():
            for i in idxs:
                if not 0 <= i < n:
                    raise ModelMismatch(f"subset {key}: joint index {i} out of range")
        for side in self.hand_joint_indices:
            for i in side:
                if not 0 <= i < n:
                    raise ModelMismatch(f"hand joint index {i} out of range")
        if self.jaw_joint_index is not None and not 0 <= self.jaw_joint_index < n:
            raise ModelMismatch("jaw joint index out of range")

    def _build_arrays(self):
        self.n_joints = len(self.joints)
        self.parents = np.array(
            [-1 if j.parent is None else j.parent for j in self.joints], dtype=int
        )
        self.offsets = np.stack([np.asarray(j.rest_offset, dtype=float) for j in self.joints])
        self.basis = np.stack([np.asarray(j.shape_basis, dtype=float) for j in self.joints])
        self.names = [j.name for j in self.joints]
        self.name_to_index = {n: i for i, n in enumerate(self.names)}
        self.children: list[list[int]] = [[] for _ in range(self.n_joints)]
        for i, p in enumerate(self.parents):
            if p >= 0:
                self.children[p].append(i)

    def _build_pose_rows(self):
        left, right = self.hand_joint_indices
        row = {}
        for i in range(self.body_joint_count):
            row[i] = i
        base = self.body_joint_count
        for k, j in enumerate(left + right):
            row[j] = base + k
        self.n_hand_rows = len(left) + len(right)
        base += self.n_hand_rows
        if self.jaw_joint_index is not None:
            row[self.jaw_joint_index] = base
            base += 1
        self.n_pose_rows = base
        self.pose_row = np.array(
            [row.get(i, -1) for i in range(self.n_joints)], dtype=int
        )
        if len(row) != len(set(row.values())):
            raise ModelMismatch("a joint is assigned more than one pose row")

    def _build_prior(self, mean, precision):
        # default mean is the neutral pose (stacked identity 6D rows): a
        # zero-vector mean would pull unobserved rows into degenerate 6D
        # encodings during optimization
        dim = (self.body_joint_count + self.n_hand_rows) * 6
        if mean is None:
            self.pose_prior_mean = np.tile(
                IDENTITY_6D, self.body_joint_count + self.n_hand_rows
            )
        else:
            self.pose_prior_mean = as_float_array(mean, "pose_prior.mean", (dim,))
        if precision is None:
            self.pose_prior_precision = np.ones(dim)  # diagonal
        else:
            prec = np.asarray(precision, dtype=float)
            if prec.shape not in ((dim,), (dim, dim)):
                raise ModelMismatch(f"pose prior precision must be ({dim},) or ({dim},{dim})")
            self.pose_prior_precision = prec

    # -- queries -----------------------------------------------------------

    def subset(self, key: str) -> list[int]:
        if key not in self.subsets:
            raise ModelMismatch(f"model has no subset named {key!r}")
        return self.subsets[key]

    def joint_index(self, name: str) -> int:
        if name not in self.name_to_index:
            raise ModelMismatch(f"model has no joint named {name!r}")
        return self.name_to_index[name]

    def hand_joints(self) -> list[int]:
        return self.hand_joint_indices[0] + self.hand_joint_indices[1]

    def hand_bones(self) -> list[tuple[int, int]]:
        """Bones (parent, child) of the hand: child or parent is a hand joint.

        Includes the carpal bones into the finger roots and the phalanx
        bones into unposed fingertips. Named by the child joint.
        """
        hand = set(self.hand_joints())
        bones = []
        for child in range(1, self.n_joints):
            par = int(self.parents[child])
            if child in hand or par in hand:
                bones.append((par, child))
        return bones

    def rest_positions(self, shape=None) -> np.ndarray:
        """FK joint positions at the rest pose (optionally shaped), root at origin."""
        off = self.offsets.copy()
        if shape is not None:
            shape = as_float_array(shape, "shape", (self.shape_dim,))
            off = off + np.einsum("kbc,b->kc", self.basis, shape)
        pos = np.zeros((self.n_joints, 3))
        pos[0] = off[0]
        for k in range(1, self.n_joints):
            pos[k] = pos[self.parents[k]] + off[k]
        return pos

    def skeleton_height(self) -> float:
        """Vertical extent of the rest pose, used as an error scale."""
        pos = self.rest_positions()
        return float(pos[:, 1].max() - pos[:, 1].min())

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        prec = self.pose_prior_precision
        return {
            "name": self.name,
            "shape_dim": self.shape_dim,
            "expr_dim": self.expr_dim,
            "body_joint_count": self.body_joint_count,
            "hand_joint_indices": {
                "left": self.hand_joint_indices[0],
                "right": self.hand_joint_indices[1],
            },
            "jaw_joint_index": self.jaw_joint_index,
            "joints": [
                {
                    "name": j.name,
                    "parent": j.parent,
                    "rest_offset": np.asarray(j.rest_offset).tolist(),
                    "shape_basis": np.asarray(j.shape_basis).tolist(),
                }
                for j in self.joints
            ],
            "subsets": self.subsets,
            "bend_axes": self.bend_axes,
            "pose_prior": {
                "mean": self.pose_prior_mean.tolist(),
                "precision": prec.tolist(),
            },
            "pose_limits": {k: list(v) for k, v in self.pose_limits.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonModel":
        joints = [
            Joint(
                name=j["name"],
                parent=j["parent"],
                rest_offset=np.asarray(j["rest_offset"], dtype=float),
                shape_basis=np.asarray(j["shape_basis"], dtype=float),
            )
            for j in d["joints"]
        ]
        prior = d.get("pose_prior") or {}
        return cls(
            joints=joints,
            body_joint_count=d["body_joint_count"],
            hand_joint_indices=(
                d["hand_joint_indices"]["left"],
                d["hand_joint_indices"]["right"],
            ),
            jaw_joint_index=d.get("jaw_joint_index"),
            subsets=d.get("subsets", {}),
            bend_axes=d.get("bend_axes"),
            pose_prior_mean=prior.get("mean"),
            pose_prior_precision=prior.get("precision"),
            pose_limits={k: tuple(v) for k, v in d.get("pose_limits", {}).items()},
            shape_dim=d.get("shape_dim", 10),
            expr_dim=d.get("expr_dim", 10),
            name=d.get("name", "skeleton"),
        )


def load_skeleton(path) -> SkeletonModel:
    with open(path, "r", encoding="utf-8") as fh:
        return SkeletonModel.from_dict(json.load(fh))


def save_skeleton(model: SkeletonModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


# ---------------------------------------------------------------------------
# Motion state containers


@dataclass
class MotionState:
    """Pose of one frame. ``shape`` is shared (same object) across a sequence.

    ``theta_b``/``theta_f`` are None in the hand-only variant.
    """

    theta_b: np.ndarray | None  # (body_joint_count, 6)
    theta_h: np.ndarray  # (n_hand_rows, 6)
    theta_f: np.ndarray | None  # (6,)
    expr: np.ndarray  # (expr_dim,), carried through I/O, inert in fitting
    shape: np.ndarray  # (shape_dim,), shared per sequence
    trans: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 2.0]))

    def validate(self, model: SkeletonModel) -> None:
        def chk(arr, want, label):
            if arr is None:
                if want and want[0]:
                    raise ModelMismatch(f"{label}: expected shape {want}, got None")
                return
            a = np.asarray(arr)
            if a.shape != want:
                raise ModelMismatch(f"{label}: expected shape {want}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ModelMismatch(f"{label}: non-finite entries")

        if model.body_joint_count:
            chk(self.theta_b, (model.body_joint_count, 6), "theta_b")
        chk(self.theta_h, (model.n_hand_rows, 6), "theta_h")
        if model.jaw_joint_index is not None:
            chk(self.theta_f, (6,), "theta_f")
        chk(self.expr, (len(np.asarray(self.expr)),), "expr")
        chk(self.shape, (model.shape_dim,), "shape")
        chk(self.trans, (3,), "trans")

    def pose_rows(self, model: SkeletonModel) -> np.ndarray:
        """Stack pose parameters into the model's (n_pose_rows, 6) layout."""
        parts = []
        if model.body_joint_count:
            parts.append(np.asarray(self.theta_b, dtype=float))
        parts.append(np.asarray(self.theta_h, dtype=float))
        if model.jaw_joint_index is not None:
            parts.append(np.asarray(self.theta_f, dtype=float)[None, :])
        rows = np.concatenate(parts, axis=0)
        if rows.shape != (model.n_pose_rows, 6):
            raise ModelMismatch(
                f"pose rows {rows.shape} do not match model ({model.n_pose_rows}, 6)"
            )
        return rows


def rest_state(model: SkeletonModel, depth: float = 2.0) -> MotionState:
    """Neutral state: identity rotations, zero shape, root at the given depth."""
    shape = np.zeros(model.shape_dim)
    return MotionState(
        theta_b=np.tile(IDENTITY_6D, (model.body_joint_count, 1))
        if model.body_joint_count
        else None,
        theta_h=np.tile(IDENTITY_6D, (model.n_hand_rows, 1)),
        theta_f=IDENTITY_6D.copy() if model.jaw_joint_index is not None else None,
        expr=np.zeros(model.expr_dim),
        shape=shape,
        trans=np.array([0.0, 0.0, float(depth)]),
    )


class MotionSequence:
    """Frames sharing one shape vector, at a fixed frame rate."""

    def __init__(self, fps: float, frames: list[MotionState], handedness: str | None = None):
        if not frames:
            raise ModelMismatch("a motion sequence needs at least one frame")
        check_positive(fps, "fps")
        first = frames[0].shape
        for f in frames:
            if f.shape is not first:
                raise ModelMismatch("all frames must reference the identical shape vector")
        self.fps = float(fps)
        self.frames = frames
        self.handedness = handedness

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> np.ndarray:
        return self.frames[0].shape

    def validate(self, model: SkeletonModel) -> None:
        for f in self.frames:
            f.validate(model)

    def to_arrays(self, model: SkeletonModel):
        """(poses (T,R,6), trans (T,3), expr (T,E), shape (B,))."""
        poses = np.stack([f.pose_rows(model) for f in self.frames])
        trans = np.stack([np.asarray(f.trans, dtype=float) for f in self.frames])
        expr = np.stack([np.asarray(f.expr, dtype=float) for f in self.frames])
        return poses, trans, expr, self.shape.astype(float)

    @classmethod
    def from_arrays(cls, model: SkeletonModel, poses, trans, expr, shape, fps,
                    handedness=None) -> "MotionSequence":
        poses = np.asarray(poses, dtype=float)
        trans = np.asarray(trans, dtype=float)
        expr = np.asarray(expr, dtype=float)
        shape = np.asarray(shape, dtype=float)
        nb = model.body_joint_count
        nh = model.n_hand_rows
        frames = []
        for t in range(poses.shape[0]):
            rows = poses[t]
            frames.append(
                MotionState(
                    theta_b=rows[:nb].copy() if nb else None,
                    theta_h=rows[nb : nb + nh].copy(),
                    theta_f=rows[nb + nh].copy() if model.jaw_joint_index is not None else None,
                    expr=expr[t].copy(),
                    shape=shape,
                    trans=trans[t].copy(),
                )
            )
        return cls(fps=fps, frames=frames, handedness=handedness)


def save_motion(seq: MotionSequence, path) -> None:
    d = {
        "fps": seq.fps,
        "shape": seq.shape.tolist(),
        "frames": [
            {
                **({"theta_b": np.asarray(f.theta_b).tolist()} if f.theta_b is not None else {}),
                "theta_h": np.asarray(f.theta_h).tolist(),
                **({"theta_f": np.asarray(f.theta_f).tolist()} if f.theta_f is not None else {}),
                "expr": np.asarray(f.expr).tolist(),
                "trans": np.asarray(f.trans).tolist(),
            }
            for f in seq.frames
        ],
    }
    if seq.handedness is not None:
        d["variant"] = "hand"
        d["handedness"] = seq.handedness
    Path(path).write_text(json.dumps(d), encoding="utf-8")


def load_motion(path) -> MotionSequence:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    shape = np.asarray(d["shape"], dtype=float)
    frames = []
    for fd in d["frames"]:
        frames.append(
            MotionState(
                theta_b=np.asarray(fd["theta_b"], dtype=float) if "theta_b" in fd else None,
                theta_h=np.asarray(fd["theta_h"], dtype=float),
                theta_f=np.asarray(fd["theta_f"], dtype=float) if "theta_f" in fd else None,
                expr=np.asarray(fd.get("expr", []), dtype=float),
                shape=shape,
                trans=np.asarray(fd.get("trans", [0.0, 0.0, 2.0]), dtype=float),
            )
        )
    return MotionSequence(fps=d["fps"], frames=frames, handedness=d.get("handedness"))


# ---------------------------------------------------------------------------
# Forward kinematics


@dataclass
class FkResult:
    """Forward pass intermediates kept for the adjoint pass."""

    positions: np.ndarray  # (T, K, 3)
    glob_rot: np.ndarray  # (T, K, 3, 3)
    loc_rot: np.ndarray  # (T, R, 3, 3)
    rot_cache: tuple
    offsets: np.ndarray  # (K, 3), shaped


def fk_forward(model: SkeletonModel, poses: np.ndarray, trans: np.ndarray,
               shape: np.ndarray) -> FkResult:
    """Batched FK over T frames.

    ``poses``: (T, R, 6) pose rows; ``trans``: (T, 3); ``shape``: (B,).
    """
    T, R, six = poses.shape
    if R != model.n_pose_rows or six != 6:
        raise ModelMismatch(
            f"poses shape {poses.shape} does not match model ({model.n_pose_rows}, 6)"
        )
    loc_rot_flat, cache = _rot6d_forward(poses.reshape(T * R, 6))
    loc = loc_rot_flat.reshape(T, R, 3, 3)
    off = model.offsets + np.einsum("kbc,b->kc", model.basis, shape)

    K = model.n_joints
    pos = np.empty((T, K, 3))
    glob = np.empty((T, K, 3, 3))
    row0 = model.pose_row[0]
    pos[:, 0] = trans + off[0]
    glob[:, 0] = loc[:, row0] if row0 >= 0 else np.eye(3)
    for k in range(1, K):
        p = model.parents[k]
        gp = glob[:, p]
        pos[:, k] = pos[:, p] + np.einsum("tij,j->ti", gp, off[k])
        r = model.pose_row[k]
        glob[:, k] = gp @ loc[:, r] if r >= 0 else gp
    return FkResult(positions=pos, glob_rot=glob, loc_rot=loc, rot_cache=cache, offsets=off)


def fk_backward(model: SkeletonModel, fk: FkResult, d_positions: np.ndarray,
                d_loc_rot: np.ndarray | None = None,
                d_glob_rot: np.ndarray | None = None):
    """Adjoint FK: (d_poses (T,R,6), d_trans (T,3), d_shape (B,)).

    ``d_positions`` is dL/d(joint positions); ``d_loc_rot`` and
    ``d_glob_rot`` are optional extra adjoints from terms acting on local or
    global rotations directly.
    """
    T, K, _ = d_positions.shape
    R = model.n_pose_rows
    dpos = d_positions.copy()
    dglob = np.zeros((T, K, 3, 3)) if d_glob_rot is None else d_glob_rot.copy()
    dloc = np.zeros((T, R, 3, 3)) if d_loc_rot is None else d_loc_rot.copy()
    doff = np.zeros((K, 3))

    for k in range(K - 1, 0, -1):
        p = model.parents[k]
        gp = fk.glob_rot[:, p]
        dk = dpos[:, k]
        dpos[:, p] += dk
        dglob[:, p] += dk[:, :, None] * fk.offsets[k][None, None, :]
        doff[k] += np.einsum("tji,tj->i", gp, dk)
        r = model.pose_row[k]
        dg = dglob[:, k]
        if r >= 0:
            dloc[:, r] += np.einsum("tji,tjk->tik", gp, dg)
            dglob[:, p] += np.einsum("tik,tjk->tij", dg, fk.loc_rot[:, r])
        else:
            dglob[:, p] += dg

    d_trans = dpos[:, 0].copy()
    doff[0] += dpos[:, 0].sum(axis=0)
    row0 = model.pose_row[0]
    if row0 >= 0:
        dloc[:, row0] += dglob[:, 0]

    d_poses = _rot6d_backward(fk.rot_cache, dloc.reshape(T * R, 3, 3)).reshape(T, R, 6)
    d_shape = np.einsum("kbc,kc->b", model.basis, doff)
    return d_poses, d_trans, d_shape


def forward_kinematics(model: SkeletonModel, state: MotionState) -> np.ndarray:
    """3D joint positions (K, 3) in meters for a single motion state."""
    state.validate(model)
    poses = state.pose_rows(model)[None, :, :]
    trans = np.asarray(state.trans, dtype=float)[None, :]
    fk = fk_forward(model, poses, trans, np.asarray(state.shape, dtype=float))
    return fk.positions[0]


# ---------------------------------------------------------------------------
# Default skeleton asset


def _mirror(v):
    return [-v[0], v[1], v[2]]


_FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# Left-hand chain offsets from the wrist, meters; +x is the subject's left,
# +y points down, -z toward the camera. Palms face down (+y) in the rest pose.
_LEFT_HAND = {
    "thumb1": [0.025, 0.012, -0.028],
    "thumb2": [0.030, 0.010, -0.020],
    "thumb3": [0.028, 0.008, -0.015],
    "thumb_tip": [0.026, 0.006, -0.012],
    "index1": [0.095, 0.0, -0.025],
    "index2": [0.038, 0.0, -0.002],
    "index3": [0.024, 0.0, -0.001],
    "index_tip": [0.022, 0.0, 0.0],
    "middle1": [0.098, 0.0, -0.003],
    "middle2": [0.042, 0.0, 0.0],
    "middle3": [0.027, 0.0, 0.0],
    "middle_tip": [0.024, 0.0, 0.0],
    "ring1": [0.092, 0.0, 0.018],
    "ring2": [0.038, 0.0, 0.002],
    "ring3": [0.025, 0.0, 0.001],
    "ring_tip": [0.022, 0.0, 0.0],
    "pinky1": [0.085, 0.0, 0.038],
    "pinky2": [0.030, 0.0, 0.004],
    "pinky3": [0.021, 0.0, 0.002],
    "pinky_tip": [0.019, 0.0, 0.001],
}

# (name, parent name, offset) for the 23 posed body joints.
_BODY = [
    ("pelvis", None, [0.0, 0.0, 0.0]),
    ("left_hip", "pelvis", [0.09, 0.02, 0.0]),
    ("right_hip", "pelvis", [-0.09, 0.02, 0.0]),
    ("spine1", "pelvis", [0.0, -0.12, 0.0]),
    ("left_knee", "left_hip", [0.015, 0.42, 0.0]),
    ("right_knee", "right_hip", [-0.015, 0.42, 0.0]),
    ("spine2", "spine1", [0.0, -0.14, 0.0]),
    ("left_ankle", "left_knee", [0.0, 0.43, 0.0]),
    ("right_ankle", "right_knee", [0.0, 0.43, 0.0]),
    ("spine3", "spine2", [0.0, -0.14, 0.0]),
    ("left_foot", "left_ankle", [0.01, 0.06, -0.13]),
    ("right_foot", "right_ankle", [-0.01, 0.06, -0.13]),
    ("neck", "spine3", [0.0, -0.15, 0.0]),
    ("left_collar", "spine3", [0.08, -0.03, 0.0]),
    ("right_collar", "spine3", [-0.08, -0.03, 0.0]),
    ("head", "neck", [0.0, -0.10, 0.0]),
    ("left_shoulder", "left_collar", [0.10, 0.0, 0.0]),
    ("right_shoulder", "right_collar", [-0.10, 0.0, 0.0]),
    ("left_elbow", "left_shoulder", [0.26, 0.0, 0.0]),
    ("right_elbow", "right_shoulder", [-0.26, 0.0, 0.0]),
    ("left_wrist", "left_elbow", [0.25, 0.0, 0.0]),
    ("right_wrist", "right_elbow", [-0.25, 0.0, 0.0]),
    ("head_top", "head", [0.0, -0.15, 0.0]),
]

_FACE = [
    ("jaw", "head", [0.0, 0.03, -0.06]),
    ("left_eye", "head", [0.033, -0.02, -0.08]),
    ("right_eye", "head", [-0.033, -0.02, -0.08]),
    ("chin", "jaw", [0.0, 0.035, -0.04]),
]

# Shape components: (scale factor per unit, joint-name predicate).
_SHAPE_COMPONENTS = [
    (0.05, lambda n: True),  # stature
    (0.08, lambda n: n.startswith("spine") or n == "neck"),  # torso length
    (0.08, lambda n: n.endswith(("shoulder", "elbow", "wrist"))),  # arm length
    (0.08, lambda n: n.endswith(("knee", "ankle"))),  # leg length
    (0.08, lambda n: n.endswith(("collar", "shoulder"))),  # shoulder width
    (0.08, lambda n: any(f in n for f in _FINGERS)),  # hand size
    (0.08, lambda n: n in ("head", "head_top", "jaw", "chin", "left_eye", "right_eye")),
    (0.08, lambda n: n.endswith("hip")),  # hip width
    (0.10, lambda n: any(n.endswith(f"{f}{k}") or n.endswith(f"{f}_tip") for f in _FINGERS for k in "23")),
]

# Palm arch: cup or splay the palm by moving the finger root joints out of
# the palm plane (the one shape direction not parallel to a rest offset).
_PALM_ARCH = {"index1": 0.008, "pinky1": 0.008, "middle1": -0.008, "ring1": -0.008}


def _shape_basis_for(name: str, offset, shape_dim: int) -> np.ndarray:
    basis = np.zeros((shape_dim, 3))
    off = np.asarray(offset, dtype=float)
    for b, (scale, pred) in enumerate(_SHAPE_COMPONENTS[: min(shape_dim, 9)]):
        if pred(name):
            basis[b] = scale * off
    if shape_dim >= 10:
        for key, dy in _PALM_ARCH.items():
            if name.endswith(key):
                basis[9] = [0.0, dy, 0.0]
    return basis


def default_skeleton(shape_dim: int = 10, expr_dim: int = 10) -> SkeletonModel:
    """Built-in 67-joint holistic skeleton asset.

    23 posed body joints (row 0 = global orientation), 15 posed joints per
    hand, a posed jaw, and 13 unposed landmark joints (fingertips, eyes,
    chin). Lengths are meters; the subject faces the -z direction.
    """
    entries: list[tuple[str, str | None, list[float]]] = list(_BODY)
    for side, sgn in (("left", 1), ("right", -1)):
        for finger in _FINGERS:
            for part in ("1", "2", "3"):
                key = f"{finger}{part}"
                parent = f"{side}_wrist" if part == "1" else f"{side}_{finger}{int(part)-1}"
                off = _LEFT_HAND[key] if sgn > 0 else _mirror(_LEFT_HAND[key])
                entries.append((f"{side}_{key}", parent, off))
    entries.extend(_FACE)
    for side, sgn in (("left", 1), ("right", -1)):
        for finger in _FINGERS:
            off = _LEFT_HAND[f"{finger}_tip"] if sgn > 0 else _mirror(_LEFT_HAND[f"{finger}_tip"])
            entries.append((f"{side}_{finger}_tip", f"{side}_{finger}3", off))

    name_to_idx = {name: i for i, (name, _, _) in enumerate(entries)}
    joints = [
        Joint(
            name=name,
            parent=None if parent is None else name_to_idx[parent],
            rest_offset=np.asarray(off, dtype=float),
            shape_basis=_shape_basis_for(name, off, shape_dim),
        )
        for name, parent, off in entries
    ]

    def idx(*names):
        return [name_to_idx[n] for n in names]

    def hand(side):
        return idx(*[f"{side}_{f}{k}" for f in _FINGERS for k in "123"])

    subsets = {
        "smooth_body": idx("spine1", "spine2", "spine3", "left_wrist", "right_wrist"),
        "smooth_hand": idx(*[f"{s}_{f}3" for s in ("left", "right") for f in _FINGERS]),
        "angle_body": idx(
            "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
            "left_knee", "right_knee",
        ),
        "angle_hand": hand("left") + hand("right"),
        "bend": idx("left_elbow", "right_elbow", "left_knee", "right_knee"),
        # Ordered so the summed cross products of consecutive root bones
        # point toward the palmar side (+y at rest, palms down).
        "palm_root_left": idx("left_pinky1", "left_ring1", "left_middle1", "left_index1"),
        "palm_root_right": idx("right_index1", "right_middle1", "right_ring1", "right_pinky1"),
    }
    bend_axes = {
        "left_elbow": [0.0, -1.0, 0.0],
        "right_elbow": [0.0, 1.0, 0.0],
        "left_knee": [-1.0, 0.0, 0.0],
        "right_knee": [-1.0, 0.0, 0.0],
    }
    pose_limits: dict[str, tuple[float, float]] = {}
    for i in subsets["angle_body"]:
        pose_limits[entries[i][0]] = (0.0, 2.8)
    for i in subsets["angle_hand"]:
        pose_limits[entries[i][0]] = (0.0, 1.9)

    model = SkeletonModel(
        joints=joints,
        body_joint_count=23,
        hand_joint_indices=(hand("left"), hand("right")),
        jaw_joint_index=name_to_idx["jaw"],
        subsets=subsets,
        bend_axes=bend_axes,
        pose_limits=pose_limits,
        shape_dim=shape_dim,
        expr_dim=expr_dim,
        name="default-67",
    )
    return model


def default_hand_skeleton(handedness: str = "left", shape_dim: int = 10) -> SkeletonModel:
    """Hand-only skeleton (wrist root + 15 posed joints + 5 fingertips).

    The wrist takes the first hand pose row as its global orientation, so
    frames carry only ``theta_h`` (16 rows) plus the shared shape.
    """
    if handedness not in ("left", "right"):
        raise ModelMismatch("handedness must be 'left' or 'right'")
    sgn = 1 if handedness == "left" else -1
    entries: list[tuple[str, str | None, list[float]]] = [("wrist", None, [0.0, 0.0, 0.0])]
    for finger in _FINGERS:
        for part in ("1", "2", "3"):
            parent = "wrist" if part == "1" else f"{finger}{int(part)-1}"
            off = _LEFT_HAND[f"{finger}{part}"]
            entries.append((f"{finger}{part}", parent, off if sgn > 0 else _mirror(off)))
    for finger in _FINGERS:
        off = _LEFT_HAND[f"{finger}_tip"]
        entries.append((f"{finger}_tip", f"{finger}3", off if sgn > 0 else _mirror(off)))

    name_to_idx = {name: i for i, (name, _, _) in enumerate(entries)}
    joints = [
        Joint(
            name=name,
            parent=None if parent is None else name_to_idx[parent],
            rest_offset=np.asarray(off, dtype=float),
            shape_basis=_shape_basis_for(name, off, shape_dim),
        )
        for name, parent, off in entries
    ]
    roots = ["pinky1", "ring1", "middle1", "index1"]
    if handedness == "right":
        roots = roots[::-1]
    all_hand = [name_to_idx[f"{f}{k}"] for f in _FINGERS for k in "123"]
    subsets = {
        "smooth_body": [],
        "smooth_hand": [name_to_idx[f"{f}3"] for f in _FINGERS],
        "angle_body": [],
        "angle_hand": all_hand,
        "bend": [],
        f"palm_root_{handedness}": [name_to_idx[r] for r in roots],
    }
    return SkeletonModel(
        joints=joints,
        body_joint_count=0,
        hand_joint_indices=([0] + all_hand, []) if handedness == "left" else ([], [0] + all_hand),
        jaw_joint_index=None,
        subsets=subsets,
        pose_limits={entries[i][0]: (0.0, 1.9) for i in all_hand},
        shape_dim=shape_dim,
        expr_dim=0,
        name=f"hand-{handedness}",
    )
