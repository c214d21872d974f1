"""Fitting energy: robust 2D reprojection plus pose, shape, smoothness,
angle-limit, and biomechanical hand regularizers, all with exact gradients.

Every term function returns ``(value, grads)`` where ``grads`` is a dict
with ``poses`` (T, R, 6), ``trans`` (T, 3) and ``shape`` (B,) arrays.
:func:`total_objective` additionally returns the per-term breakdown.
Gradients are hand-derived reverse-mode passes through the kinematic chain;
the test suite verifies them against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body_model import (
    FkResult,
    MotionSequence,
    SkeletonModel,
    fk_backward,
    fk_forward,
    project,
    project_backward,
    rotation_angle,
    rotation_vector,
    rotation_vector_backward,
    IDENTITY_6D,
)
from .errors import DegenerateBone, DegenerateHull, LimitsIncomplete, ModelMismatch
from .geometry import (
    convex_hull_2d,
    hull_distance,
    interval_penalty,
    interval_penalty_array,
    closest_point_on_hull,
)
from .keypoints import KeypointSequence, ResolvedKeypoints, resolve_layout

__all__ = [
    "ObjectiveWeights",
    "BiomechanicalLimits",
    "default_limits",
    "load_limits",
    "save_limits",
    "interval_penalty",
    "convex_hull_2d",
    "hull_distance",
    "reprojection_loss",
    "pose_prior",
    "bending_prior",
    "shape_prior",
    "smooth_loss",
    "angle_limit_loss",
    "flexion_abduction",
    "bio_loss",
    "total_objective",
    "ObjectiveContext",
    "build_context",
    "evaluate",
]


@dataclass
class ObjectiveWeights:
    """Influence weights of the energy terms plus robustifier settings.

    ``gm_sigma`` is the Geman-McClure scale in pixels (None for plain
    squared error); ``bending_gain`` the exponential gain of the
    elbow/knee bending prior.
    """

    lambda_j: float = 1.0
    lambda_theta: float = 1e-4
    lambda_alpha: float = 0.1
    lambda_beta: float = 1.0
    lambda_smooth: float = 25.0
    lambda_angle: float = 0.5
    lambda_bl: float = 100.0
    lambda_palm: float = 10.0
    lambda_ja: float = 1.0
    w_body: float = 1.0
    w_hand: float = 1.0
    gm_sigma: float | None = 100.0
    bending_gain: float = 1.0

    def __post_init__(self):
        for name in (
            "lambda_j", "lambda_theta", "lambda_alpha", "lambda_beta",
            "lambda_smooth", "lambda_angle", "lambda_bl", "lambda_palm",
            "lambda_ja", "w_body", "w_hand",
        ):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ModelMismatch(f"weight {name} must be finite and nonnegative")

    def to_dict(self) -> dict:
        return {
            "lambda_j": self.lambda_j,
            "lambda_theta": self.lambda_theta,
            "lambda_alpha": self.lambda_alpha,
            "lambda_beta": self.lambda_beta,
            "lambda_smooth": self.lambda_smooth,
            "lambda_angle": self.lambda_angle,
            "lambda_bl": self.lambda_bl,
            "lambda_palm": self.lambda_palm,
            "lambda_ja": self.lambda_ja,
            "w_body": self.w_body,
            "w_hand": self.w_hand,
            "gm_sigma": self.gm_sigma,
            "bending_gain": self.bending_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveWeights":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


# ---------------------------------------------------------------------------
# Biomechanical limits


@dataclass
class BiomechanicalLimits:
    """Name-keyed limit tables, loadable from a JSON limits file.

    ``bone_intervals`` are keyed by the bone's child joint name (meters);
    ``curvature_intervals`` / ``angular_distance_intervals`` are per hand,
    one interval per consecutive root-bone pair / per root bone (radians);
    ``angle_hulls`` map finger joint names to CCW (flexion, abduction)
    polygons; ``pose_angle_intervals`` bound the per-row rotation angles
    used by the angle-limit term.
    """

    bone_intervals: dict[str, tuple[float, float]] = field(default_factory=dict)
    curvature_intervals: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    angular_distance_intervals: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    angle_hulls: dict[str, np.ndarray] = field(default_factory=dict)
    pose_angle_intervals: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (lo, hi) in {**self.bone_intervals, **self.pose_angle_intervals}.items():
            if lo > hi:
                raise ModelMismatch(f"limit interval for {name!r} has min > max")
        for table in (self.curvature_intervals, self.angular_distance_intervals):
            for hand, intervals in table.items():
                for lo, hi in intervals:
                    if lo > hi:
                        raise ModelMismatch(f"palm interval for {hand!r} has min > max")
        for name, hull in self.angle_hulls.items():
            hull = np.asarray(hull, dtype=float)
            if hull.ndim != 2 or hull.shape[0] < 3 or hull.shape[1] != 2:
                raise DegenerateHull(f"hull for {name!r} must be at least 3 2D points")
            for i in range(len(hull)):
                a, b, c = hull[i - 1], hull[i], hull[(i + 1) % len(hull)]
                if (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) <= 0:
                    raise DegenerateHull(f"hull for {name!r} is not counterclockwise convex")
            self.angle_hulls[name] = hull

    def to_dict(self) -> dict:
        return {
            "bone_intervals": {k: list(v) for k, v in self.bone_intervals.items()},
            "curvature_intervals": {
                k: [list(x) for x in v] for k, v in self.curvature_intervals.items()
            },
            "angular_distance_intervals": {
                k: [list(x) for x in v] for k, v in self.angular_distance_intervals.items()
            },
            "angle_hulls": {k: np.asarray(v).tolist() for k, v in self.angle_hulls.items()},
            "pose_angle_intervals": {
                k: list(v) for k, v in self.pose_angle_intervals.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiomechanicalLimits":
        return cls(
            bone_intervals={k: tuple(v) for k, v in d.get("bone_intervals", {}).items()},
            curvature_intervals={
                k: [tuple(x) for x in v] for k, v in d.get("curvature_intervals", {}).items()
            },
            angular_distance_intervals={
                k: [tuple(x) for x in v]
                for k, v in d.get("angular_distance_intervals", {}).items()
            },
            angle_hulls={
                k: np.asarray(v, dtype=float) for k, v in d.get("angle_hulls", {}).items()
            },
            pose_angle_intervals={
                k: tuple(v) for k, v in d.get("pose_angle_intervals", {}).items()
            },
        )


def load_limits(path) -> BiomechanicalLimits:
    with open(path, "r", encoding="utf-8") as fh:
        return BiomechanicalLimits.from_dict(json.load(fh))


def save_limits(limits: BiomechanicalLimits, path) -> None:
    Path(path).write_text(json.dumps(limits.to_dict()), encoding="utf-8")


# -- resolved (index-space) limit structures --------------------------------


@dataclass
class PalmSpec:
    hand: str
    wrist: int
    roots: np.ndarray  # (n_roots,) ordered so summed cross products point palmar
    curv_lo: np.ndarray
    curv_hi: np.ndarray
    angd_lo: np.ndarray
    angd_hi: np.ndarray


@dataclass
class ResolvedLimits:
    bone_parent: np.ndarray
    bone_child: np.ndarray
    bone_lo: np.ndarray
    bone_hi: np.ndarray
    palms: list[PalmSpec]
    ja_joint: np.ndarray
    ja_child: np.ndarray
    ja_parent: np.ndarray
    ja_frames: np.ndarray  # (n_ja, 3, 3), columns = bone x, in-palm y, palmar z
    ja_hulls: list[np.ndarray]
    angle_rows: np.ndarray
    angle_lo: np.ndarray
    angle_hi: np.ndarray


def _palm_subsets(model: SkeletonModel) -> list[tuple[str, list[int]]]:
    out = []
    for hand in ("left", "right"):
        key = f"palm_root_{hand}"
        if key in model.subsets and model.subsets[key]:
            out.append((hand, model.subsets[key]))
    return out


def _rest_palm_normal(model: SkeletonModel, rest: np.ndarray, roots: list[int]) -> np.ndarray:
    wrist = int(model.parents[roots[0]])
    u = rest[roots] - rest[wrist]
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    m = np.zeros(3)
    for i in range(len(roots) - 1):
        m += np.cross(u[i], u[i + 1])
    n = np.linalg.norm(m)
    if n < 1e-9:
        raise DegenerateBone("palm root bones are collinear; no palm normal")
    return m / n


def _ja_joints(model: SkeletonModel) -> list[int]:
    """Hand joints with a child bone and a parent to attach the frame to."""
    return [
        j for j in model.hand_joints()
        if model.children[j] and model.parents[j] >= 0
    ]


def _hand_of(model: SkeletonModel, joint: int) -> str:
    return "left" if joint in model.hand_joint_indices[0] else "right"


def _flexion_frames(model: SkeletonModel, joints: list[int]) -> np.ndarray:
    """Constant per-joint frames from the unshaped rest pose.

    Column x is the rest bone direction, column z the palmar normal
    orthogonalized against it, y = z cross x.
    """
    rest = model.rest_positions()
    normals = {}
    for hand, roots in _palm_subsets(model):
        normals[hand] = _rest_palm_normal(model, rest, roots)
    frames = np.zeros((len(joints), 3, 3))
    for i, j in enumerate(joints):
        child = model.children[j][0]
        x = rest[child] - rest[j]
        nx = np.linalg.norm(x)
        if nx < 1e-9:
            raise DegenerateBone(f"zero-length bone at joint {model.names[j]!r}")
        x = x / nx
        hand = _hand_of(model, j)
        if hand not in normals:
            raise LimitsIncomplete(f"no palm root subset to orient joint {model.names[j]!r}")
        n = normals[hand]
        z = n - (n @ x) * x
        nz = np.linalg.norm(z)
        if nz < 1e-9:
            raise DegenerateBone(f"palm normal parallel to bone at {model.names[j]!r}")
        z = z / nz
        frames[i] = np.stack([x, np.cross(z, x), z], axis=-1)
    return frames


def resolve_limits(model: SkeletonModel, limits: BiomechanicalLimits) -> ResolvedLimits:
    """Index-space view of the limit tables; raises
    :class:`LimitsIncomplete` naming any missing bone/joint entry.
    """
    bones = model.hand_bones()
    lo, hi = [], []
    for par, child in bones:
        name = model.names[child]
        if name not in limits.bone_intervals:
            raise LimitsIncomplete(f"no bone interval for {name!r}")
        a, b = limits.bone_intervals[name]
        lo.append(a)
        hi.append(b)

    palms = []
    for hand, roots in _palm_subsets(model):
        if hand not in limits.curvature_intervals:
            raise LimitsIncomplete(f"no curvature intervals for {hand!r} palm")
        if hand not in limits.angular_distance_intervals:
            raise LimitsIncomplete(f"no angular distance intervals for {hand!r} palm")
        curv = np.asarray(limits.curvature_intervals[hand], dtype=float)
        angd = np.asarray(limits.angular_distance_intervals[hand], dtype=float)
        if curv.shape[0] != len(roots) - 1:
            raise LimitsIncomplete(
                f"{hand} palm needs {len(roots) - 1} curvature intervals, got {curv.shape[0]}"
            )
        if angd.shape[0] != len(roots):
            raise LimitsIncomplete(
                f"{hand} palm needs {len(roots)} angular distance intervals, got {angd.shape[0]}"
            )
        wrist = int(model.parents[roots[0]])
        if any(int(model.parents[r]) != wrist for r in roots):
            raise ModelMismatch(f"{hand} palm root bones must share one parent")
        palms.append(
            PalmSpec(
                hand=hand,
                wrist=wrist,
                roots=np.asarray(roots, dtype=int),
                curv_lo=curv[:, 0],
                curv_hi=curv[:, 1],
                angd_lo=angd[:, 0],
                angd_hi=angd[:, 1],
            )
        )

    ja = _ja_joints(model)
    hulls = []
    for j in ja:
        name = model.names[j]
        if name not in limits.angle_hulls:
            raise LimitsIncomplete(f"no angle hull for joint {name!r}")
        hulls.append(np.asarray(limits.angle_hulls[name], dtype=float))
    frames = _flexion_frames(model, ja) if ja else np.zeros((0, 3, 3))

    angle_joints = model.subsets.get("angle_body", []) + model.subsets.get("angle_hand", [])
    rows, alo, ahi = [], [], []
    for j in angle_joints:
        name = model.names[j]
        if name not in limits.pose_angle_intervals:
            raise LimitsIncomplete(f"no pose angle interval for joint {name!r}")
        r = int(model.pose_row[j])
        if r < 0:
            raise ModelMismatch(f"angle-limit joint {name!r} has no pose row")
        a, b = limits.pose_angle_intervals[name]
        rows.append(r)
        alo.append(a)
        ahi.append(b)

    return ResolvedLimits(
        bone_parent=np.asarray([p for p, _ in bones], dtype=int),
        bone_child=np.asarray([c for _, c in bones], dtype=int),
        bone_lo=np.asarray(lo),
        bone_hi=np.asarray(hi),
        palms=palms,
        ja_joint=np.asarray(ja, dtype=int),
        ja_child=np.asarray([model.children[j][0] for j in ja], dtype=int),
        ja_parent=np.asarray([model.parents[j] for j in ja], dtype=int),
        ja_frames=frames,
        ja_hulls=hulls,
        angle_rows=np.asarray(rows, dtype=int),
        angle_lo=np.asarray(alo),
        angle_hi=np.asarray(ahi),
    )


def _palm_state(positions: np.ndarray, spec: PalmSpec):
    """Palm quantities for a batch of frames.

    Returns (curvatures (T, r-1), angular distances (T, r), cache).
    The palm normal is the normalized sum of consecutive root-bone cross
    products, so every quantity is invariant to rigid motion of the hand.
    """
    b = positions[:, spec.roots] - positions[:, spec.wrist][:, None, :]  # (T, r, 3)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(nb < 1e-9):
        raise DegenerateBone("zero-length palm root bone")
    u = b / nb[..., None]
    cr = np.cross(u[:, :-1], u[:, 1:])  # (T, r-1, 3)
    m = cr.sum(axis=1)
    nm = np.linalg.norm(m, axis=-1)
    if np.any(nm < 1e-9):
        raise DegenerateBone("palm root bones are collinear")
    n = m / nm[..., None]
    s = np.einsum("tij,tj->ti", cr, n)  # (T, r-1) cross . normal
    d = np.einsum("tij,tij->ti", u[:, :-1], u[:, 1:])
    curv = np.arctan2(s, d)
    sina = np.clip(np.einsum("tij,tj->ti", u, n), -1.0 + 1e-12, 1.0 - 1e-12)
    angd = np.arcsin(sina)
    cache = (b, nb, u, cr, m, nm, n, s, d, sina)
    return curv, angd, cache


def _palm_state_backward(spec: PalmSpec, cache, dcurv: np.ndarray, dangd: np.ndarray,
                         dpos: np.ndarray) -> None:
    """Accumulate palm-term adjoints into the joint-position gradient."""
    b, nb, u, cr, m, nm, n, s, d, sina = cache
    T, r, _ = u.shape
    du = np.zeros_like(u)
    dn = np.zeros_like(n)
    # curvature = atan2(s, d)
    denom = s * s + d * d
    ds = dcurv * d / denom
    dd = -dcurv * s / denom
    # s_i = (u_i x u_{i+1}) . n ; d_i = u_i . u_{i+1}
    dn += np.einsum("ti,tij->tj", ds, cr)
    du[:, :-1] += ds[..., None] * np.cross(u[:, 1:], n[:, None, :])
    du[:, 1:] += ds[..., None] * np.cross(n[:, None, :], u[:, :-1])
    du[:, :-1] += dd[..., None] * u[:, 1:]
    du[:, 1:] += dd[..., None] * u[:, :-1]
    # angular distance = asin(u_i . n)
    dsin = dangd / np.sqrt(1.0 - sina * sina)
    du += dsin[..., None] * n[:, None, :]
    dn += np.einsum("ti,tij->tj", dsin, u)
    # n = m / |m|
    dm = (dn - np.einsum("ti,ti->t", n, dn)[:, None] * n) / nm[:, None]
    # m = sum of u_i x u_{i+1}
    du[:, :-1] += np.cross(u[:, 1:], dm[:, None, :])
    du[:, 1:] += np.cross(dm[:, None, :], u[:, :-1])
    # u = b / |b|
    db = (du - np.einsum("tij,tij->ti", u, du)[..., None] * u) / nb[..., None]
    np.add.at(dpos.transpose(1, 0, 2), spec.roots, db.transpose(1, 0, 2))
    dpos[:, spec.wrist] -= db.sum(axis=1)


# ---------------------------------------------------------------------------
# Context and fused evaluation


@dataclass
class ObjectiveContext:
    """Precomputed, immutable state shared by all objective evaluations."""

    model: SkeletonModel
    cam: object | None
    weights: ObjectiveWeights
    keypoints: ResolvedKeypoints | None
    limits: ResolvedLimits | None
    slot_weight_kind: np.ndarray | None  # (S,) 0 -> body weight, 1 -> hand weight
    smooth_body_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    smooth_hand_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    body_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    hand_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    bend_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    bend_axes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    prior_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def build_context(model: SkeletonModel, cam=None, keypoints=None,
                  weights: ObjectiveWeights | None = None,
                  limits: BiomechanicalLimits | None = None) -> ObjectiveContext:
    """Resolve keypoints, limits, and subset indices against the model."""
    weights = weights or ObjectiveWeights()
    resolved_kp = None
    slot_kind = None
    if keypoints is not None:
        resolved_kp = (
            keypoints if isinstance(keypoints, ResolvedKeypoints)
            else resolve_layout(keypoints, model)
        )
        slot_kind = np.asarray(
            [1 if k in ("left_hand", "right_hand") else 0 for k in resolved_kp.kind],
            dtype=int,
        )
    resolved_lim = resolve_limits(model, limits) if limits is not None else None

    def rows_of(key):
        joints = model.subsets.get(key, [])
        rows = [int(model.pose_row[j]) for j in joints]
        if any(r < 0 for r in rows):
            raise ModelMismatch(f"subset {key!r} contains an unposed joint")
        return np.asarray(rows, dtype=int)

    bend_joints = model.subsets.get("bend", [])
    bend_axes = []
    for j in bend_joints:
        name = model.names[j]
        axis = model.bend_axes.get(name, [1.0, 0.0, 0.0])
        axis = np.asarray(axis, dtype=float)
        bend_axes.append(axis / np.linalg.norm(axis))
    nb, nh = model.body_joint_count, model.n_hand_rows
    return ObjectiveContext(
        model=model,
        cam=cam,
        weights=weights,
        keypoints=resolved_kp,
        limits=resolved_lim,
        slot_weight_kind=slot_kind,
        smooth_body_rows=rows_of("smooth_body"),
        smooth_hand_rows=rows_of("smooth_hand"),
        body_rows=np.arange(nb, dtype=int),
        hand_rows=np.arange(nb, nb + nh, dtype=int),
        bend_rows=rows_of("bend"),
        bend_axes=np.asarray(bend_axes).reshape(len(bend_joints), 3),
        prior_rows=np.arange(nb + nh, dtype=int),
    )


@dataclass
class EvalResult:
    total: float
    terms: dict[str, float]
    d_poses: np.ndarray
    d_trans: np.ndarray
    d_shape: np.ndarray


def _zero_grads(T, R, B):
    return np.zeros((T, R, 6)), np.zeros((T, 3)), np.zeros(B)


def _robustifier(e2: np.ndarray, sigma: float | None):
    """Geman-McClure rho(e^2) and d rho / d e^2 (plain squared if sigma None)."""
    if sigma is None or not np.isfinite(sigma):
        return e2, np.ones_like(e2)
    s2 = sigma * sigma
    denom = e2 + s2
    return s2 * e2 / denom, (s2 / denom) ** 2


def _reproj_piece(ctx: ObjectiveContext, fk: FkResult, w_body: float, w_hand: float):
    kp = ctx.keypoints
    pts = fk.positions[:, kp.joint_index]  # (T, S, 3)
    uv = project(pts, ctx.cam)
    delta = uv - kp.uv
    e2 = np.einsum("tsi,tsi->ts", delta, delta)
    rho, drho = _robustifier(e2, ctx.weights.gm_sigma)
    w = np.where(ctx.slot_weight_kind == 1, w_hand, w_body)[None, :] * kp.conf
    value = float(np.sum(w * rho))
    duv = (w * drho)[..., None] * 2.0 * delta
    dpts = project_backward(pts, ctx.cam, duv)
    return value, dpts


def _reproj_scatter(ctx, dpts, dpos):
    kp = ctx.keypoints
    np.add.at(dpos.transpose(1, 0, 2), kp.joint_index, dpts.transpose(1, 0, 2))


def _pose_prior_piece(ctx: ObjectiveContext, poses: np.ndarray):
    model = ctx.model
    x = poses[:, ctx.prior_rows].reshape(poses.shape[0], -1)
    delta = x - model.pose_prior_mean[None, :]
    prec = model.pose_prior_precision
    if prec.ndim == 1:
        value = float(np.sum(delta * prec[None, :] * delta))
        dx = 2.0 * prec[None, :] * delta
    else:
        pd = delta @ prec.T
        value = float(np.sum(delta * pd))
        dx = pd + delta @ prec
    dposes_rows = dx.reshape(poses.shape[0], len(ctx.prior_rows), 6)
    return value, dposes_rows


def _bending_piece(ctx: ObjectiveContext, loc_rot: np.ndarray, dloc: np.ndarray):
    if len(ctx.bend_rows) == 0:
        return 0.0
    gain = ctx.weights.bending_gain
    R = loc_rot[:, ctx.bend_rows]
    vec, cache = rotation_vector(R)
    kappa = np.einsum("tbi,bi->tb", vec, ctx.bend_axes)
    e = np.exp(gain * kappa)
    value = float(e.sum())
    dvec = (gain * e)[..., None] * ctx.bend_axes[None, :, :]
    dR = rotation_vector_backward(cache, dvec)
    np.add.at(dloc.transpose(1, 0, 2, 3), ctx.bend_rows, dR.transpose(1, 0, 2, 3))
    return value


def _smooth_piece(ctx: ObjectiveContext, poses: np.ndarray, dposes: np.ndarray):
    value = 0.0
    ident = IDENTITY_6D
    for rows in (ctx.smooth_body_rows, ctx.smooth_hand_rows):
        if len(rows) == 0:
            continue
        dev = poses[:, rows] - ident[None, None, :]
        value += float(np.sum(dev * dev))
        np.add.at(dposes.transpose(1, 0, 2), rows, 2.0 * dev.transpose(1, 0, 2))
    for rows in (ctx.hand_rows, ctx.body_rows):
        if len(rows) == 0 or poses.shape[0] < 2:
            continue
        vel = poses[1:, rows] - poses[:-1, rows]
        value += float(np.sum(vel * vel))
        dposes[1:, rows] += 2.0 * vel
        dposes[:-1, rows] -= 2.0 * vel
    return value


def _angle_piece(ctx: ObjectiveContext, loc_rot: np.ndarray, dloc: np.ndarray):
    lim = ctx.limits
    if lim is None or len(lim.angle_rows) == 0:
        return 0.0
    R = loc_rot[:, lim.angle_rows]
    tr = np.einsum("tjii->tj", R)
    c = np.clip((tr - 1.0) / 2.0, -1.0 + 1e-12, 1.0 - 1e-12)
    phi = np.arccos(c)
    pen, dpen = interval_penalty_array(phi, lim.angle_lo[None, :], lim.angle_hi[None, :])
    value = float(pen.sum())
    active = dpen != 0.0
    if active.any():
        s = np.sqrt(1.0 - c * c)
        dc = np.where(active, dpen * (-1.0 / s), 0.0)
        dR = np.zeros_like(R)
        half = 0.5 * dc
        for i in range(3):
            dR[..., i, i] = half
        np.add.at(dloc.transpose(1, 0, 2, 3), lim.angle_rows, dR.transpose(1, 0, 2, 3))
    return value


def _bone_piece(ctx: ObjectiveContext, positions: np.ndarray, dpos: np.ndarray):
    lim = ctx.limits
    if lim is None or len(lim.bone_child) == 0:
        return 0.0
    v = positions[:, lim.bone_child] - positions[:, lim.bone_parent]
    length = np.linalg.norm(v, axis=-1)
    pen, dpen = interval_penalty_array(length, lim.bone_lo[None, :], lim.bone_hi[None, :])
    value = float(pen.sum())
    dv = (dpen / np.maximum(length, 1e-12))[..., None] * v
    np.add.at(dpos.transpose(1, 0, 2), lim.bone_child, dv.transpose(1, 0, 2))
    np.add.at(dpos.transpose(1, 0, 2), lim.bone_parent, -dv.transpose(1, 0, 2))
    return value


def _palm_piece(ctx: ObjectiveContext, positions: np.ndarray, dpos: np.ndarray):
    lim = ctx.limits
    if lim is None or not lim.palms:
        return 0.0
    value = 0.0
    for spec in lim.palms:
        curv, angd, cache = _palm_state(positions, spec)
        pen_c, dpen_c = interval_penalty_array(curv, spec.curv_lo[None, :], spec.curv_hi[None, :])
        pen_a, dpen_a = interval_penalty_array(angd, spec.angd_lo[None, :], spec.angd_hi[None, :])
        value += float(pen_c.sum() + pen_a.sum())
        if np.any(dpen_c != 0.0) or np.any(dpen_a != 0.0):
            _palm_state_backward(spec, cache, dpen_c, dpen_a, dpos)
    return value


def _ja_piece(ctx: ObjectiveContext, fk: FkResult, dpos: np.ndarray, dglob: np.ndarray):
    lim = ctx.limits
    if lim is None or len(lim.ja_joint) == 0:
        return 0.0
    pos = fk.positions
    w = pos[:, lim.ja_child] - pos[:, lim.ja_joint]  # (T, n, 3)
    nw = np.linalg.norm(w, axis=-1)
    if np.any(nw < 1e-9):
        j = int(np.argwhere(nw < 1e-9)[0][1])
        raise DegenerateBone(f"zero-length bone at joint {ctx.model.names[lim.ja_joint[j]]!r}")
    what = w / nw[..., None]
    M = fk.glob_rot[:, lim.ja_parent] @ lim.ja_frames[None, :, :, :]  # (T, n, 3, 3)
    d = np.einsum("tnji,tnj->tni", M, what)  # frame-local bone direction
    af = np.arctan2(d[..., 2], d[..., 0])
    aa = np.arctan2(d[..., 1], d[..., 0])
    T, n = af.shape
    value = 0.0
    dd = np.zeros_like(d)
    for i in range(n):
        hull = lim.ja_hulls[i]
        # vectorized inside test over all frames for this joint
        pts = np.stack([af[:, i], aa[:, i]], axis=1)  # (T, 2)
        a = hull
        b = np.roll(hull, -1, axis=0)
        eb = b - a
        cross = (
            eb[None, :, 0] * (pts[:, None, 1] - a[None, :, 1])
            - eb[None, :, 1] * (pts[:, None, 0] - a[None, :, 0])
        )
        tol = 1e-12 * (1.0 + np.abs(hull).max())
        outside = np.nonzero(~np.all(cross >= -tol, axis=1))[0]
        for t in outside:
            p = pts[t]
            q = closest_point_on_hull(p, hull)
            diff = p - q
            value += float(diff @ diff)
            gaf, gaa = 2.0 * diff
            dx, dy, dz = d[t, i]
            r2f = dx * dx + dz * dz
            r2a = dx * dx + dy * dy
            dd[t, i, 2] += gaf * dx / r2f
            dd[t, i, 0] += -gaf * dz / r2f
            dd[t, i, 1] += gaa * dx / r2a
            dd[t, i, 0] += -gaa * dy / r2a
    if np.any(dd != 0.0):
        dwhat = np.einsum("tnij,tnj->tni", M, dd)
        dM = what[..., :, None] * dd[..., None, :]
        dglob_ja = np.einsum("tnik,njk->tnij", dM, lim.ja_frames)
        np.add.at(dglob.transpose(1, 0, 2, 3), lim.ja_parent, dglob_ja.transpose(1, 0, 2, 3))
        dw = (dwhat - np.einsum("tni,tni->tn", what, dwhat)[..., None] * what) / nw[..., None]
        np.add.at(dpos.transpose(1, 0, 2), lim.ja_child, dw.transpose(1, 0, 2))
        np.add.at(dpos.transpose(1, 0, 2), lim.ja_joint, -dw.transpose(1, 0, 2))
    return value


def evaluate(ctx: ObjectiveContext, poses: np.ndarray, trans: np.ndarray,
             shape: np.ndarray, w_body: float | None = None,
             w_hand: float | None = None) -> EvalResult:
    """Fused evaluation of the full energy with gradients.

    One FK forward pass feeds every term; position/rotation adjoints are
    accumulated and pushed through a single FK backward pass.
    """
    w = ctx.weights
    w_body = w.w_body if w_body is None else w_body
    w_hand = w.w_hand if w_hand is None else w_hand
    T, R, _ = poses.shape
    model = ctx.model

    fk = fk_forward(model, poses, trans, shape)
    dpos = np.zeros((T, model.n_joints, 3))
    dglob = np.zeros((T, model.n_joints, 3, 3))
    dloc = np.zeros((T, R, 3, 3))
    dposes_direct = np.zeros((T, R, 6))

    terms: dict[str, float] = {}

    if ctx.keypoints is not None and w.lambda_j != 0.0:
        val, dpts = _reproj_piece(ctx, fk, w_body, w_hand)
        terms["reproj"] = val
        _reproj_scatter(ctx, w.lambda_j * dpts, dpos)
    else:
        terms["reproj"] = 0.0

    val, drows = _pose_prior_piece(ctx, poses)
    terms["pose_prior"] = val
    if w.lambda_theta != 0.0:
        np.add.at(
            dposes_direct.transpose(1, 0, 2), ctx.prior_rows,
            w.lambda_theta * drows.transpose(1, 0, 2),
        )

    dloc_b = np.zeros_like(dloc)
    terms["bending"] = _bending_piece(ctx, fk.loc_rot, dloc_b)
    dloc += w.lambda_alpha * dloc_b

    terms["shape_prior"] = float(shape @ shape)
    d_shape_direct = 2.0 * w.lambda_beta * shape

    dposes_s = np.zeros_like(dposes_direct)
    terms["smooth"] = _smooth_piece(ctx, poses, dposes_s)
    dposes_direct += w.lambda_smooth * dposes_s

    dloc_a = np.zeros_like(dloc)
    terms["angle"] = _angle_piece(ctx, fk.loc_rot, dloc_a)
    dloc += w.lambda_angle * dloc_a

    dpos_bl = np.zeros_like(dpos)
    terms["bio_bl"] = _bone_piece(ctx, fk.positions, dpos_bl)
    dpos += w.lambda_bl * dpos_bl

    dpos_palm = np.zeros_like(dpos)
    terms["bio_palm"] = _palm_piece(ctx, fk.positions, dpos_palm)
    dpos += w.lambda_palm * dpos_palm

    dpos_ja = np.zeros_like(dpos)
    dglob_ja = np.zeros_like(dglob)
    terms["bio_ja"] = _ja_piece(ctx, fk, dpos_ja, dglob_ja)
    dpos += w.lambda_ja * dpos_ja
    dglob += w.lambda_ja * dglob_ja

    d_poses, d_trans, d_shape = _fk_backward_with_glob(model, fk, dpos, dloc, dglob)
    d_poses += dposes_direct
    d_shape += d_shape_direct

    total = (
        w.lambda_j * terms["reproj"]
        + w.lambda_theta * terms["pose_prior"]
        + w.lambda_alpha * terms["bending"]
        + w.lambda_beta * terms["shape_prior"]
        + w.lambda_smooth * terms["smooth"]
        + w.lambda_angle * terms["angle"]
        + w.lambda_bl * terms["bio_bl"]
        + w.lambda_palm * terms["bio_palm"]
        + w.lambda_ja * terms["bio_ja"]
    )
    return EvalResult(total=float(total), terms=terms, d_poses=d_poses,
                      d_trans=d_trans, d_shape=d_shape)


def _fk_backward_with_glob(model, fk: FkResult, dpos, dloc, dglob):
    """FK adjoint accepting an extra dL/d(global rotation) accumulator."""
    if np.any(dglob != 0.0):
        return fk_backward(model, fk, dpos, d_loc_rot=dloc, d_glob_rot=dglob)
    return fk_backward(model, fk, dpos, d_loc_rot=dloc)


# ---------------------------------------------------------------------------
# Public per-term operations (MotionSequence interface)


def _grads(model, d_poses, d_trans, d_shape):
    return {"poses": d_poses, "trans": d_trans, "shape": d_shape}


def _seq_arrays(model: SkeletonModel, states: MotionSequence):
    poses, trans, _, shape = states.to_arrays(model)
    return poses, trans, shape


def reprojection_loss(model: SkeletonModel, cam, states: MotionSequence,
                      keypoints: KeypointSequence | ResolvedKeypoints,
                      w_body: float = 1.0, w_hand: float = 1.0,
                      gm_sigma: float | None = 100.0):
    """Confidence-weighted robust 2D reprojection energy."""
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(
        model, cam=cam, keypoints=keypoints,
        weights=ObjectiveWeights(gm_sigma=gm_sigma),
    )
    fk = fk_forward(model, poses, trans, shape)
    value, dpts = _reproj_piece(ctx, fk, w_body, w_hand)
    dpos = np.zeros((poses.shape[0], model.n_joints, 3))
    _reproj_scatter(ctx, dpts, dpos)
    d_poses, d_trans, d_shape = fk_backward(model, fk, dpos)
    return value, _grads(model, d_poses, d_trans, d_shape)


def pose_prior(model: SkeletonModel, states: MotionSequence):
    """Gaussian prior over the stacked body+hand pose rows."""
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(model)
    value, drows = _pose_prior_piece(ctx, poses)
    d_poses = np.zeros_like(poses)
    np.add.at(d_poses.transpose(1, 0, 2), ctx.prior_rows, drows.transpose(1, 0, 2))
    return value, _grads(model, d_poses, np.zeros_like(trans), np.zeros_like(shape))


def bending_prior(model: SkeletonModel, states: MotionSequence, gain: float = 1.0):
    """exp(gain * signed hinge bend) summed over the elbow/knee subset."""
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(model, weights=ObjectiveWeights(bending_gain=gain))
    fk = fk_forward(model, poses, trans, shape)
    dloc = np.zeros_like(fk.loc_rot)
    value = _bending_piece(ctx, fk.loc_rot, dloc)
    d_poses, d_trans, d_shape = fk_backward(
        model, fk, np.zeros((poses.shape[0], model.n_joints, 3)), d_loc_rot=dloc
    )
    # bending reads local rotations only; position adjoints are zero
    return value, _grads(model, d_poses, np.zeros_like(trans), np.zeros_like(shape))


def shape_prior(shape):
    """Squared norm of the shape vector and its gradient."""
    shape = np.asarray(shape, dtype=float)
    return float(shape @ shape), 2.0 * shape


def smooth_loss(model: SkeletonModel, states: MotionSequence):
    """Neutral-pose pull on the configured subsets plus first-difference
    velocity terms over the full body and hand pose rows."""
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(model)
    d_poses = np.zeros_like(poses)
    value = _smooth_piece(ctx, poses, d_poses)
    return value, _grads(model, d_poses, np.zeros_like(trans), np.zeros_like(shape))


def angle_limit_loss(model: SkeletonModel, states: MotionSequence,
                     limits: BiomechanicalLimits):
    """Interval hinge on the geodesic rotation angle of the selected rows."""
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(model, limits=limits)
    fk = fk_forward(model, poses, trans, shape)
    dloc = np.zeros_like(fk.loc_rot)
    value = _angle_piece(ctx, fk.loc_rot, dloc)
    d_poses, _, _ = fk_backward(
        model, fk, np.zeros((poses.shape[0], model.n_joints, 3)), d_loc_rot=dloc
    )
    return value, _grads(model, d_poses, np.zeros_like(trans), np.zeros_like(shape))


def flexion_abduction(model: SkeletonModel, state, finger_joint: int):
    """(flexion, abduction) angles in radians of one finger joint.

    The child-bone direction is expressed in the parent-attached rest
    frame: flexion rotates toward the palmar normal, abduction deviates
    within the palm plane.
    """
    from .body_model import MotionState  # local import to avoid cycle confusion

    if isinstance(state, MotionSequence):
        raise ModelMismatch("flexion_abduction expects a single MotionState")
    if not model.children[finger_joint]:
        raise DegenerateBone(f"joint {model.names[finger_joint]!r} has no child bone")
    ja = _ja_joints(model)
    if finger_joint not in ja:
        raise DegenerateBone(f"joint {model.names[finger_joint]!r} is not a finger joint")
    i = ja.index(finger_joint)
    frames = _flexion_frames(model, ja)
    poses = state.pose_rows(model)[None]
    fk = fk_forward(model, poses, np.asarray(state.trans, dtype=float)[None],
                    np.asarray(state.shape, dtype=float))
    child = model.children[finger_joint][0]
    wvec = fk.positions[0, child] - fk.positions[0, finger_joint]
    nw = np.linalg.norm(wvec)
    if nw < 1e-9:
        raise DegenerateBone(f"zero-length bone at joint {model.names[finger_joint]!r}")
    parent = int(model.parents[finger_joint])
    d = (fk.glob_rot[0, parent] @ frames[i]).T @ (wvec / nw)
    return float(np.arctan2(d[2], d[0])), float(np.arctan2(d[1], d[0]))


def bio_loss(model: SkeletonModel, states: MotionSequence,
             limits: BiomechanicalLimits, weights: ObjectiveWeights | None = None):
    """Weighted biomechanical energy: bone-length intervals, palm
    curvature/angular-distance intervals, and squared hull distances of the
    per-joint (flexion, abduction) pairs.

    Returns (value, grads, parts) with the unweighted per-part values.
    """
    weights = weights or ObjectiveWeights()
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(model, weights=weights, limits=limits)
    fk = fk_forward(model, poses, trans, shape)
    T = poses.shape[0]
    dpos = np.zeros((T, model.n_joints, 3))
    dglob = np.zeros((T, model.n_joints, 3, 3))

    dpos_bl = np.zeros_like(dpos)
    bl = _bone_piece(ctx, fk.positions, dpos_bl)
    dpos_palm = np.zeros_like(dpos)
    palm = _palm_piece(ctx, fk.positions, dpos_palm)
    dpos_ja = np.zeros_like(dpos)
    ja = _ja_piece(ctx, fk, dpos_ja, dglob)
    dpos = (
        weights.lambda_bl * dpos_bl
        + weights.lambda_palm * dpos_palm
        + weights.lambda_ja * dpos_ja
    )
    dglob *= weights.lambda_ja
    d_poses, d_trans, d_shape = fk_backward(
        model, fk, dpos, d_glob_rot=dglob if np.any(dglob != 0.0) else None
    )
    value = weights.lambda_bl * bl + weights.lambda_palm * palm + weights.lambda_ja * ja
    parts = {"bio_bl": bl, "bio_palm": palm, "bio_ja": ja}
    return float(value), _grads(model, d_poses, d_trans, d_shape), parts


def total_objective(model: SkeletonModel, cam, states: MotionSequence,
                    keypoints, weights: ObjectiveWeights,
                    limits: BiomechanicalLimits):
    """Full fitting energy; returns (value, terms, grads)."""
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(model, cam=cam, keypoints=keypoints, weights=weights, limits=limits)
    res = evaluate(ctx, poses, trans, shape)
    return res.total, res.terms, _grads(model, res.d_poses, res.d_trans, res.d_shape)


# ---------------------------------------------------------------------------
# Validation (pass/fail checks against the limit tables)


@dataclass
class ValidationResult:
    """Per-frame per-check table plus the summary violation rate."""

    rows: list[dict]
    n_checks: int
    n_violations: int

    @property
    def rate(self) -> float:
        return self.n_violations / self.n_checks if self.n_checks else 0.0


def validate_motion(model: SkeletonModel, states: MotionSequence,
                    limits: BiomechanicalLimits, tol: float = 1e-9) -> ValidationResult:
    """Check every frame against bone-length intervals, palm intervals,
    joint-angle hulls, and pose-angle intervals. Interval membership is
    inclusive within ``tol``.
    """
    poses, trans, shape = _seq_arrays(model, states)
    ctx = build_context(model, limits=limits)
    lim = ctx.limits
    fk = fk_forward(model, poses, trans, shape)
    T = poses.shape[0]
    rows: list[dict] = []
    violations = 0
    checks = 0

    def record(t, kind, name, value, ok):
        nonlocal violations, checks
        checks += 1
        if not ok:
            violations += 1
        rows.append({"frame": t, "check": kind, "name": name,
                     "value": float(value), "ok": bool(ok)})

    if len(lim.bone_child):
        v = fk.positions[:, lim.bone_child] - fk.positions[:, lim.bone_parent]
        length = np.linalg.norm(v, axis=-1)
        for t in range(T):
            for i, child in enumerate(lim.bone_child):
                ok = lim.bone_lo[i] - tol <= length[t, i] <= lim.bone_hi[i] + tol
                record(t, "bone_length", model.names[child], length[t, i], ok)

    for spec in lim.palms:
        curv, angd, _ = _palm_state(fk.positions, spec)
        for t in range(T):
            for i in range(curv.shape[1]):
                ok = spec.curv_lo[i] - tol <= curv[t, i] <= spec.curv_hi[i] + tol
                record(t, "palm_curvature", f"{spec.hand}[{i}]", curv[t, i], ok)
            for i in range(angd.shape[1]):
                ok = spec.angd_lo[i] - tol <= angd[t, i] <= spec.angd_hi[i] + tol
                record(t, "palm_angular_distance", f"{spec.hand}[{i}]", angd[t, i], ok)

    if len(lim.ja_joint):
        pos = fk.positions
        w = pos[:, lim.ja_child] - pos[:, lim.ja_joint]
        nw = np.linalg.norm(w, axis=-1)
        what = w / np.maximum(nw[..., None], 1e-12)
        M = fk.glob_rot[:, lim.ja_parent] @ lim.ja_frames[None, :, :, :]
        d = np.einsum("tnji,tnj->tni", M, what)
        af = np.arctan2(d[..., 2], d[..., 0])
        aa = np.arctan2(d[..., 1], d[..., 0])
        for t in range(T):
            for i, j in enumerate(lim.ja_joint):
                dist = hull_distance([af[t, i], aa[t, i]], lim.ja_hulls[i])
                record(t, "angle_hull", model.names[j], dist, dist <= tol)

    if len(lim.angle_rows):
        phi = rotation_angle(fk.loc_rot[:, lim.angle_rows])
        row_to_name = {int(model.pose_row[j]): model.names[j]
                       for j in range(model.n_joints) if model.pose_row[j] >= 0}
        for t in range(T):
            for i, r in enumerate(lim.angle_rows):
                ok = lim.angle_lo[i] - tol <= phi[t, i] <= lim.angle_hi[i] + tol
                record(t, "pose_angle", row_to_name[int(r)], phi[t, i], ok)

    return ValidationResult(rows=rows, n_checks=checks, n_violations=violations)


# ---------------------------------------------------------------------------
# Default limits asset


def default_limits(model: SkeletonModel, bone_pct: float = 0.2,
                   palm_margin: float = 0.35) -> BiomechanicalLimits:
    """Limits generated from the unshaped rest pose.

    Bone intervals are rest length +-``bone_pct``; palm curvature and
    angular distance intervals are rest value +-``palm_margin`` radians;
    angle hulls are rectangles, wider for the thumb; pose-angle intervals
    come from the model's own table.
    """
    rest = model.rest_positions()
    bone_intervals = {}
    for par, child in model.hand_bones():
        length = float(np.linalg.norm(rest[child] - rest[par]))
        bone_intervals[model.names[child]] = (length * (1 - bone_pct), length * (1 + bone_pct))

    curvature, angdist = {}, {}
    for hand, roots in _palm_subsets(model):
        pos = rest[None, :, :]
        spec = PalmSpec(
            hand=hand, wrist=int(model.parents[roots[0]]),
            roots=np.asarray(roots, dtype=int),
            curv_lo=np.zeros(len(roots) - 1), curv_hi=np.zeros(len(roots) - 1),
            angd_lo=np.zeros(len(roots)), angd_hi=np.zeros(len(roots)),
        )
        curv, angd, _ = _palm_state(pos, spec)
        curvature[hand] = [(float(c - palm_margin), float(c + palm_margin)) for c in curv[0]]
        angdist[hand] = [(float(a - palm_margin), float(a + palm_margin)) for a in angd[0]]

    rect = np.array([[-0.3, -0.35], [1.6, -0.35], [1.6, 0.35], [-0.3, 0.35]])
    thumb_rect = np.array([[-0.6, -0.7], [1.8, -0.7], [1.8, 0.7], [-0.6, 0.7]])
    hulls = {}
    for j in _ja_joints(model):
        name = model.names[j]
        hulls[name] = thumb_rect.copy() if "thumb" in name else rect.copy()

    pose_angle = {k: tuple(v) for k, v in model.pose_limits.items()}
    return BiomechanicalLimits(
        bone_intervals=bone_intervals,
        curvature_intervals=curvature,
        angular_distance_intervals=angdist,
        angle_hulls=hulls,
        pose_angle_intervals=pose_angle,
    )
