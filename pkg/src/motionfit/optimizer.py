"""Staged minimization of the fitting energy.

Adam (with per-stage cosine learning-rate decay) or L-BFGS with a
strong-Wolfe line search, run over a five-stage schedule: the first three
stages optimize poses, per-frame root translation, and the shared shape;
the shape is then frozen to the mean of its recorded iterates and the last
two stages refine poses with the hand reprojection weight raised to 2.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body_model import (
    CameraIntrinsics,
    MotionSequence,
    SkeletonModel,
    axis_angle_to_rot6d,
    fk_forward,
    rest_state,
    rot6d_to_matrix,
)
from .errors import (
    BehindCamera,
    DegenerateRotation,
    InitMismatch,
    ModelMismatch,
    MotionFitError,
    NoTrace,
    NotDescent,
)
from .keypoints import KeypointSequence, resolve_layout
from .objective import (
    BiomechanicalLimits,
    ObjectiveContext,
    ObjectiveWeights,
    _flexion_frames,
    _ja_joints,
    build_context,
    evaluate,
)

__all__ = [
    "StageSpec",
    "FitConfig",
    "FitReport",
    "StageReport",
    "AdamState",
    "adam_step",
    "line_search_strong_wolfe",
    "lbfgs_direction",
    "lbfgs_update",
    "lbfgs_step",
    "minimize_lbfgs",
    "freeze_shape_mean",
    "initialize",
    "fit_sequence",
]


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class StageSpec:
    steps: int
    optimize_shape: bool = True
    w_body: float = 1.0
    w_hand: float = 1.0
    optimizer: str | None = None  # None inherits the config-level kind

    def __post_init__(self):
        if self.steps <= 0:
            raise ModelMismatch("stage steps must be positive")
        if self.optimizer not in (None, "adam", "lbfgs"):
            raise ModelMismatch(f"unknown stage optimizer {self.optimizer!r}")


def default_stages(total_steps: int = 2000) -> list[StageSpec]:
    """Five equal stages: shape optimized for the first three with unit
    reprojection weights, then frozen while the hand weight rises to 2.

    Stage 1 runs Adam for robust global alignment; later stages default to
    the quasi-Newton refiner.
    """
    if total_steps == 0:
        return []
    per = max(1, total_steps // 5)
    last = total_steps - 4 * per
    if last <= 0:
        return [StageSpec(steps=total_steps, optimize_shape=True)]
    return [
        StageSpec(steps=per, optimize_shape=True, w_body=1.0, w_hand=1.0),
        StageSpec(steps=per, optimize_shape=True, w_body=1.0, w_hand=1.0),
        StageSpec(steps=per, optimize_shape=True, w_body=1.0, w_hand=1.0),
        StageSpec(steps=per, optimize_shape=False, w_body=1.0, w_hand=2.0),
        StageSpec(steps=last, optimize_shape=False, w_body=1.0, w_hand=2.0),
    ]


@dataclass
class LbfgsOptions:
    history: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_iters: int = 25

    def __post_init__(self):
        if not 0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0:
            raise ModelMismatch("need 0 < c1 < c2 < 1 for the Wolfe conditions")


@dataclass
class FitConfig:
    """Staged fit settings.

    The quasi-Newton refiner with a strong-Wolfe line search is the
    default step kind; plain Adam (learning rate 1e-2) is selectable
    globally or per stage.
    """

    total_steps: int = 2000
    stages: list[StageSpec] = field(default_factory=default_stages)
    optimizer_kind: str = "lbfgs"
    learning_rate: float = 1e-2
    lr_decay: str = "cosine"  # or "none"
    lbfgs: LbfgsOptions = field(default_factory=LbfgsOptions)
    convergence_tol: float = 1e-6
    seed: int = 0
    # preconditioning: the shared shape moves this much per unit optimizer
    # step relative to pose parameters, so poses converge before the shape
    # starts absorbing transient reprojection error
    shape_scale: float = 0.03

    def __post_init__(self):
        if self.optimizer_kind not in ("adam", "lbfgs"):
            raise ModelMismatch(f"unknown optimizer kind {self.optimizer_kind!r}")
        if self.lr_decay not in ("cosine", "none"):
            raise ModelMismatch(f"unknown lr decay {self.lr_decay!r}")
        if sum(s.steps for s in self.stages) != self.total_steps:
            raise ModelMismatch("stage steps must sum to total_steps")

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "stages": [
                {
                    "steps": s.steps,
                    "optimize_shape": s.optimize_shape,
                    "w_body": s.w_body,
                    "w_hand": s.w_hand,
                    "optimizer": s.optimizer,
                }
                for s in self.stages
            ],
            "optimizer_kind": self.optimizer_kind,
            "learning_rate": self.learning_rate,
            "lr_decay": self.lr_decay,
            "lbfgs": {
                "history": self.lbfgs.history,
                "wolfe_c1": self.lbfgs.wolfe_c1,
                "wolfe_c2": self.lbfgs.wolfe_c2,
                "max_line_iters": self.lbfgs.max_line_iters,
            },
            "convergence_tol": self.convergence_tol,
            "seed": self.seed,
            "shape_scale": self.shape_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        kwargs = dict(d)
        if "stages" in kwargs:
            kwargs["stages"] = [StageSpec(**s) for s in kwargs["stages"]]
        if "lbfgs" in kwargs:
            kwargs["lbfgs"] = LbfgsOptions(**kwargs["lbfgs"])
        known = {
            "total_steps", "stages", "optimizer_kind", "learning_rate",
            "lr_decay", "lbfgs", "convergence_tol", "seed", "shape_scale",
        }
        kwargs = {k: v for k, v in kwargs.items() if k in known}
        if "total_steps" in kwargs and "stages" not in kwargs:
            kwargs["stages"] = default_stages(kwargs["total_steps"])
        elif "stages" in kwargs and "total_steps" not in kwargs:
            kwargs["total_steps"] = sum(s.steps for s in kwargs["stages"])
        return cls(**kwargs)


def load_fit_config(path) -> FitConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return FitConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              t: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update (t is 1-based)."""
    if t < 1:
        raise ModelMismatch("Adam step count t must be >= 1")
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m=m, v=v)


# ---------------------------------------------------------------------------
# Strong Wolfe line search (bracket and zoom)


@dataclass
class LineSearchResult:
    alpha: float
    f: float
    grad: np.ndarray | None
    satisfied: bool
    n_evals: int


def line_search_strong_wolfe(f, x: np.ndarray, direction: np.ndarray,
                             f0: float | None = None, g0: np.ndarray | None = None,
                             c1: float = 1e-4, c2: float = 0.9,
                             max_iters: int = 25, alpha0: float = 1.0,
                             alpha_max: float = 1e6) -> LineSearchResult:
    """Find a step length satisfying the strong Wolfe conditions.

    ``f(x)`` must return ``(value, gradient)``; a value of +inf marks an
    infeasible trial point and shrinks the bracket. Raises
    :class:`NotDescent` when ``direction`` is not a descent direction.
    When the iteration budget runs out, the best Armijo-feasible step found
    is returned with ``satisfied=False``.
    """
    if f0 is None or g0 is None:
        f0, g0 = f(x)
    dphi0 = float(g0 @ direction)
    if not dphi0 < 0.0:
        raise NotDescent(f"directional derivative {dphi0:.3e} is not negative")

    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        val, grad = f(x + a * direction)
        dval = float(grad @ direction) if np.isfinite(val) else np.inf
        return val, dval, grad

    def zoom(lo, phi_lo, dphi_lo, hi, phi_hi, budget):
        best = (lo, phi_lo, None)
        for _ in range(budget):
            # quadratic interpolation with bisection fallback
            denom = 2.0 * (phi_hi - phi_lo - dphi_lo * (hi - lo))
            if np.isfinite(phi_hi) and abs(denom) > 1e-30:
                a = lo - dphi_lo * (hi - lo) ** 2 / denom
                span = abs(hi - lo)
                if not (min(lo, hi) + 0.1 * span <= a <= max(lo, hi) - 0.1 * span):
                    a = 0.5 * (lo + hi)
            else:
                a = 0.5 * (lo + hi)
            fa, da, ga = phi(a)
            if fa > f0 + c1 * a * dphi0 or fa >= phi_lo:
                hi, phi_hi = a, fa
            else:
                if abs(da) <= -c2 * dphi0:
                    return LineSearchResult(a, fa, ga, True, evals)
                if da * (hi - lo) >= 0.0:
                    hi, phi_hi = lo, phi_lo
                lo, phi_lo, dphi_lo = a, fa, da
                best = (a, fa, ga)
        return LineSearchResult(best[0], best[1], best[2], False, evals)

    a_prev, phi_prev, dphi_prev = 0.0, f0, dphi0
    alpha = float(alpha0)
    for i in range(1, max_iters + 1):
        fa, da, ga = phi(alpha)
        if fa > f0 + c1 * alpha * dphi0 or (i > 1 and fa >= phi_prev):
            return zoom(a_prev, phi_prev, dphi_prev, alpha, fa, max_iters)
        if abs(da) <= -c2 * dphi0:
            return LineSearchResult(alpha, fa, ga, True, evals)
        if da >= 0.0:
            return zoom(alpha, fa, da, a_prev, phi_prev, max_iters)
        a_prev, phi_prev, dphi_prev = alpha, fa, da
        if alpha >= alpha_max:
            break
        alpha = min(2.0 * alpha, alpha_max)
    return LineSearchResult(a_prev, phi_prev, None, False, evals)


# ---------------------------------------------------------------------------
# L-BFGS


def lbfgs_direction(history: list[tuple[np.ndarray, np.ndarray, float]],
                    grad: np.ndarray) -> np.ndarray:
    """Two-loop recursion; steepest descent when the history is empty."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    if history:
        s, y, _ = history[-1]
        gamma = float(s @ y) / float(y @ y)
        q *= gamma
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_update(history: list, s: np.ndarray, y: np.ndarray,
                 max_history: int = 10) -> list:
    """Append an (s, y) pair when the curvature guard s.y > 1e-10 holds."""
    sy = float(s @ y)
    if sy > 1e-10:
        history = history + [(s, y, 1.0 / sy)]
        if len(history) > max_history:
            history = history[-max_history:]
    return history


def lbfgs_step(history: list, grad: np.ndarray,
               max_history: int = 10) -> tuple[np.ndarray, list]:
    """Search direction for the current gradient plus the (unchanged)
    history; pair with :func:`lbfgs_update` after the step is taken."""
    return lbfgs_direction(history, grad), history


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    converged: bool
    wolfe_satisfied_all: bool


def minimize_lbfgs(f, x0: np.ndarray, max_iters: int = 200, tol: float = 1e-10,
                   options: LbfgsOptions | None = None) -> MinimizeResult:
    """L-BFGS driver with strong-Wolfe line search.

    ``f(x)`` returns (value, gradient).
    """
    opt = options or LbfgsOptions()
    x = np.asarray(x0, dtype=float).copy()
    fx, g = f(x)
    history: list = []
    all_wolfe = True
    it = 0
    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return MinimizeResult(x, fx, gnorm, it - 1, True, all_wolfe)
        d, history = lbfgs_step(history, g, opt.history)
        if float(g @ d) >= 0.0:  # safeguard: reset to steepest descent
            history = []
            d = -g
        ls = line_search_strong_wolfe(
            f, x, d, f0=fx, g0=g, c1=opt.wolfe_c1, c2=opt.wolfe_c2,
            max_iters=opt.max_line_iters,
        )
        all_wolfe = all_wolfe and ls.satisfied
        x_new = x + ls.alpha * d
        if ls.grad is None:
            f_new, g_new = f(x_new)
        else:
            f_new, g_new = ls.f, ls.grad
        history = lbfgs_update(history, x_new - x, g_new - g, opt.history)
        x, fx, g = x_new, f_new, g_new
    return MinimizeResult(x, fx, float(np.linalg.norm(g)), it, False, all_wolfe)


# ---------------------------------------------------------------------------
# Shape freezing and initialization


def freeze_shape_mean(shape_trace) -> np.ndarray:
    """Element-wise mean of the recorded shape iterates."""
    trace = np.asarray(shape_trace, dtype=float)
    if trace.size == 0:
        raise NoTrace("cannot freeze shape from an empty trace")
    return trace.mean(axis=0)


def initialize(model: SkeletonModel, cam: CameraIntrinsics,
               keypoints: KeypointSequence, init: MotionSequence | None = None,
               fps: float = 25.0, default_depth: float = 2.0) -> MotionSequence:
    """Initial motion sequence for fitting.

    With an initialization sequence: validated and used as-is. Otherwise a
    rest-pose sequence whose root translation comes from a closed-form
    depth/offset fit aligning the mean projected rest joints with the mean
    detected keypoints.
    """
    T = len(keypoints.frames)
    if init is not None:
        if len(init.frames) != T:
            raise InitMismatch(
                f"initialization has {len(init.frames)} frames, keypoints have {T}"
            )
        init.validate(model)
        return init

    resolved = resolve_layout(keypoints, model)
    rest = model.rest_positions()  # root at origin
    obs = resolved.conf > 0.0
    trans = np.array([0.0, 0.0, float(default_depth)])
    # scale from torso joints whose mutual geometry is nearly pose-invariant;
    # limb joints would bias the depth estimate whenever the pose differs
    # from the rest pose
    stable = {
        "pelvis", "left_hip", "right_hip", "spine1", "spine2", "spine3",
        "neck", "head", "left_collar", "right_collar",
    }
    keep = np.asarray(
        [n in stable for n in resolved.slot_names]
        if resolved.slot_names
        else [True] * len(resolved.joint_index),
        dtype=bool,
    )
    if keep.sum() < 4 or not obs[:, keep].any():
        keep = np.ones(len(resolved.joint_index), dtype=bool)
    resolved_uv = resolved.uv[:, keep]
    obs = obs[:, keep]
    joint_index = resolved.joint_index[keep]
    if obs.any():
        pts = rest[joint_index]  # (S, 3)
        w = obs.sum(axis=0).astype(float)  # per-slot observation counts
        total = w.sum()
        mx = (pts[:, 0] * w).sum() / total
        my = (pts[:, 1] * w).sum() / total
        sm = np.sqrt(
            (
                w * ((cam.fx * (pts[:, 0] - mx)) ** 2 + (cam.fy * (pts[:, 1] - my)) ** 2)
            ).sum()
            / total
        )
        u = resolved_uv[..., 0][obs] - cam.cx
        v = resolved_uv[..., 1][obs] - cam.cy
        mu, mv = u.mean(), v.mean()
        si = np.sqrt(((u - mu) ** 2 + (v - mv) ** 2).mean())
        if si > 1e-9 and sm > 1e-9:
            tz = float(np.clip(sm / si, 0.3, 50.0))
        else:
            tz = float(default_depth)
        trans = np.array([mu * tz / cam.fx - mx, mv * tz / cam.fy - my, tz])

    base = rest_state(model, depth=default_depth)
    shape = base.shape
    frames = []
    for _ in range(T):
        st = rest_state(model, depth=default_depth)
        st.shape = shape
        st.trans = trans.copy()
        frames.append(st)
    seq = MotionSequence(fps=fps, frames=frames)
    _align_limb_directions(model, cam, seq, resolved)
    return seq


# limb chains aligned to detected 2D directions during initialization;
# entries are (joint to rotate, child whose bone is aligned)
_ALIGN_CHAINS = [
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
]


def _minimal_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation matrix taking unit vector a to unit vector b (no twist)."""
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(a @ b)
    if s < 1e-12:
        return np.eye(3) if c > 0 else -np.eye(3) + 2.0 * np.outer(a, a)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / (s * s))


def _align_limb_directions(model, cam, seq: MotionSequence, resolved) -> None:
    """Point major limb bones along the detected 2D directions and bias
    hinge joints toward natural flexion, in place.

    The 2D alignment leaves bone depth neutral; the flexion bias then
    starts hinge joints on the anatomically plausible side of the
    depth-flip ambiguity instead of exactly on its ridge.
    """
    slot_of = {}
    for i, name in enumerate(resolved.slot_names):
        slot_of.setdefault(name, i)

    # natural-curl axes for the posed finger joints, from the rest geometry
    finger_rows: list[tuple[int, np.ndarray]] = []
    try:
        ja = _ja_joints(model)
        frames_ja = _flexion_frames(model, ja)
        for i, j in enumerate(ja):
            row = int(model.pose_row[j])
            if row >= 0:
                axis = np.cross(frames_ja[i][:, 0], frames_ja[i][:, 2])
                finger_rows.append((row, axis / np.linalg.norm(axis)))
    except MotionFitError:  # hand-less or palm-less models: skip the curl
        finger_rows = []

    for t, st in enumerate(seq.frames):
        rows = st.pose_rows(model)[None]
        for parent_name, child_name in _ALIGN_CHAINS:
            if parent_name not in model.name_to_index or child_name not in model.name_to_index:
                continue
            sp, sc = slot_of.get(parent_name), slot_of.get(child_name)
            if sp is None or sc is None:
                continue
            if resolved.conf[t, sp] <= 0 or resolved.conf[t, sc] <= 0:
                continue
            duv = resolved.uv[t, sc] - resolved.uv[t, sp]
            n = np.linalg.norm(duv)
            if n < 1e-6:
                continue
            target = np.array([duv[0] / cam.fx, duv[1] / cam.fy, 0.0])
            target /= np.linalg.norm(target)
            j = model.name_to_index[parent_name]
            cidx = model.name_to_index[child_name]
            fk = fk_forward(model, rows, np.asarray(st.trans)[None],
                              np.asarray(st.shape, dtype=float))
            p = int(model.parents[j])
            Rp = fk.glob_rot[0, j]  # global rotation at the joint itself
            # current world direction of the bone out of joint j
            off = fk.offsets[cidx]
            cur = Rp @ off
            cn = np.linalg.norm(cur)
            if cn < 1e-9:
                continue
            A = _minimal_rotation(cur / cn, target)
            Rpar = fk.glob_rot[0, p] if p >= 0 else np.eye(3)
            row = int(model.pose_row[j])
            if row < 0:
                continue
            Rloc_new = Rpar.T @ A @ Rp
            rows[0, row] = np.concatenate([Rloc_new[:, 0], Rloc_new[:, 1]])
        # natural flexion bias on hinge joints and fingers
        for j in model.subsets.get("bend", []):
            row = int(model.pose_row[j])
            if row < 0:
                continue
            axis = np.asarray(model.bend_axes.get(model.names[j], [1.0, 0, 0]), dtype=float)
            axis /= np.linalg.norm(axis)
            bend = rot6d_to_matrix(axis_angle_to_rot6d(axis, -0.25))
            Rcur = rot6d_to_matrix(rows[0, row])
            Rnew = Rcur @ bend
            rows[0, row] = np.concatenate([Rnew[:, 0], Rnew[:, 1]])
        for row, axis in finger_rows:
            rows[0, row] = axis_angle_to_rot6d(axis, 0.3)
        nb = model.body_joint_count
        if st.theta_b is not None:
            st.theta_b = rows[0, :nb].copy()
        st.theta_h = rows[0, nb : nb + model.n_hand_rows].copy()


# ---------------------------------------------------------------------------
# Staged fitting


@dataclass
class StageReport:
    index: int
    steps_planned: int
    steps_run: int
    optimize_shape: bool
    w_body: float
    w_hand: float
    early_stopped: bool
    loss_trace: list[dict]
    shape_trace: np.ndarray
    grad_norm_final: float
    shape_start: np.ndarray | None = None
    shape_end: np.ndarray | None = None


@dataclass
class FitReport:
    stages: list[StageReport]
    motion: MotionSequence
    frozen_shape: np.ndarray | None
    total_steps_run: int
    wall_time_s: float
    seed: int
    config: FitConfig

    def to_json_dict(self, include_timing: bool = False) -> dict:
        d = {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "total_steps_run": self.total_steps_run,
            "frozen_shape": None if self.frozen_shape is None else self.frozen_shape.tolist(),
            "stages": [
                {
                    "index": s.index,
                    "steps_planned": s.steps_planned,
                    "steps_run": s.steps_run,
                    "optimize_shape": s.optimize_shape,
                    "w_body": s.w_body,
                    "w_hand": s.w_hand,
                    "early_stopped": s.early_stopped,
                    "grad_norm_final": s.grad_norm_final,
                    "shape_start": None if s.shape_start is None else s.shape_start.tolist(),
                    "shape_end": None if s.shape_end is None else s.shape_end.tolist(),
                    "shape_constant": bool(
                        s.shape_trace.size
                        and np.all(s.shape_trace == s.shape_trace[0])
                    ),
                    "loss_trace": s.loss_trace,
                }
                for s in self.stages
            ],
        }
        if include_timing:
            d["wall_time_s"] = self.wall_time_s
        return d


class _Problem:
    """Flat parameter vector view over (poses, trans[, shape]).

    The shape block is stored as beta / shape_scale so a unit optimizer
    move changes beta by only shape_scale units (preconditioning).
    """

    def __init__(self, ctx: ObjectiveContext, T: int, shape: np.ndarray,
                 shape_scale: float = 1.0):
        self.ctx = ctx
        self.T = T
        self.R = ctx.model.n_pose_rows
        self.B = ctx.model.shape_dim
        self.n_pose = T * self.R * 6
        self.n_trans = T * 3
        self.shape = shape
        self.shape_scale = float(shape_scale)

    def pack(self, poses, trans, shape, with_shape):
        parts = [poses.ravel(), trans.ravel()]
        if with_shape:
            parts.append(shape / self.shape_scale)
        return np.concatenate(parts)

    def unpack(self, x, with_shape):
        poses = x[: self.n_pose].reshape(self.T, self.R, 6)
        trans = x[self.n_pose : self.n_pose + self.n_trans].reshape(self.T, 3)
        if with_shape:
            shape = x[self.n_pose + self.n_trans :] * self.shape_scale
        else:
            shape = self.shape
        return poses, trans, shape

    def value_grad(self, x, with_shape, w_body, w_hand):
        poses, trans, shape = self.unpack(x, with_shape)
        res = evaluate(self.ctx, poses, trans, shape, w_body=w_body, w_hand=w_hand)
        g = [res.d_poses.ravel(), res.d_trans.ravel()]
        if with_shape:
            g.append(res.d_shape * self.shape_scale)
        return res, np.concatenate(g)


def fit_sequence(model: SkeletonModel, cam: CameraIntrinsics,
                 keypoints: KeypointSequence, weights: ObjectiveWeights,
                 limits: BiomechanicalLimits, config: FitConfig,
                 init: MotionSequence | None = None,
                 fps: float = 25.0) -> FitReport:
    """Run the staged fit and return the report with the final motion.

    Deterministic: identical inputs and seed give identical output.
    """
    t_start = time.perf_counter()
    ctx = build_context(model, cam=cam, keypoints=keypoints, weights=weights, limits=limits)
    start = initialize(model, cam, keypoints, init=init, fps=fps)
    poses, trans, expr, shape = start.to_arrays(model)
    T = poses.shape[0]
    prob = _Problem(ctx, T, shape.copy(), shape_scale=config.shape_scale)

    stage_reports: list[StageReport] = []
    shape_record: list[np.ndarray] = []
    frozen: np.ndarray | None = None
    total_run = 0
    seen_shape_stage = False

    for idx, stage in enumerate(config.stages):
        if not stage.optimize_shape and seen_shape_stage and frozen is None:
            if shape_record:
                frozen = freeze_shape_mean(np.stack(shape_record))
                prob.shape = frozen.copy()
        with_shape = stage.optimize_shape
        x = prob.pack(poses, trans, prob.shape, with_shape)
        shape_start = prob.shape.copy()

        adam = AdamState.zeros(x.size)
        history: list = []
        trace: list[dict] = []
        stage_shapes: list[np.ndarray] = []
        early = False
        gnorm = np.nan
        steps_run = 0
        kind = stage.optimizer or config.optimizer_kind
        cache: dict = {"key": None}

        def fg(xv):
            try:
                r, g = prob.value_grad(xv, with_shape, stage.w_body, stage.w_hand)
            except (BehindCamera, DegenerateRotation):
                return np.inf, np.zeros_like(xv)
            cache["key"] = xv.tobytes()
            cache["res"] = r
            cache["g"] = g
            return r.total, g

        def eval_with_context(xv, step):
            try:
                return prob.value_grad(xv, with_shape, stage.w_body, stage.w_hand)
            except MotionFitError as e:
                raise type(e)(f"stage {idx + 1} step {step}: {e}") from e

        res, g = eval_with_context(x, 0)
        stalled = 0
        for k in range(stage.steps):
            gnorm = float(np.linalg.norm(g))
            trace.append(
                {"step": total_run + k, "total": res.total, **res.terms,
                 "grad_norm": gnorm}
            )
            _, _, cur_shape = prob.unpack(x, with_shape)
            stage_shapes.append(cur_shape.copy())
            if with_shape:
                shape_record.append(cur_shape.copy())
            if gnorm < config.convergence_tol or stalled >= 3:
                early = True
                steps_run = k + 1
                break
            if kind == "adam":
                if config.lr_decay == "cosine":
                    lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * k / stage.steps))
                else:
                    lr = config.learning_rate
                x, adam = adam_step(x, g, adam, lr=lr, t=k + 1)
                res, g = eval_with_context(x, k + 1)
            else:
                d, history = lbfgs_step(history, g, config.lbfgs.history)
                if float(g @ d) >= 0.0:
                    history = []
                    d = -g
                ls = line_search_strong_wolfe(
                    fg, x, d, f0=res.total, g0=g,
                    c1=config.lbfgs.wolfe_c1, c2=config.lbfgs.wolfe_c2,
                    max_iters=config.lbfgs.max_line_iters,
                )
                x_new = x + ls.alpha * d
                if cache["key"] == x_new.tobytes():
                    res_new, g_new = cache["res"], cache["g"]
                else:
                    res_new, g_new = eval_with_context(x_new, k + 1)
                # count consecutive steps with no meaningful decrease so
                # the stage can stop instead of grinding futile searches
                if res.total - res_new.total <= 1e-12 * max(1.0, abs(res.total)):
                    stalled += 1
                else:
                    stalled = 0
                history = lbfgs_update(history, x_new - x, g_new - g, config.lbfgs.history)
                x, res, g = x_new, res_new, g_new
            steps_run = k + 1

        poses, trans, new_shape = prob.unpack(x, with_shape)
        poses = poses.copy()
        trans = trans.copy()
        if with_shape:
            prob.shape = new_shape.copy()
            seen_shape_stage = True
        total_run += steps_run
        stage_reports.append(
            StageReport(
                index=idx + 1,
                steps_planned=stage.steps,
                steps_run=steps_run,
                optimize_shape=stage.optimize_shape,
                w_body=stage.w_body,
                w_hand=stage.w_hand,
                early_stopped=early,
                loss_trace=trace,
                shape_trace=np.stack(stage_shapes) if stage_shapes else np.zeros((0, prob.B)),
                grad_norm_final=gnorm,
                shape_start=shape_start,
                shape_end=prob.shape.copy(),
            )
        )

    final_shape = prob.shape.copy()
    motion = MotionSequence.from_arrays(model, poses, trans, expr, final_shape, fps)
    return FitReport(
        stages=stage_reports,
        motion=motion,
        frozen_shape=frozen,
        total_steps_run=total_run,
        wall_time_s=time.perf_counter() - t_start,
        seed=config.seed,
        config=config,
    )


def save_report(report: FitReport, path, include_timing: bool = False) -> None:
    Path(path).write_text(
        json.dumps(report.to_json_dict(include_timing=include_timing)), encoding="utf-8"
    )
