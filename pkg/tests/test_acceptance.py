"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
report. The heavy synthetic round-trips share module-scoped fixtures.
"""

import json
import time

import numpy as np
import pytest

from motionfit.body_model import fk_forward, load_motion
from motionfit.cli import main
from motionfit.geometry import (
    convex_hull_2d,
    hull_distance,
    interval_penalty_grad,
)
from motionfit.keypoints import parse_keypoints, resolve_layout
from motionfit.metrics import (
    FeatureItem,
    FeatureSet,
    JointSequence,
    dtw_mje,
    fid,
    fid_from_moments,
    r_precision,
)
from motionfit.objective import (
    ObjectiveWeights,
    angle_limit_loss,
    bending_prior,
    bio_loss,
    pose_prior,
    reprojection_loss,
    smooth_loss,
    total_objective,
    validate_motion,
)
from motionfit.optimizer import minimize_lbfgs
from motionfit.quantize import (
    Codebook,
    decode_from_indices,
    encode_to_indices,
    next_index_xent,
    quantize_nearest,
    vq_loss,
)
from motionfit.synthesis import default_camera, keypoints_from_motion, synthesize_motion, project_motion
from motionfit import default_skeleton

from conftest import random_sequence
from gradcheck import grad_vector, pack, seq_from_vector
from test_geometry import brute_force_hull, sampled_boundary_distance
from test_metrics import brute_force_dtw
from test_objective import tight_limits


def report(criterion: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion:02d} [{name}]: {status} {detail}")
    assert ok, f"criterion {criterion} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# Shared synthetic round-trip fixtures


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept_synth")
    code = main([
        "synth", "--out-dir", str(d), "--frames", "30", "--seed", "1",
        "--noise", "2.0",
    ])
    assert code == 0
    return d


@pytest.fixture(scope="module")
def noiseless_fit(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_fit")
    t0 = time.perf_counter()
    code = main([
        "fit",
        "--keypoints", str(synth_dir / "keypoints.jsonl"),
        "--model", str(synth_dir / "model.json"),
        "--camera", str(synth_dir / "camera.json"),
        "--limits", str(synth_dir / "limits.json"),
        "--layout", str(synth_dir / "layout.json"),
        "--out", str(out / "motion.json"),
        "--report", str(out / "report.json"),
        "--seed", "0",
    ])
    wall = time.perf_counter() - t0
    assert code == 0
    return out, wall


def _mean_errors(synth_dir, motion_path):
    model = default_skeleton()
    gt = load_motion(synth_dir / "motion_gt.json")
    fit = load_motion(motion_path)
    cam = default_camera()
    kp = parse_keypoints(synth_dir / "keypoints.jsonl")
    kp.group_layout = json.loads((synth_dir / "layout.json").read_text())
    res = resolve_layout(kp, model)
    uv_fit = project_motion(model, cam, fit)
    err2d = np.linalg.norm(uv_fit[:, res.joint_index] - res.uv, axis=-1).mean()
    pg, tg, _, sg = gt.to_arrays(model)
    pf, tf, _, sf = fit.to_arrays(model)
    e3 = np.linalg.norm(
        fk_forward(model, pg, tg, sg).positions - fk_forward(model, pf, tf, sf).positions,
        axis=-1,
    ).mean()
    return float(err2d), float(e3), model.skeleton_height()


# ---------------------------------------------------------------------------
# 1. Gradient correctness


def test_criterion_01_gradients(model, camera):
    t0 = time.perf_counter()
    lim = tight_limits(model, angle_hi=0.05, hull_half=0.05, bone_pct=0.02,
                       palm_margin=0.01)
    weights = ObjectiveWeights()
    target = keypoints_from_motion(model, camera, synthesize_motion(model, T=5, seed=99))

    def term_fns():
        return {
            "reprojection": lambda s: reprojection_loss(model, camera, s, target),
            "pose_prior": lambda s: pose_prior(model, s),
            "bending": lambda s: bending_prior(model, s),
            "shape_prior": lambda s: _shape_term(model, s),
            "smooth": lambda s: smooth_loss(model, s),
            "angle": lambda s: angle_limit_loss(model, s, lim),
            "bio": lambda s: _bio_term(model, s, lim),
            "total": lambda s: _total_term(model, camera, s, target, weights, lim),
        }

    def _shape_term(model, s):
        from motionfit.objective import shape_prior

        val, gshape = shape_prior(s.shape)
        poses, trans, _, shape = s.to_arrays(model)
        return val, {"poses": np.zeros_like(poses), "trans": np.zeros_like(trans),
                     "shape": gshape}

    def _bio_term(model, s, lim):
        val, grads, _ = bio_loss(model, s, lim)
        return val, grads

    def _total_term(model, camera, s, target, weights, lim):
        val, _, grads = total_objective(model, camera, s, target, weights, lim)
        return val, grads

    eps = 1e-5
    n_configs = 100
    worst = 0.0
    checked = 0
    for cfg_i in range(n_configs):
        seq = random_sequence(model, T=5, seed=1000 + cfg_i, pose_noise=0.18,
                              shape_noise=0.25)
        poses, trans, _, shape = seq.to_arrays(model)
        x0 = pack(poses, trans, shape)
        rng = np.random.default_rng(5000 + cfg_i)
        d = rng.normal(0, 1, x0.shape)
        d /= np.linalg.norm(d)
        for name, fn in term_fns().items():
            _, grads = fn(seq)
            an = float(grad_vector(grads) @ d)
            fp, _ = fn(seq_from_vector(model, x0 + eps * d, 5))
            fm, _ = fn(seq_from_vector(model, x0 - eps * d, 5))
            fd = (fp - fm) / (2 * eps)
            if abs(fd) < 1e-9 and abs(an) < 1e-9:
                continue
            rel = abs(an - fd) / max(abs(an), abs(fd))
            worst = max(worst, rel)
            checked += 1
            assert rel < 1e-4, f"{name} config {cfg_i}: rel err {rel:.2e}"
    wall = time.perf_counter() - t0
    report(1, "gradient correctness", wall < 60.0 and checked > 500,
           f"(worst rel err {worst:.2e} over {checked} checks, {wall:.1f}s)")


# ---------------------------------------------------------------------------
# 2. Synthetic round-trip, noiseless


def test_criterion_02_roundtrip_noiseless(synth_dir, noiseless_fit):
    out, wall = noiseless_fit
    err2d, err3d, height = _mean_errors(synth_dir, out / "motion.json")
    ok = err2d < 0.5 and err3d < 0.01 * height and wall < 300.0
    report(2, "noiseless round-trip", ok,
           f"(2D {err2d:.3f} px, 3D {100 * err3d / height:.3f}% of height, {wall:.0f}s)")


# ---------------------------------------------------------------------------
# 3. Synthetic round-trip, noisy


def test_criterion_03_roundtrip_noisy(synth_dir, tmp_path):
    model = default_skeleton()
    cfg_smooth = tmp_path / "smoothless.json"
    cfg_smooth.write_text(json.dumps({"weights": {"lambda_smooth": 0.0}}))
    fits = {}
    for name, extra in (("staged", []), ("unsmoothed", ["--config", str(cfg_smooth)])):
        out = tmp_path / f"{name}.json"
        code = main([
            "fit",
            "--keypoints", str(synth_dir / "keypoints_noisy.jsonl"),
            "--model", str(synth_dir / "model.json"),
            "--camera", str(synth_dir / "camera.json"),
            "--limits", str(synth_dir / "limits.json"),
            "--layout", str(synth_dir / "layout.json"),
            "--out", str(out), "--seed", "0", *extra,
        ])
        assert code == 0
        fits[name] = load_motion(out)

    err2d, _, _ = _mean_errors(synth_dir, tmp_path / "staged.json")

    from motionfit.objective import load_limits

    limits = load_limits(synth_dir / "limits.json")
    val = validate_motion(model, fits["staged"], limits)

    def mean_velocity(motion):
        poses, _, _, _ = motion.to_arrays(model)
        return float(np.abs(np.diff(poses, axis=0)).mean())

    v_staged = mean_velocity(fits["staged"])
    v_plain = mean_velocity(fits["unsmoothed"])
    ok = err2d <= 3.0 and val.rate <= 0.01 and v_staged <= v_plain
    report(3, "noisy round-trip", ok,
           f"(2D {err2d:.3f} px, violations {val.rate:.4%}, "
           f"velocity {v_staged:.4f} vs {v_plain:.4f})")


# ---------------------------------------------------------------------------
# 4. Stage schedule contract


def test_criterion_04_stage_schedule(noiseless_fit):
    out, _ = noiseless_fit
    rep = json.loads((out / "report.json").read_text())
    w_hand = [s["w_hand"] for s in rep["stages"]]
    total_planned = rep["config"]["total_steps"]
    frozen = rep["frozen_shape"]
    post = rep["stages"][3:]
    shapes_ok = all(
        s["shape_constant"] and s["shape_start"] == frozen and s["shape_end"] == frozen
        for s in post
    )
    ok = w_hand == [1, 1, 1, 2, 2] and total_planned == 2000 and shapes_ok
    report(4, "stage schedule", ok,
           f"(w_hand {w_hand}, total {total_planned}, post-freeze constant {shapes_ok})")


# ---------------------------------------------------------------------------
# 5. Optimizer benchmarks


def test_criterion_05_optimizer_benchmarks():
    def rosenbrock(x):
        f = (1 - x[0]) ** 2 + 100.0 * (x[1] - x[0] ** 2) ** 2
        g = np.array([
            -2 * (1 - x[0]) - 400.0 * x[0] * (x[1] - x[0] ** 2),
            200.0 * (x[1] - x[0] ** 2),
        ])
        return float(f), g

    res = minimize_lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iters=200, tol=1e-12)
    ok = res.f < 1e-6 and res.wolfe_satisfied_all
    report(5, "optimizer benchmarks", ok,
           f"(rosenbrock f {res.f:.2e} in {res.iterations} iters, "
           f"all Wolfe {res.wolfe_satisfied_all})")


# ---------------------------------------------------------------------------
# 6. Geometry oracles


def test_criterion_06_geometry_oracles():
    rng = np.random.default_rng(606)
    for _ in range(200):
        pts = rng.normal(0, 1, (50, 2))
        hull = convex_hull_2d(pts)
        oracle = brute_force_hull(pts)
        got = {tuple(np.round(p, 12)) for p in hull}
        want = {tuple(np.round(p, 12)) for p in oracle}
        assert got == want

    worst = 0.0
    n_checked = 0
    for _ in range(30):
        hull = convex_hull_2d(rng.normal(0, 1, (15, 2)))
        p = rng.normal(0, 2.0, 2)
        d = hull_distance(p, hull)
        if d == 0.0:
            continue
        d_oracle = sampled_boundary_distance(p, hull)
        worst = max(worst, abs(d - d_oracle))
        n_checked += 1
        assert abs(d - d_oracle) < 1e-6

    eps = 1e-9
    c1_ok = True
    for lo, hi in ((0.0, 1.0), (-2.5, 0.3)):
        for edge in (lo, hi):
            d_in = interval_penalty_grad(edge, lo, hi)
            d_below = interval_penalty_grad(edge - eps, lo, hi)
            d_above = interval_penalty_grad(edge + eps, lo, hi)
            c1_ok = c1_ok and abs(d_below - d_in) < 1e-8 and abs(d_above - d_in) < 1e-8
    report(6, "geometry oracles", c1_ok and n_checked >= 10,
           f"(hulls 200/200, distance worst gap {worst:.2e} over {n_checked}, C1 {c1_ok})")


# ---------------------------------------------------------------------------
# 7. DTW oracle


def test_criterion_07_dtw_oracle():
    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(200):
        t1, t2 = rng.integers(1, 7), rng.integers(1, 7)
        a = rng.normal(0, 1, (t1, 3, 3))
        b = rng.normal(0, 1, (t2, 3, 3))
        got = dtw_mje(JointSequence(fps=25, frames=a), JointSequence(fps=25, frames=b))
        cost = np.linalg.norm(a[:, None] - b[None, :], axis=-1).mean(axis=-1)
        want = brute_force_dtw(cost)
        worst = max(worst, abs(got - want))
        assert got == pytest.approx(want, rel=1e-12)
    s = JointSequence(fps=25, frames=rng.normal(0, 1, (8, 4, 3)))
    self_zero = dtw_mje(s, s) == 0.0
    report(7, "dtw oracle", self_zero, f"(200 pairs, worst gap {worst:.2e})")


# ---------------------------------------------------------------------------
# 8. Metric closed forms


def test_criterion_08_metric_closed_forms():
    rng = np.random.default_rng(808)
    X = rng.normal(0, 1, (64, 8))
    fs = FeatureSet(
        items=[FeatureItem(id=f"i{i}", motion=X[i]) for i in range(64)], dim=8
    )
    self_fid = fid(fs, fs)

    d = 6
    mu_r, mu_g = rng.normal(0, 1, d), rng.normal(0, 1, d)
    sr, sg = rng.uniform(0.5, 2.0, d), rng.uniform(0.5, 2.0, d)
    diag_fid = fid_from_moments(mu_r, np.diag(sr**2), mu_g, np.diag(sg**2))
    diag_want = float(np.sum((mu_r - mu_g) ** 2 + (sr - sg) ** 2))

    I = 8
    xent = next_index_xent(np.zeros((5, I + 1)), [0, 1, 2, 3, I])
    xent_want = np.log(I + 1)

    n, pool = 1000, 32
    prompts = rng.normal(0, 1, (n, 8))
    motions = rng.normal(0, 1, (n, 8))
    rfs = FeatureSet(
        items=[FeatureItem(id=f"r{i}", motion=motions[i], prompt=prompts[i])
               for i in range(n)],
        dim=8,
    )
    rates = r_precision(rfs, k_list=(1, 3, 5), pool=pool, seed=0)
    in_band = True
    for k in (1, 3, 5):
        p = k / pool
        sigma = np.sqrt(p * (1 - p) / n)
        in_band = in_band and abs(rates[k] - p) < 3 * sigma

    ok = (
        abs(self_fid) < 1e-8
        and abs(diag_fid - diag_want) < 1e-3
        and abs(xent - xent_want) < 1e-9
        and in_band
    )
    report(8, "metric closed forms", ok,
           f"(fid(X,X) {self_fid:.1e}, diag gap {abs(diag_fid - diag_want):.1e}, "
           f"xent gap {abs(xent - xent_want):.1e}, r-precision in 3-sigma {in_band})")


# ---------------------------------------------------------------------------
# 9. Quantization oracle


def test_criterion_09_quantization():
    rng = np.random.default_rng(909)
    n_checked = 0
    for _ in range(10):
        I = int(rng.integers(2, 65))
        dim = int(rng.integers(2, 10))
        book = Codebook(codes=rng.normal(0, 1, (I, dim)))
        feats = rng.normal(0, 1, (100, dim))
        _, idx = quantize_nearest(feats, book)
        for f, i in zip(feats, idx):
            dists = np.linalg.norm(book.codes - f[None, :], axis=1)
            assert i == int(np.argmin(dists))
            n_checked += 1

    book = Codebook(codes=rng.normal(0, 1, (16, 5)))
    f = book.codes[[1, 5, 9]]
    zero = vq_loss(f, f, (np.zeros(3), np.zeros(3)))
    zero_ok = zero.total == 0.0

    q = rng.normal(0, 1, f.shape)
    out = vq_loss(f, q, (np.zeros(3), np.zeros(3)), beta_commit=0.25)
    sg_ok = np.allclose(out.grad_features, 0.5 * (f - q)) and np.allclose(
        out.grad_quantized, 2.0 * (q - f)
    )

    feats = rng.normal(0, 1, (20, 5))
    seq = encode_to_indices(feats, book)
    decoded = decode_from_indices(seq, book)
    quantized, _ = quantize_nearest(feats, book)
    rt_ok = np.array_equal(decoded, quantized)

    ok = n_checked == 1000 and zero_ok and sg_ok and rt_ok
    report(9, "quantization oracle", ok,
           f"(exhaustive {n_checked}/1000, zero {zero_ok}, stop-grad {sg_ok}, "
           f"round-trip {rt_ok})")


# ---------------------------------------------------------------------------
# 10. Determinism


def test_criterion_10_determinism(tmp_path):
    runs = []
    for tag, threads in (("a", "1"), ("b", "4")):
        d = tmp_path / tag
        main(["synth", "--out-dir", str(d), "--frames", "4", "--seed", "2",
              "--noise", "1.0", "--threads", threads])
        fused = d / "fused.jsonl"
        main(["fuse", str(d / "keypoints_noisy.jsonl"), "--out", str(fused),
              "--threads", threads])
        motion = d / "motion.json"
        rep = d / "report.json"
        main([
            "fit", "--keypoints", str(d / "keypoints.jsonl"),
            "--model", str(d / "model.json"), "--camera", str(d / "camera.json"),
            "--limits", str(d / "limits.json"), "--layout", str(d / "layout.json"),
            "--out", str(motion), "--report", str(rep), "--steps", "20",
            "--seed", "5", "--threads", threads,
        ])
        blob = b"".join(
            (d / name).read_bytes()
            for name in ("motion_gt.json", "keypoints.jsonl", "keypoints_noisy.jsonl",
                         "fused.jsonl", "motion.json", "report.json")
        )
        runs.append(blob)
    ok = runs[0] == runs[1]
    report(10, "determinism", ok, f"({len(runs[0])} bytes compared)")
