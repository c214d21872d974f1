"""Command-line interface.

Subcommands: ``fit`` (staged model fitting), ``fuse`` (confidence-guided
keypoint fusion + gap filling), ``validate`` (biomechanical checks),
``metrics`` (evaluation metric suite), and ``synth`` (synthetic fixture
generation).

Exit codes: 0 success, 1 threshold failure, 2 input error, 3 runtime
abort. All commands are deterministic for a fixed ``--seed``; ``--threads``
is accepted for clip-level parallelism and never changes results (the
bundled commands each operate on a single clip).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .body_model import (
    default_skeleton,
    load_camera,
    load_motion,
    load_skeleton,
    save_camera,
    save_motion,
    save_skeleton,
)
from .errors import MotionFitError
from .keypoints import (
    default_layout,
    fill_missing,
    fuse_confidence_guided,
    load_layout,
    parse_keypoints,
    save_keypoints,
    save_layout,
)
from .metrics import (
    diversity,
    dtw_mje,
    fid,
    load_feature_set,
    load_joint_sequence,
    mm_dist,
    mr_precision,
    multimodality,
    r_precision,
    strip_lower_body,
)
from .objective import (
    ObjectiveWeights,
    default_limits,
    load_limits,
    save_limits,
    validate_motion,
)
from .optimizer import FitConfig, fit_sequence, save_report
from .synthesis import default_camera, keypoints_from_motion, synthesize_motion

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_INPUT = 2
EXIT_RUNTIME = 3


def _emit(args, payload: dict, human: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human:
            print(line)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    cfg_file = _load_config(args.config)
    model = load_skeleton(_require(args.model, "model"))
    cam = load_camera(_require(args.camera, "camera"))
    limits = (
        load_limits(_require(args.limits, "limits"))
        if args.limits
        else default_limits(model)
    )
    layout = load_layout(_require(args.layout, "layout")) if args.layout else None

    weights = ObjectiveWeights.from_dict(cfg_file.get("weights", {}))
    fit_dict = dict(cfg_file.get("fit", {}))
    if args.steps is not None:
        fit_dict["total_steps"] = args.steps
        fit_dict.pop("stages", None)
    if args.seed is not None:
        fit_dict["seed"] = args.seed
    config = FitConfig.from_dict(fit_dict)
    threshold = args.threshold if args.threshold is not None else cfg_file.get(
        "threshold", 0.3
    )

    sources = [
        parse_keypoints(_require(p, "keypoints"), layout=layout) for p in args.keypoints
    ]
    fused = fill_missing(fuse_confidence_guided(sources, threshold=threshold))
    fused.group_layout = layout or sources[0].group_layout

    init = load_motion(_require(args.init, "init")) if args.init else None

    report = fit_sequence(
        model, cam, fused, weights, limits, config, init=init, fps=args.fps
    )
    save_motion(report.motion, args.out)
    if args.report:
        save_report(report, args.report)
    if args.verbose:
        print(
            f"fit: {report.total_steps_run} steps in {report.wall_time_s:.1f}s",
            file=sys.stderr,
        )
    last = report.stages[-1].loss_trace[-1] if report.stages else {"total": 0.0}
    _emit(
        args,
        {
            "motion": str(args.out),
            "report": str(args.report) if args.report else None,
            "total_steps": report.total_steps_run,
            "final_total": last["total"],
            "w_hand_schedule": [s.w_hand for s in report.stages],
        },
        [
            f"wrote {args.out}",
            f"steps: {report.total_steps_run}",
            f"final objective: {last['total']:.6g}",
        ],
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse


def cmd_fuse(args) -> int:
    cfg_file = _load_config(args.config)
    threshold = args.threshold if args.threshold is not None else cfg_file.get(
        "threshold", 0.3
    )
    layout = load_layout(_require(args.layout, "layout")) if args.layout else None
    sources = [
        parse_keypoints(_require(p, "keypoints"), layout=layout) for p in args.inputs
    ]
    fused = fill_missing(
        fuse_confidence_guided(sources, threshold=threshold)
    )
    save_keypoints(fused, args.out)
    _emit(
        args,
        {"out": str(args.out), "frames": len(fused.frames), "sources": len(sources)},
        [f"wrote {args.out} ({len(fused.frames)} frames from {len(sources)} sources)"],
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args) -> int:
    cfg_file = _load_config(args.config)
    if args.max_violations is None:
        args.max_violations = cfg_file.get("max_violations", 0.01)
    model = load_skeleton(_require(args.model, "model"))
    limits = (
        load_limits(_require(args.limits, "limits"))
        if args.limits
        else default_limits(model)
    )
    motion = load_motion(_require(args.motion, "motion"))
    result = validate_motion(model, motion, limits)
    failed = [r for r in result.rows if not r["ok"]]
    by_check: dict = {}
    for r in result.rows:
        entry = by_check.setdefault(r["check"], {"checks": 0, "violations": 0})
        entry["checks"] += 1
        entry["violations"] += 0 if r["ok"] else 1
    payload = {
        "checks": result.n_checks,
        "violations": result.n_violations,
        "rate": result.rate,
        "max_violations": args.max_violations,
        "by_check": by_check,
        "failed": failed,
    }
    human = [
        f"checks: {result.n_checks}",
        f"violations: {result.n_violations} (rate {result.rate:.4%})",
    ]
    for kind, entry in by_check.items():
        human.append(f"  {kind:24s} {entry['violations']}/{entry['checks']} violated")
    if args.verbose:
        for r in failed[:50]:
            human.append(
                f"  frame {r['frame']:4d} {r['check']:22s} {r['name']:20s} value {r['value']:+.4f}"
            )
    _emit(args, payload, human)
    return EXIT_OK if result.rate <= args.max_violations else EXIT_THRESHOLD


# ---------------------------------------------------------------------------
# metrics


def _parse_k(text: str):
    return tuple(int(k) for k in text.split(","))


def cmd_metrics(args) -> int:
    kind = args.metric
    out: dict = {"metric": kind}
    if kind == "fid":
        real = load_feature_set(_require(args.real, "real features"))
        gen = load_feature_set(_require(args.gen, "generated features"))
        out["fid"] = fid(real, gen)
    elif kind == "diversity":
        fs = load_feature_set(_require(args.features, "features"))
        out["diversity"] = diversity(fs, n_pairs=args.nd, seed=args.seed or 0)
    elif kind == "multimodality":
        with open(_require(args.groups, "groups"), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        groups = [np.asarray(g["features"], dtype=float) for g in payload["groups"]]
        out["multimodality"] = multimodality(groups, n_pairs=args.nm, seed=args.seed or 0)
    elif kind == "mm-dist":
        fs = load_feature_set(_require(args.features, "features"))
        out["mm_dist"] = mm_dist(fs)
    elif kind == "r-precision":
        fs = load_feature_set(_require(args.features, "features"))
        rates = r_precision(fs, k_list=_parse_k(args.k), pool=args.pool,
                            seed=args.seed or 0)
        out.update({f"top{k}": v for k, v in rates.items()})
    elif kind == "mr-precision":
        gen = load_feature_set(_require(args.gen, "generated features"))
        dataset = load_feature_set(_require(args.dataset, "dataset features"))
        rates = mr_precision(gen, dataset, k_list=_parse_k(args.k), pool=args.pool,
                             seed=args.seed or 0)
        out.update({f"top{k}": v for k, v in rates.items()})
    elif kind == "dtw-mje":
        ref = load_joint_sequence(_require(args.ref, "reference joints"))
        hyp = load_joint_sequence(_require(args.hyp, "hypothesis joints"))
        if args.subset:
            with open(_require(args.subset, "subset"), "r", encoding="utf-8") as fh:
                subset = json.load(fh)
            ref = strip_lower_body(ref, subset)
            hyp = strip_lower_body(hyp, subset)
        out["dtw_mje"] = dtw_mje(ref, hyp)
    else:  # pragma: no cover - argparse restricts choices
        raise MotionFitError(f"unknown metric {kind!r}")
    human = [f"{k}={v}" for k, v in out.items() if k != "metric"]
    _emit(args, out, human)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = (
        load_skeleton(_require(args.model, "model")) if args.model else default_skeleton()
    )
    cam = load_camera(_require(args.camera, "camera")) if args.camera else default_camera()
    limits = default_limits(model)
    layout = default_layout(model)

    motion = synthesize_motion(
        model, T=args.frames, fps=args.fps, seed=args.seed or 1,
        shape_mag=args.shape_mag,
    )
    save_skeleton(model, out_dir / "model.json")
    save_camera(cam, out_dir / "camera.json")
    save_limits(limits, out_dir / "limits.json")
    save_layout(layout, out_dir / "layout.json")
    save_motion(motion, out_dir / "motion_gt.json")
    clean = keypoints_from_motion(model, cam, motion, layout=layout)
    save_keypoints(clean, out_dir / "keypoints.jsonl")
    written = [
        "model.json", "camera.json", "limits.json", "layout.json",
        "motion_gt.json", "keypoints.jsonl",
    ]
    if args.noise > 0:
        noisy = keypoints_from_motion(
            model, cam, motion, noise=args.noise, dropout=args.dropout,
            seed=(args.seed or 1) + 1, layout=layout,
        )
        save_keypoints(noisy, out_dir / "keypoints_noisy.jsonl")
        written.append("keypoints_noisy.jsonl")
    _emit(
        args,
        {"out_dir": str(out_dir), "files": written, "frames": args.frames},
        [f"wrote {out_dir}/{name}" for name in written],
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionfit",
        description="Holistic motion fitting from 2D keypoints, with "
        "biomechanical validation and motion evaluation metrics.",
    )
    parser.add_argument("--version", action="version", version=f"motionfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="JSON config file (flags override)")
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--threads", type=int, default=1,
                       help="clip-level parallelism (results are identical for any value)")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("fit", help="fit the skeleton to keypoint sequences")
    shared(p)
    p.add_argument("--keypoints", action="append", required=True,
                   help="keypoint file (repeat to fuse multiple sources)")
    p.add_argument("--model", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--limits")
    p.add_argument("--layout")
    p.add_argument("--init", help="initialization motion file")
    p.add_argument("--out", required=True, help="output motion file")
    p.add_argument("--report", help="output report file")
    p.add_argument("--steps", type=int, default=None, help="override total steps")
    p.add_argument("--threshold", type=float, default=None,
                   help="fusion confidence threshold (default 0.3)")
    p.add_argument("--fps", type=float, default=25.0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fuse", help="confidence-guided fusion of keypoint sources")
    shared(p)
    p.add_argument("inputs", nargs="+", help="keypoint files")
    p.add_argument("--out", required=True)
    p.add_argument("--layout")
    p.add_argument("--threshold", type=float, default=None,
                   help="confidence threshold (default 0.3)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("validate", help="biomechanical checks on a motion file")
    shared(p)
    p.add_argument("--motion", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--limits")
    p.add_argument("--max-violations", type=float, default=None,
                   help="maximum acceptable violation rate (default 0.01)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser(
        "metrics", help="evaluation metric suite",
        epilog="fid is the standard Gaussian Frechet distance (squared mean "
        "difference plus the covariance trace term, always nonnegative); "
        "dtw-mje normalizes the accumulated mean joint error by the optimal "
        "alignment length.",
    )
    shared(p)
    p.add_argument(
        "metric",
        choices=["fid", "diversity", "multimodality", "mm-dist", "r-precision",
                 "mr-precision", "dtw-mje"],
    )
    p.add_argument("--real")
    p.add_argument("--gen")
    p.add_argument("--features")
    p.add_argument("--groups")
    p.add_argument("--dataset")
    p.add_argument("--ref")
    p.add_argument("--hyp")
    p.add_argument("--subset", help="JSON list of joint indices to keep")
    p.add_argument("--pool", type=int, default=None,
                   help="retrieval pool size (default 32 for r-precision, 16 for mr-precision)")
    p.add_argument("--k", default="1,3,5", help="comma-separated top-k list")
    p.add_argument("--nd", type=int, default=300, help="diversity pair count")
    p.add_argument("--nm", type=int, default=10, help="multimodality pair count")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("synth", help="generate a synthetic clip with fixtures")
    shared(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    p.add_argument("--dropout", type=float, default=0.0,
                   help="probability a keypoint is unobserved")
    p.add_argument("--shape-mag", type=float, default=0.0,
                   help="stddev of the sampled shape vector")
    p.add_argument("--model", help="skeleton file (default: built-in asset)")
    p.add_argument("--camera", help="camera file (default: built-in)")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "metrics" and args.pool is None:
        args.pool = 16 if args.metric == "mr-precision" else 32
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except MotionFitError as e:
        kind = type(e).__name__
        if kind in ("BehindCamera", "NotDescent"):
            print(f"error ({kind}): {e}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"error ({kind}): {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
