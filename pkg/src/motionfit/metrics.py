"""Evaluation metrics for generated motion: Frechet feature distance,
diversity, multimodality, prompt distance, retrieval precision, and
DTW-based mean joint error over externally supplied features and joint
sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadIndex,
    EmptySequence,
    EmptySubset,
    MissingPositive,
    MissingPrompt,
    ShapeError,
    TooFewSamples,
)
from .validation import as_float_array

__all__ = [
    "FeatureItem",
    "FeatureSet",
    "JointSequence",
    "load_feature_set",
    "save_feature_set",
    "load_joint_sequence",
    "save_joint_sequence",
    "fid",
    "fid_from_moments",
    "diversity",
    "multimodality",
    "mm_dist",
    "r_precision",
    "mr_precision",
    "dtw_mje",
    "dtw_alignment",
    "strip_lower_body",
]


@dataclass
class FeatureItem:
    id: str
    motion: np.ndarray
    prompt: np.ndarray | None = None
    positive_id: str | None = None


@dataclass
class FeatureSet:
    items: list[FeatureItem]
    dim: int

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ShapeError("feature item ids must be unique")
        for it in self.items:
            if it.motion.shape != (self.dim,):
                raise ShapeError(f"item {it.id}: motion feature must have dim {self.dim}")
            if it.prompt is not None and it.prompt.shape != (self.dim,):
                raise ShapeError(f"item {it.id}: prompt feature must have dim {self.dim}")

    def __len__(self) -> int:
        return len(self.items)

    def motions(self) -> np.ndarray:
        return np.stack([it.motion for it in self.items])

    def prompts(self) -> np.ndarray:
        missing = [it.id for it in self.items if it.prompt is None]
        if missing:
            raise MissingPrompt(f"items without prompt feature: {missing[:5]}")
        return np.stack([it.prompt for it in self.items])


def load_feature_set(path) -> FeatureSet:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    dim = int(d["d"])
    items = [
        FeatureItem(
            id=str(it["id"]),
            motion=as_float_array(it["motion"], "motion", (dim,)),
            prompt=as_float_array(it["prompt"], "prompt", (dim,)) if "prompt" in it else None,
            positive_id=it.get("positive_id"),
        )
        for it in d["items"]
    ]
    return FeatureSet(items=items, dim=dim)


def save_feature_set(fs: FeatureSet, path) -> None:
    d = {
        "d": fs.dim,
        "items": [
            {
                "id": it.id,
                "motion": it.motion.tolist(),
                **({"prompt": it.prompt.tolist()} if it.prompt is not None else {}),
                **({"positive_id": it.positive_id} if it.positive_id is not None else {}),
            }
            for it in fs.items
        ],
    }
    Path(path).write_text(json.dumps(d), encoding="utf-8")


@dataclass
class JointSequence:
    """Frames of (J, 3) joint positions at a fixed frame rate."""

    fps: float
    frames: np.ndarray  # (T, J, 3)
    joint_names: list[str] | None = None

    def __post_init__(self):
        self.frames = as_float_array(self.frames, "frames")
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ShapeError("joint sequence frames must be (T, J, 3)")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]


def load_joint_sequence(path) -> JointSequence:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    return JointSequence(
        fps=float(d.get("fps", 25.0)),
        frames=np.asarray(d["frames"], dtype=float),
        joint_names=d.get("joints"),
    )


def save_joint_sequence(seq: JointSequence, path) -> None:
    d = {"fps": seq.fps, "frames": seq.frames.tolist()}
    if seq.joint_names is not None:
        d["joints"] = seq.joint_names
    Path(path).write_text(json.dumps(d), encoding="utf-8")


# ---------------------------------------------------------------------------
# Distribution distance


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, negatives clamped."""
    sym = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_moments(mu_real, cov_real, mu_gen, cov_gen) -> float:
    """Frechet distance between two Gaussians given their moments."""
    mu_r = as_float_array(mu_real, "mu_real")
    mu_g = as_float_array(mu_gen, "mu_gen")
    C_r = np.atleast_2d(as_float_array(cov_real, "cov_real"))
    C_g = np.atleast_2d(as_float_array(cov_gen, "cov_gen"))
    dmu = mu_r - mu_g
    root_r = _sqrtm_psd(C_r)
    cross = _sqrtm_psd(root_r @ C_g @ root_r)
    val = float(dmu @ dmu + np.trace(C_r) + np.trace(C_g) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    Covariances use the 1/(n-1) normalization.
    """
    if len(real) < 2 or len(gen) < 2:
        raise TooFewSamples("fid needs at least 2 items per set")
    if real.dim != gen.dim:
        raise ShapeError(f"feature dims differ: {real.dim} vs {gen.dim}")
    X, Y = real.motions(), gen.motions()
    return fid_from_moments(
        X.mean(axis=0), np.cov(X, rowvar=False), Y.mean(axis=0), np.cov(Y, rowvar=False)
    )


# ---------------------------------------------------------------------------
# Sampled feature statistics


def diversity(fs: FeatureSet, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean Euclidean distance over seeded random ordered pairs of
    distinct items."""
    if len(fs) < 2:
        raise TooFewSamples("diversity needs at least 2 items")
    rng = np.random.default_rng(seed)
    X = fs.motions()
    n = len(fs)
    total = 0.0
    for _ in range(n_pairs):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        total += float(np.linalg.norm(X[i] - X[j]))
    return total / n_pairs


def multimodality(groups: list, n_pairs: int = 10, seed: int = 0) -> float:
    """Mean within-group pair distance, averaged over groups.

    Each group holds the motion features generated from one prompt.
    """
    if not groups:
        raise TooFewSamples("multimodality needs at least one group")
    rng = np.random.default_rng(seed)
    total = 0.0
    for g in groups:
        X = as_float_array(np.asarray(g, dtype=float), "group")
        if X.ndim != 2 or X.shape[0] < 2:
            raise TooFewSamples("each multimodality group needs at least 2 features")
        n = X.shape[0]
        s = 0.0
        for _ in range(n_pairs):
            i = int(rng.integers(n))
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            s += float(np.linalg.norm(X[i] - X[j]))
        total += s / n_pairs
    return total / len(groups)


def mm_dist(fs: FeatureSet) -> float:
    """Mean Euclidean distance between motion features and their prompts."""
    if len(fs) < 1:
        raise TooFewSamples("mm_dist needs at least one item")
    X = fs.motions()
    P = fs.prompts()
    return float(np.linalg.norm(X - P, axis=1).mean())


# ---------------------------------------------------------------------------
# Retrieval precision


def _rank_of_true(distances: np.ndarray, true_pos: int) -> int:
    """1-based rank of the true entry; ties resolve by pool order."""
    d_true = distances[true_pos]
    better = np.sum(distances < d_true)
    ties_before = np.sum(
        (distances[:true_pos] == d_true) if true_pos > 0 else np.zeros(0, dtype=bool)
    )
    return int(better + ties_before) + 1


def r_precision(fs: FeatureSet, k_list=(1, 3, 5), pool: int = 32,
                seed: int = 0) -> dict[int, float]:
    """Top-k retrieval rate of each item's own prompt among seeded
    distractor prompts."""
    n = len(fs)
    if n < pool:
        raise TooFewSamples(f"r_precision needs at least pool={pool} items, got {n}")
    X = fs.motions()
    P = fs.prompts()
    rng = np.random.default_rng(seed)
    hits = {k: 0 for k in k_list}
    for i in range(n):
        others = np.delete(np.arange(n), i)
        distractors = rng.choice(others, size=pool - 1, replace=False)
        cand = np.concatenate([[i], distractors])
        d = np.linalg.norm(P[cand] - X[i][None, :], axis=1)
        rank = _rank_of_true(d, 0)
        for k in hits:
            if rank <= k:
                hits[k] += 1
    return {k: hits[k] / n for k in k_list}


def mr_precision(gen: FeatureSet, dataset: FeatureSet, k_list=(1, 3, 5),
                 pool: int = 16, seed: int = 0) -> dict[int, float]:
    """Top-k retrieval rate of the designated positive dataset motion among
    seeded negatives, ranked by motion-feature distance."""
    if len(dataset) < pool:
        raise TooFewSamples(f"mr_precision needs a dataset of at least {pool}")
    id_to_idx = {it.id: j for j, it in enumerate(dataset.items)}
    D = dataset.motions()
    rng = np.random.default_rng(seed)
    hits = {k: 0 for k in k_list}
    n = len(gen)
    if n == 0:
        raise TooFewSamples("mr_precision needs at least one generated item")
    for it in gen.items:
        if it.positive_id is None or it.positive_id not in id_to_idx:
            raise MissingPositive(f"item {it.id} has no positive dataset item")
        pos = id_to_idx[it.positive_id]
        others = np.delete(np.arange(len(dataset)), pos)
        negatives = rng.choice(others, size=pool - 1, replace=False)
        cand = np.concatenate([[pos], negatives])
        d = np.linalg.norm(D[cand] - it.motion[None, :], axis=1)
        rank = _rank_of_true(d, 0)
        for k in hits:
            if rank <= k:
                hits[k] += 1
    return {k: hits[k] / n for k in k_list}


# ---------------------------------------------------------------------------
# Dynamic time warping


def dtw_alignment(cost: np.ndarray):
    """DTW over a cost matrix.

    Returns (total cost, path length) of the optimal monotone alignment;
    among equal-cost paths the shortest is chosen.
    """
    n, m = cost.shape
    D = np.full((n + 1, m + 1), np.inf)
    L = np.zeros((n + 1, m + 1), dtype=int)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            candidates = (
                (D[i - 1, j - 1], L[i - 1, j - 1]),
                (D[i - 1, j], L[i - 1, j]),
                (D[i, j - 1], L[i, j - 1]),
            )
            best = min(candidates)
            D[i, j] = cost[i - 1, j - 1] + best[0]
            L[i, j] = best[1] + 1
    return float(D[n, m]), int(L[n, m])


def dtw_mje(ref: JointSequence, hyp: JointSequence) -> float:
    """Mean joint error accumulated along the optimal DTW alignment,
    normalized by the alignment length."""
    if len(ref) == 0 or len(hyp) == 0:
        raise EmptySequence("dtw_mje needs non-empty sequences")
    if ref.n_joints != hyp.n_joints:
        raise ShapeError(
            f"joint counts differ: {ref.n_joints} vs {hyp.n_joints}"
        )
    diff = ref.frames[:, None, :, :] - hyp.frames[None, :, :, :]
    cost = np.linalg.norm(diff, axis=-1).mean(axis=-1)  # (T1, T2) mean over joints
    total, length = dtw_alignment(cost)
    return total / length


def strip_lower_body(seq: JointSequence, subset) -> JointSequence:
    """Select a joint subset (by index) from every frame."""
    idx = np.asarray(subset, dtype=int)
    if idx.size == 0:
        raise EmptySubset("joint subset is empty")
    if idx.min() < 0 or idx.max() >= seq.n_joints:
        raise BadIndex(f"subset index out of range for {seq.n_joints} joints")
    names = None
    if seq.joint_names is not None:
        names = [seq.joint_names[i] for i in idx]
    return JointSequence(fps=seq.fps, frames=seq.frames[:, idx, :], joint_names=names)
