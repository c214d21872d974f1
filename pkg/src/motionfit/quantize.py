"""Vector-quantization codebook math as pure functions.

Nearest-neighbor lookup against a fixed codebook, the VQ training loss
decomposition with explicit stop-gradient semantics, EOS-terminated index
sequences, and the next-index cross-entropy used by autoregressive index
generators. Training of encoders/decoders is out of scope: this module
exposes values and gradient contracts usable by any external trainer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadIndex, BadSequence, EmptyCodebook, ShapeError
from .validation import as_float_array

__all__ = [
    "Codebook",
    "IndexSequence",
    "VqLoss",
    "load_codebook",
    "save_codebook",
    "quantize_nearest",
    "vq_loss",
    "encode_to_indices",
    "decode_from_indices",
    "next_index_xent",
    "DEFAULT_WINDOW",
]

# temporal downsampling ratio between motion frames and latent features
DEFAULT_WINDOW = 4


@dataclass
class Codebook:
    """Ordered set of code vectors. ``kind`` tags motion vs linguistic books."""

    codes: np.ndarray  # (I, d_z)
    kind: str = "motion"

    def __post_init__(self):
        self.codes = as_float_array(self.codes, "codes")
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise EmptyCodebook("codebook needs at least one code vector")

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @property
    def eos(self) -> int:
        """Token id of the end-of-sequence marker (one past the last code)."""
        return self.n_codes

    def to_dict(self) -> dict:
        return {"d_z": self.dim, "kind": self.kind, "codes": self.codes.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        codes = np.asarray(d["codes"], dtype=float)
        if "d_z" in d and codes.shape[1] != d["d_z"]:
            raise ShapeError(f"codebook d_z={d['d_z']} but codes have dim {codes.shape[1]}")
        return cls(codes=codes, kind=d.get("kind", "motion"))


def load_codebook(path) -> Codebook:
    with open(path, "r", encoding="utf-8") as fh:
        return Codebook.from_dict(json.load(fh))


def save_codebook(book: Codebook, path) -> None:
    Path(path).write_text(json.dumps(book.to_dict()), encoding="utf-8")


@dataclass
class IndexSequence:
    """Code indices terminated by a single EOS token (id = number of codes)."""

    indices: list[int]
    eos: int

    def __post_init__(self):
        if not self.indices or self.indices[-1] != self.eos:
            raise BadSequence("index sequence must end with the EOS token")
        body = self.indices[:-1]
        if any(i == self.eos for i in body):
            raise BadSequence("EOS appears before the end of the sequence")
        if any(not 0 <= i < self.eos for i in body):
            raise BadIndex("code index out of range")

    def body(self) -> list[int]:
        return self.indices[:-1]

    def __len__(self) -> int:
        return len(self.indices)


def quantize_nearest(features, book: Codebook):
    """Snap features to their nearest codes (Euclidean).

    Ties resolve to the lowest code index. Returns (quantized, indices).
    """
    f = as_float_array(features, "features")
    squeeze = f.ndim == 1
    if squeeze:
        f = f[None, :]
    if f.shape[1] != book.dim:
        raise ShapeError(f"features have dim {f.shape[1]}, codebook has {book.dim}")
    # direct squared distances: keeps exact ties exact (lowest index wins)
    delta = f[:, None, :] - book.codes[None, :, :]
    d2 = np.einsum("nid,nid->ni", delta, delta)
    idx = np.argmin(d2, axis=1)
    quant = book.codes[idx]
    if squeeze:
        return quant[0], int(idx[0])
    return quant, idx.astype(int)


@dataclass
class VqLoss:
    """VQ loss terms with the stop-gradient contract made explicit.

    ``grad_features`` is the gradient w.r.t. the encoder features F: only
    the commitment term contributes (the codebook term stops gradients to
    F). ``grad_quantized`` is the gradient w.r.t. the selected codes: only
    the codebook term contributes. ``grad_recon`` is w.r.t. the
    reconstruction.
    """

    total: float
    recon: float
    codebook_term: float
    commitment_term: float
    grad_features: np.ndarray
    grad_quantized: np.ndarray
    grad_recon: np.ndarray


def vq_loss(features, quantized, reconstruction_pair, beta_commit: float = 0.25) -> VqLoss:
    """Reconstruction MSE + codebook and commitment terms.

    ``reconstruction_pair`` is (target, reconstruction). The codebook term
    is ||sg[F] - F_hat||^2 and the commitment term beta * ||F - sg[F_hat]||^2
    (sums of squares).
    """
    f = as_float_array(features, "features")
    q = as_float_array(quantized, "quantized")
    if f.shape != q.shape:
        raise ShapeError(f"features {f.shape} vs quantized {q.shape}")
    target, recon = reconstruction_pair
    target = as_float_array(target, "reconstruction target")
    recon = as_float_array(recon, "reconstruction")
    if target.shape != recon.shape:
        raise ShapeError(f"reconstruction pair shapes differ: {target.shape} vs {recon.shape}")

    diff = recon - target
    recon_mse = float(np.mean(diff * diff)) if diff.size else 0.0
    fq = f - q
    codebook_term = float(np.sum(fq * fq))
    commitment = beta_commit * codebook_term
    return VqLoss(
        total=recon_mse + codebook_term + commitment,
        recon=recon_mse,
        codebook_term=codebook_term,
        commitment_term=commitment,
        grad_features=beta_commit * 2.0 * fq,  # commitment only: sg[F_hat]
        grad_quantized=2.0 * (q - f),  # codebook only: sg[F]
        grad_recon=(2.0 / diff.size) * diff if diff.size else np.zeros_like(diff),
    )


def encode_to_indices(features, book: Codebook) -> IndexSequence:
    """Nearest-code indices followed by EOS."""
    f = as_float_array(features, "features")
    if f.size == 0:
        return IndexSequence(indices=[book.eos], eos=book.eos)
    _, idx = quantize_nearest(f, book)
    return IndexSequence(indices=[int(i) for i in np.atleast_1d(idx)] + [book.eos],
                         eos=book.eos)


def decode_from_indices(seq: IndexSequence | list[int], book: Codebook) -> np.ndarray:
    """Code vectors for a sequence, EOS dropped."""
    if isinstance(seq, IndexSequence):
        if seq.eos != book.eos:
            raise BadSequence(
                f"sequence EOS id {seq.eos} does not match codebook EOS {book.eos}"
            )
        body = seq.body()
    else:
        seq = list(seq)
        if not seq or seq[-1] != book.eos:
            raise BadSequence("index sequence must end with the EOS token")
        body = seq[:-1]
        if any(i == book.eos for i in body):
            raise BadSequence("EOS appears before the end of the sequence")
    for i in body:
        if not 0 <= i < book.n_codes:
            raise BadIndex(f"code index {i} out of range for {book.n_codes} codes")
    if not body:
        return np.zeros((0, book.dim))
    return book.codes[np.asarray(body, dtype=int)]


def next_index_xent(predicted_logits, target: IndexSequence | list[int]) -> float:
    """Mean cross-entropy of next-index predictions over I+1 ids.

    One logit row per target position, EOS included.
    """
    logits = as_float_array(predicted_logits, "logits")
    if logits.ndim != 2:
        raise ShapeError("logits must be (positions, n_codes + 1)")
    ids = target.indices if isinstance(target, IndexSequence) else list(target)
    if logits.shape[0] != len(ids):
        raise ShapeError(
            f"{logits.shape[0]} logit rows for {len(ids)} target positions"
        )
    if any(not 0 <= i < logits.shape[1] for i in ids):
        raise BadIndex("target id out of range of the logit rows")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    picked = log_probs[np.arange(len(ids)), np.asarray(ids, dtype=int)]
    return float(-picked.mean())
