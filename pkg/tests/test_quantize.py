import numpy as np
import pytest

from motionfit.errors import BadIndex, BadSequence, EmptyCodebook, ShapeError
from motionfit.quantize import (
    Codebook,
    IndexSequence,
    decode_from_indices,
    encode_to_indices,
    load_codebook,
    next_index_xent,
    quantize_nearest,
    save_codebook,
    vq_loss,
)


@pytest.fixture
def book():
    rng = np.random.default_rng(0)
    return Codebook(codes=rng.normal(0, 1, (8, 4)))


class TestQuantizeNearest:
    def test_exact_code_match(self, book):
        q, i = quantize_nearest(book.codes[3], book)
        assert i == 3
        assert np.array_equal(q, book.codes[3])

    def test_two_code_example(self):
        b = Codebook(codes=np.array([[0.0, 0.0], [1.0, 1.0]]))
        q, i = quantize_nearest(np.array([0.9, 0.8]), b)
        assert i == 1
        assert np.array_equal(q, b.codes[1])

    def test_tie_goes_to_lowest_index(self):
        b = Codebook(codes=np.array([[0.0, 0.0], [2.0, 0.0]]))
        _, i = quantize_nearest(np.array([1.0, 0.0]), b)
        assert i == 0

    def test_empty_codebook(self):
        with pytest.raises(EmptyCodebook):
            Codebook(codes=np.zeros((0, 3)))

    def test_dim_mismatch(self, book):
        with pytest.raises(ShapeError):
            quantize_nearest(np.zeros(3), book)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            I = int(rng.integers(2, 65))
            d = int(rng.integers(2, 9))
            book = Codebook(codes=rng.normal(0, 1, (I, d)))
            feats = rng.normal(0, 1, (100, d))
            _, idx = quantize_nearest(feats, book)
            for f, i in zip(feats, idx):
                dists = [np.linalg.norm(f - c) for c in book.codes]
                assert i == int(np.argmin(dists))

    def test_idempotent(self, book):
        rng = np.random.default_rng(2)
        f = rng.normal(0, 1, (50, book.dim))
        q1, i1 = quantize_nearest(f, book)
        q2, i2 = quantize_nearest(q1, book)
        assert np.array_equal(q1, q2)
        assert np.array_equal(i1, i2)


class TestVqLoss:
    def test_all_zero(self, book):
        f = book.codes[:4]
        out = vq_loss(f, f, (np.ones((3, 2)), np.ones((3, 2))))
        assert out.total == 0.0
        assert out.recon == out.codebook_term == out.commitment_term == 0.0

    def test_shifted_quantized(self):
        rng = np.random.default_rng(3)
        f = rng.normal(0, 1, (5, 4))
        v = rng.normal(0, 1, (5, 4))
        m = rng.normal(0, 1, (7, 3))
        out = vq_loss(f, f + v, (m, m), beta_commit=0.25)
        assert out.recon == 0.0
        assert out.codebook_term == pytest.approx(float(np.sum(v * v)))
        assert out.commitment_term == pytest.approx(0.25 * float(np.sum(v * v)))
        assert out.total == pytest.approx(1.25 * float(np.sum(v * v)))

    def test_stop_gradient_contract(self):
        rng = np.random.default_rng(4)
        f = rng.normal(0, 1, (5, 4))
        q = rng.normal(0, 1, (5, 4))
        out = vq_loss(f, q, (np.zeros(2), np.zeros(2)), beta_commit=0.25)
        # commitment drives features, codebook term drives codes
        assert np.allclose(out.grad_features, 0.25 * 2.0 * (f - q))
        assert np.allclose(out.grad_quantized, 2.0 * (q - f))
        # finite difference on the commitment and codebook terms
        eps = 1e-6
        d = rng.normal(0, 1, f.shape)
        plus = vq_loss(f + eps * d, q, (np.zeros(2), np.zeros(2)), 0.25)
        minus = vq_loss(f - eps * d, q, (np.zeros(2), np.zeros(2)), 0.25)
        fd = (plus.commitment_term - minus.commitment_term) / (2 * eps)
        assert float(np.sum(out.grad_features * d)) == pytest.approx(fd, rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            vq_loss(np.zeros((2, 3)), np.zeros((3, 2)), (np.zeros(1), np.zeros(1)))


class TestIndexSequences:
    def test_encode(self, book):
        feats = book.codes[[2, 5, 1]]
        seq = encode_to_indices(feats, book)
        assert seq.indices == [2, 5, 1, book.eos]

    def test_empty_features(self, book):
        seq = encode_to_indices(np.zeros((0, book.dim)), book)
        assert seq.indices == [book.eos]

    def test_decode_empty(self, book):
        assert decode_from_indices([book.eos], book).shape == (0, book.dim)

    def test_decode_single(self, book):
        out = decode_from_indices([2, book.eos], book)
        assert np.array_equal(out, book.codes[[2]])

    def test_misplaced_eos(self, book):
        with pytest.raises(BadSequence):
            decode_from_indices([book.eos, 2], book)

    def test_out_of_range_index(self, book):
        with pytest.raises(BadIndex):
            decode_from_indices([book.n_codes + 3, book.eos], book)

    def test_eos_exactly_once_at_end(self, book):
        with pytest.raises(BadSequence):
            IndexSequence(indices=[1, book.eos, 2, book.eos], eos=book.eos)

    def test_round_trip(self, book):
        rng = np.random.default_rng(5)
        feats = rng.normal(0, 1, (10, book.dim))
        seq = encode_to_indices(feats, book)
        decoded = decode_from_indices(seq, book)
        quantized, _ = quantize_nearest(feats, book)
        assert np.array_equal(decoded, quantized)


class TestNextIndexXent:
    def test_confident_correct(self):
        targets = [0, 2, 3]
        logits = np.full((3, 4), -100.0)
        for r, t in enumerate(targets):
            logits[r, t] = 100.0
        assert next_index_xent(logits, targets) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self):
        I = 8
        logits = np.zeros((5, I + 1))
        val = next_index_xent(logits, [0, 1, 2, 3, I])
        assert val == pytest.approx(np.log(I + 1), abs=1e-9)

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            next_index_xent(np.zeros((2, 4)), [0, 1, 2])

    def test_invariant_to_target_preserving_permutation(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(0, 1, (4, 6))
        targets = [1, 0, 5, 3]
        base = next_index_xent(logits, targets)
        permuted = logits.copy()
        for r, t in enumerate(targets):
            others = [c for c in range(6) if c != t]
            perm = rng.permutation(others)
            permuted[r, others] = logits[r, perm]
        assert next_index_xent(permuted, targets) == pytest.approx(base, rel=1e-12)


class TestCodebookIO:
    def test_roundtrip(self, book, tmp_path):
        path = tmp_path / "book.json"
        save_codebook(book, path)
        again = load_codebook(path)
        assert np.array_equal(again.codes, book.codes)
        assert again.kind == book.kind

    def test_dim_check(self, tmp_path):
        path = tmp_path / "book.json"
        path.write_text('{"d_z": 3, "codes": [[1, 2]]}', encoding="utf-8")
        with pytest.raises(ShapeError):
            load_codebook(path)
