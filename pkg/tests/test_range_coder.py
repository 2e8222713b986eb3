import numpy as np
import pytest

from taxocodec.entropy_models import Alphabet, discretized_gaussian_pmf
from taxocodec.errors import DecodeError, ShapeMismatchError
from taxocodec.range_coder import (TOTAL, CodedSegment, build_cdf, build_cdfs, decode, encode,
                                   ideal_bits)


def _random_case(rng):
    k = int(rng.integers(2, 40))
    n = int(rng.integers(0, 60))
    alpha = rng.uniform(0.05, 3.0)
    pmfs = rng.dirichlet(np.full(k, alpha), size=max(n, 1))
    cdfs = build_cdfs(pmfs)[:n]
    indices = np.array([rng.choice(k, p=p) for p in pmfs[:n]], dtype=np.int64)
    return indices, cdfs


def _fuzz(trials, seed):
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        indices, cdfs = _random_case(rng)
        segment = encode(indices, cdfs)
        assert np.array_equal(decode(segment, cdfs), indices)
        assert segment.bits <= 1.01 * ideal_bits(indices, cdfs) + 32


class TestBuildCdf:

    def test_two_symbol_example(self):
        assert list(build_cdf([0.9, 0.1])) == [0, 58982, TOTAL]

    def test_uniform(self):
        assert list(np.diff(build_cdf([0.25] * 4))) == [16384] * 4

    def test_every_symbol_keeps_a_count(self):
        pmf = np.zeros(300)
        pmf[0] = 1.0
        counts = np.diff(build_cdf(pmf))
        assert counts.min() == 1
        assert counts.sum() == TOTAL

    def test_tiny_masses(self):
        pmf = np.full(1000, 1e-9)
        pmf[7] = 1.0 - pmf.sum() + 1e-9
        cdf = build_cdf(pmf)
        assert cdf[-1] == TOTAL
        assert np.all(np.diff(cdf) >= 1)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        pmfs = rng.dirichlet(np.ones(17), size=6)
        batch = build_cdfs(pmfs)
        for row, pmf in zip(batch, pmfs):
            assert np.array_equal(row, build_cdf(pmf))

    def test_rejects_unnormalised(self):
        with pytest.raises(ValueError):
            build_cdf([0.5, 0.4])

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            build_cdf([1.5, -0.5])

    def test_alphabet_size_check(self):
        with pytest.raises(ShapeMismatchError):
            build_cdf([0.5, 0.5], alphabet_size=3)


class TestRoundTrip:

    def test_empty_sequence(self):
        cdf = build_cdf([0.5, 0.5])
        segment = encode([], cdf)
        assert segment.symbol_count == 0
        assert decode(segment, cdf).size == 0

    def test_shared_table(self):
        cdf = build_cdf([0.7, 0.2, 0.1])
        indices = np.random.default_rng(1).choice(3, size=2000, p=[0.7, 0.2, 0.1])
        segment = encode(indices, cdf)
        assert np.array_equal(decode(segment, cdf), indices)
        assert segment.bits <= 1.01 * ideal_bits(indices, cdf) + 32

    def test_highly_skewed(self):
        pmf = np.full(64, 1e-6)
        pmf[63] = 1.0 - pmf[:63].sum()
        cdf = build_cdf(pmf)
        indices = np.full(5000, 63)
        indices[::997] = 5
        segment = encode(indices, cdf)
        assert np.array_equal(decode(segment, cdf), indices)
        assert segment.bits <= 1.01 * ideal_bits(indices, cdf) + 32

    def test_skewed_mode_inside_the_alphabet(self):
        alphabet = Alphabet()
        cdf = build_cdf(discretized_gaussian_pmf(0.0, 1e-3, alphabet))
        indices = np.full(300_000, alphabet.to_index(0))
        segment = encode(indices, cdf)
        assert segment.bits <= 1.01 * ideal_bits(indices, cdf) + 32
        assert np.array_equal(decode(segment, cdf), indices)

    def test_rare_symbols_around_a_central_mode(self):
        alphabet = Alphabet()
        cdf = build_cdf(discretized_gaussian_pmf(0.3, 0.05, alphabet))
        indices = np.full(20_000, alphabet.to_index(0))
        indices[::1001] = alphabet.to_index(-40)
        indices[500::1001] = alphabet.to_index(17)
        segment = encode(indices, cdf)
        assert np.array_equal(decode(segment, cdf), indices)
        assert segment.bits <= 1.01 * ideal_bits(indices, cdf) + 32

    def test_is_deterministic(self):
        rng = np.random.default_rng(2)
        indices, cdfs = _random_case(rng)
        assert encode(indices, cdfs).data == encode(indices, cdfs).data

    def test_fuzz(self):
        _fuzz(500, seed=3)

    @pytest.mark.slow
    def test_fuzz_ten_thousand(self):
        _fuzz(10000, seed=4)


class TestErrors:

    def test_symbol_outside_alphabet(self):
        with pytest.raises(ShapeMismatchError):
            encode([3], build_cdf([0.5, 0.5]))

    def test_table_count_mismatch(self):
        cdfs = build_cdfs(np.full((3, 2), 0.5))
        with pytest.raises(ShapeMismatchError):
            encode([0, 1], cdfs)

    def test_truncation_always_fails(self):
        rng = np.random.default_rng(5)
        cdf = build_cdf([0.6, 0.3, 0.1])
        indices = rng.choice(3, size=400, p=[0.6, 0.3, 0.1])
        segment = encode(indices, cdf)
        for cut in (1, 2, 5, len(segment.data) // 2):
            truncated = CodedSegment(segment.data[:-cut], segment.symbol_count)
            with pytest.raises(DecodeError):
                decode(truncated, cdf)

    def test_trailing_bytes_fail(self):
        cdf = build_cdf([0.5, 0.5])
        segment = encode([0, 1, 1, 0], cdf)
        with pytest.raises(DecodeError):
            decode(CodedSegment(segment.data + b"\x00", 4), cdf)

    def test_corruption_is_detected_or_changes_symbols(self):
        rng = np.random.default_rng(6)
        cdf = build_cdf([0.5, 0.25, 0.25])
        indices = rng.choice(3, size=300, p=[0.5, 0.25, 0.25])
        segment = encode(indices, cdf)
        for position in range(0, len(segment.data), 7):
            corrupted = bytearray(segment.data)
            corrupted[position] ^= 0x5A
            try:
                decoded = decode(CodedSegment(bytes(corrupted), segment.symbol_count), cdf)
            except DecodeError:
                continue
            assert not np.array_equal(decoded, indices)
