import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofvc import coder
from ofvc.coder import QuantizedCdf, RangeDecoder, build_cdf, cached_cdf, laplace_masses
from ofvc.errors import ConfigurationError, DecodeError


def laplace_mass_oracle(k, mu, b):
    def cdf(x):
        return 0.5 * math.exp((x - mu) / b) if x < mu else 1 - 0.5 * math.exp(-(x - mu) / b)

    return cdf(k + 0.5) - cdf(k - 0.5)


def random_cdf(rng, lo=-8, hi=8):
    return build_cdf(rng.uniform(lo, hi), math.exp(rng.uniform(-3, 3)), lo, hi)


def test_counts_sum_and_floor():
    cdf = build_cdf(0.3, 0.7, -255, 255)
    counts = np.diff(cdf.cum)
    assert cdf.cum[0] == 0 and cdf.cum[-1] == 65536
    assert counts.min() >= 1
    assert cdf.lo == -255 and cdf.hi == 255


def test_degenerate_scale_puts_mass_on_mode():
    cdf = build_cdf(0.0, 1e-6, -10, 10)
    counts = np.diff(cdf.cum)
    assert counts[10] == 65536 - 20
    assert (np.delete(counts, 10) == 1).all()


def test_unit_laplace_mass_of_zero():
    # Over a narrow alphabet the reserved counts are negligible.
    cdf = build_cdf(0.0, 1.0, -16, 16)
    assert abs(cdf.count(0) / 65536 - (1 - math.exp(-0.5))) < 2**-10


def test_unit_laplace_full_alphabet_reserved_counts():
    # With 511 symbols, 511 counts are reserved up front and the mode loses
    # roughly 0.3935 * 511 / 65536 of its probability.
    cdf = build_cdf(0.0, 1.0, -255, 255)
    expected = (1 - math.exp(-0.5)) * (65536 - 511) / 65536 + 1 / 65536
    assert abs(cdf.count(0) / 65536 - expected) < 2**-14


@given(st.floats(-20, 20), st.floats(0.05, 50))
@settings(max_examples=60, deadline=None)
def test_masses_match_closed_form_and_sum_to_one(mu, b):
    masses = laplace_masses(mu, b, -30, 30)
    assert abs(masses.sum() - 1.0) < 1e-12
    for k in (-29, -3, 0, 1, 29):
        assert masses[k + 30] == pytest.approx(laplace_mass_oracle(k, mu, b), abs=1e-12)


def test_quantized_mass_close_to_one():
    for mu, b in ((0.0, 0.2), (3.7, 5.0), (-100.0, 30.0)):
        cdf = build_cdf(mu, b, -255, 255)
        probs = np.diff(cdf.cum) / 65536
        assert 1 - 2**-12 <= probs.sum() <= 1


def test_build_cdf_errors():
    with pytest.raises(ConfigurationError):
        build_cdf(0.0, 0.0, -3, 3)
    with pytest.raises(ConfigurationError):
        build_cdf(0.0, 1.0, 3, -3)
    with pytest.raises(ConfigurationError):
        QuantizedCdf.from_counts(0, [65535, 0, 1])


def test_cached_cdf_matches_build():
    assert cached_cdf(32, -16, -5, 5, 64, 32) == build_cdf(0.5, math.exp(-0.5), -5, 5)


def test_empty_sequence_flush():
    data = coder.encode([], [])
    assert len(data) == coder.FLUSH_BYTES
    assert coder.decode(data, []) == []


def test_single_symbol_alphabet():
    cdf = QuantizedCdf.from_counts(7, [65536])
    data = coder.encode([7] * 100, [cdf] * 100)
    assert coder.decode(data, [cdf] * 100) == [7] * 100


def test_random_round_trip_random_cdfs():
    rng = np.random.default_rng(3)
    pool = [random_cdf(rng) for _ in range(50)]
    cdfs = [pool[i] for i in rng.integers(0, 50, 100_000)]
    symbols = [int(rng.integers(c.lo, c.hi + 1)) for c in cdfs]
    data = coder.encode(symbols, cdfs)
    assert coder.decode(data, cdfs) == symbols


@given(st.lists(st.tuples(st.integers(-4, 4), st.integers(0, 9)), max_size=300),
       st.integers(0, 2**32 - 1))
@settings(max_examples=80, deadline=None)
def test_round_trip_property(pairs, seed):
    rng = np.random.default_rng(seed)
    pool = [random_cdf(rng, -4, 4) for _ in range(10)]
    symbols = [s for s, _ in pairs]
    cdfs = [pool[i] for _, i in pairs]
    assert coder.decode(coder.encode(symbols, cdfs), cdfs) == symbols


def test_extreme_probabilities_round_trip():
    # Long runs of near-certain symbols followed by the rarest ones exercise carries.
    cdf = build_cdf(0.0, 1e-4, -3, 3)
    symbols = [0] * 5000 + [3, -3] * 50 + [0] * 5000
    data = coder.encode(symbols, [cdf] * len(symbols))
    assert coder.decode(data, [cdf] * len(symbols)) == symbols


def test_uniform_256_close_to_entropy():
    rng = np.random.default_rng(4)
    cdf = QuantizedCdf.from_counts(0, [256] * 256)
    symbols = rng.integers(0, 256, 100_000).tolist()
    data = coder.encode(symbols, [cdf] * len(symbols))
    assert abs(len(data) - 100_000) <= 0.01 * 100_000


def test_payload_close_to_ideal_bits():
    rng = np.random.default_rng(5)
    cdf = build_cdf(0.0, 2.0, -40, 40)
    probs = np.diff(cdf.cum) / 65536
    symbols = (rng.choice(81, size=20_000, p=probs) - 40).tolist()
    data = coder.encode(symbols, [cdf] * len(symbols))
    ideal = coder.ideal_bits(symbols, [cdf] * len(symbols)) / 8
    assert len(data) <= math.ceil(ideal) + 32


def test_deterministic_bytes():
    rng = np.random.default_rng(6)
    cdfs = [random_cdf(rng) for _ in range(500)]
    symbols = [int(rng.integers(-8, 9)) for _ in cdfs]
    assert coder.encode(symbols, cdfs) == coder.encode(symbols, cdfs)


def test_truncated_stream_raises():
    rng = np.random.default_rng(7)
    cdfs = [random_cdf(rng) for _ in range(2000)]
    symbols = [int(rng.integers(-8, 9)) for _ in cdfs]
    data = coder.encode(symbols, cdfs)
    with pytest.raises(DecodeError):
        coder.decode(data[: len(data) // 2], cdfs)
    with pytest.raises(DecodeError):
        RangeDecoder(b"\x00\x01")


def test_trailing_bytes_raise():
    cdf = build_cdf(0.0, 1.0, -2, 2)
    data = coder.encode([0, 1], [cdf, cdf])
    with pytest.raises(DecodeError):
        coder.decode(data + b"\x00", [cdf, cdf])


def test_symbol_out_of_range_rejected():
    cdf = build_cdf(0.0, 1.0, -2, 2)
    with pytest.raises(ConfigurationError):
        coder.encode([3], [cdf])
