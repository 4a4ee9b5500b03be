"""Entropy coder: exact round trips, near-ideal lengths, table validation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plcodec.rangecoder import (
    TOTAL,
    CdfTable,
    InvalidTableError,
    OutOfAlphabetError,
    counts_from_pmf,
    decode_indexed,
    decode_symbols,
    encode_indexed,
    encode_symbols,
)

settings.register_profile("det", derandomize=True, deadline=None, max_examples=40)
settings.load_profile("det")


def uniform_table(alphabet: int) -> CdfTable:
    cum = np.linspace(0, TOTAL, alphabet + 1).round().astype(np.uint32)
    return CdfTable(cum=cum)


def test_uniform8_round_trip_and_length():
    # 1000 draws from an 8-symbol uniform alphabet carry exactly 3 bits each,
    # so the payload must land within a few tail bits of 3000.
    rng = np.random.default_rng(7)
    syms = rng.integers(0, 8, size=1000)
    table = uniform_table(8)
    payload = encode_symbols(syms, table)
    assert len(payload) * 8 <= 3000 + 32
    out = decode_symbols(payload, table, len(syms))
    np.testing.assert_array_equal(out, syms)


def test_skewed_binary_length_near_entropy():
    # A sequence whose empirical distribution is exactly (0.9, 0.1) must code
    # to within 1% of its Shannon entropy.
    n = 1000
    entropy_bits = n * (0.9 * math.log2(1 / 0.9) + 0.1 * math.log2(1 / 0.1))
    syms = np.array([0] * 900 + [1] * 100)
    np.random.default_rng(3).shuffle(syms)
    table = CdfTable(cum=counts_from_pmf(np.array([0.9, 0.1])))
    payload = encode_symbols(syms, table)
    assert len(payload) * 8 <= entropy_bits * 1.01
    np.testing.assert_array_equal(decode_symbols(payload, table, n), syms)


def test_large_batch_within_tenth_percent_of_ideal():
    rng = np.random.default_rng(11)
    pmf = rng.dirichlet(np.ones(64))
    cum = counts_from_pmf(pmf)
    table = CdfTable(cum=cum)
    n = 200_000
    syms = rng.choice(64, size=n, p=pmf)
    counts = np.bincount(syms, minlength=64)
    widths = np.diff(cum.astype(np.int64))
    ideal = float((counts * -np.log2(widths / TOTAL)).sum())
    payload = encode_symbols(syms, table)
    assert len(payload) * 8 <= ideal * 1.002 + 32
    np.testing.assert_array_equal(decode_symbols(payload, table, n), syms)


def test_empty_message():
    table = uniform_table(4)
    payload = encode_symbols(np.array([], dtype=np.int64), table)
    assert len(payload) <= 4
    assert decode_symbols(payload, table, 0).size == 0


def test_single_symbol_alphabet_codes_to_padding_only():
    table = CdfTable(cum=np.array([0, TOTAL], dtype=np.uint32))
    payload = encode_symbols(np.zeros(500, dtype=np.int64), table)
    assert len(payload) <= 4
    np.testing.assert_array_equal(decode_symbols(payload, table, 500), np.zeros(500))


def test_offset_alphabet():
    table = CdfTable(cum=counts_from_pmf(np.full(5, 0.2)), offset=-2)
    syms = np.array([-2, -1, 0, 1, 2, 2, -2])
    payload = encode_symbols(syms, table)
    np.testing.assert_array_equal(decode_symbols(payload, table, len(syms)), syms)


def test_indexed_rows_switch_tables_per_symbol():
    rng = np.random.default_rng(5)
    rows = counts_from_pmf(rng.dirichlet(np.ones(6), size=9))
    n = 4000
    row_idx = rng.integers(0, 9, size=n)
    syms = rng.integers(0, 6, size=n)
    payload = encode_indexed(syms, rows, row_idx)
    np.testing.assert_array_equal(decode_indexed(payload, rows, row_idx, n), syms)


@given(
    seed=st.integers(0, 2**31 - 1),
    alphabet=st.integers(1, 40),
    n=st.integers(0, 300),
)
def test_round_trip_random_tables(seed, alphabet, n):
    rng = np.random.default_rng(seed)
    table = CdfTable(cum=counts_from_pmf(rng.dirichlet(np.ones(alphabet))))
    syms = rng.integers(0, alphabet, size=n)
    payload = encode_symbols(syms, table)
    np.testing.assert_array_equal(decode_symbols(payload, table, n), syms)


def test_symbol_bits_uniform():
    assert uniform_table(8).symbol_bits(3) == pytest.approx(3.0)


def test_counts_from_pmf_rows_are_complete_distributions():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(17), size=30)
    p[0, 5] = 0.0  # zero-probability bins still get a count
    rows = counts_from_pmf(p)
    assert rows.shape == (30, 18)
    widths = np.diff(rows.astype(np.int64), axis=1)
    assert (widths >= 1).all()
    assert (rows[:, -1] == TOTAL).all()
    assert (rows[:, 0] == 0).all()


def test_invalid_tables_rejected():
    with pytest.raises(InvalidTableError):
        CdfTable(cum=np.array([0, 10, 10, TOTAL], dtype=np.uint32))
    with pytest.raises(InvalidTableError):
        CdfTable(cum=np.array([0, 10, 20], dtype=np.uint32))
    with pytest.raises(InvalidTableError):
        CdfTable(cum=np.array([5, TOTAL], dtype=np.uint32))
    with pytest.raises(InvalidTableError):
        counts_from_pmf(np.array([0.5, -0.5]))
    with pytest.raises(InvalidTableError):
        counts_from_pmf(np.array([0.0, 0.0]))


def test_out_of_alphabet_symbol_rejected():
    table = uniform_table(4)
    with pytest.raises(OutOfAlphabetError):
        encode_symbols(np.array([4]), table)
    with pytest.raises(OutOfAlphabetError):
        encode_symbols(np.array([-1]), table)


def test_truncated_payload_decodes_without_crashing():
    # Integrity is the container's job; the raw coder just reads zeros past
    # the end of a short payload.
    table = uniform_table(8)
    syms = np.arange(8).repeat(50)
    payload = encode_symbols(syms, table)
    out = decode_symbols(payload[: len(payload) // 2], table, len(syms))
    assert out.shape == syms.shape
