"""Entropy model: bin-mass likelihoods, group causality, coder agreement."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import expit, ndtr
from scipy.stats import norm

from plcodec import entropy as ent
from plcodec.entropy import (
    SYMBOL_BOUND,
    FactorizedDensity,
    GaussianParams,
    GroupSpec,
    GroupedEntropyModel,
    RateReport,
    gaussian_bin_mass,
    gaussian_cdf_rows,
    hyper_cdf_rows,
    hyper_rate_noised,
    hyper_rate_quantized,
    merge_groups,
    quantize_hyper_symbols,
    quantize_symbols,
    rate_noised,
    rate_quantized,
    split_groups,
)
from plcodec.rangecoder import CdfTable, decode_indexed, encode_indexed

settings.register_profile("det", derandomize=True, deadline=None, max_examples=30)
settings.load_profile("det")


def test_near_equal_partition_example():
    assert GroupSpec.near_equal(7, 3).channel_ranges == ((0, 3), (3, 5), (5, 7))
    assert GroupSpec.near_equal(6, 3).channel_ranges == ((0, 2), (2, 4), (4, 6))
    assert GroupSpec.near_equal(5, 5).sizes() == [1] * 5


def test_bad_group_specs_rejected():
    with pytest.raises(ValueError):
        GroupSpec(channel_ranges=((1, 4),))
    with pytest.raises(ValueError):
        GroupSpec(channel_ranges=((0, 2), (3, 5)))
    with pytest.raises(ValueError):
        GroupSpec(channel_ranges=((0, 2), (2, 2)))
    with pytest.raises(ValueError):
        GroupSpec.near_equal(4, 5)


@given(
    channels=st.integers(1, 24),
    num_groups=st.integers(1, 8),
    seed=st.integers(0, 10_000),
)
def test_split_merge_round_trip(channels, num_groups, seed):
    num_groups = min(num_groups, channels)
    spec = GroupSpec.near_equal(channels, num_groups)
    assert sum(spec.sizes()) == channels
    assert max(spec.sizes()) - min(spec.sizes()) <= 1
    g = torch.Generator().manual_seed(seed)
    y = torch.randn((channels, 4, 3), generator=g)
    parts = split_groups(y, spec)
    assert torch.equal(merge_groups(parts), y)


def test_unit_bin_mass_matches_normal_cdf():
    # Mass of the central unit bin of a standard normal.
    oracle = norm.cdf(0.5) - norm.cdf(-0.5)
    got = gaussian_bin_mass(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    assert float(got) == pytest.approx(oracle, abs=1e-12)
    assert -math.log2(oracle) == pytest.approx(1.3849, abs=1e-4)


def test_rate_noised_matches_quadrature_oracle():
    # Monte Carlo mean of the noised codelength vs direct integration over
    # the uniform noise.
    mu, sigma, y0 = 0.1, 0.8, 0.3
    f = lambda u: -math.log2(
        norm.cdf((y0 + u - mu + 0.5) / sigma) - norm.cdf((y0 + u - mu - 0.5) / sigma)
    )
    oracle, _ = quad(f, -0.5, 0.5)
    n = 448
    y = torch.full((1, n, n), y0)
    params = [GaussianParams(mean=torch.full((1, n, n), mu), scale=torch.full((1, n, n), sigma))]
    spec = GroupSpec.near_equal(1, 1)
    gen = torch.Generator().manual_seed(123)
    total, per_group = rate_noised(y, params, spec, gen)
    assert len(per_group) == 1
    assert float(total) / (n * n) == pytest.approx(oracle, rel=0.01)


def test_rate_noised_is_differentiable():
    y = torch.randn(2, 3, 3, requires_grad=True)
    params = [
        GaussianParams(mean=torch.zeros(1, 3, 3), scale=torch.ones(1, 3, 3)),
        GaussianParams(mean=torch.zeros(1, 3, 3), scale=torch.ones(1, 3, 3)),
    ]
    total, _ = rate_noised(y, params, GroupSpec.near_equal(2, 2), torch.Generator().manual_seed(0))
    total.backward()
    assert y.grad is not None and torch.isfinite(y.grad).all()


def _independent_folded_bits(y, mean, scale, delta=1.0):
    """Test-local fold/clip reimplementation on top of scipy."""
    s = np.clip(np.rint((y - mean) / delta), -SYMBOL_BOUND, SYMBOL_BOUND)
    ratio = delta / scale
    upper = np.where(s >= SYMBOL_BOUND, 1.0, ndtr((s + 0.5) * ratio))
    lower = np.where(s <= -SYMBOL_BOUND, 0.0, ndtr((s - 0.5) * ratio))
    return -np.log2(np.maximum(upper - lower, 1e-12))


def test_rate_quantized_matches_independent_fold():
    rng = np.random.default_rng(0)
    y = rng.normal(0, 6, size=(4, 5, 5))
    mu = rng.normal(0, 1, size=(4, 5, 5))
    sigma = rng.uniform(0.2, 9.0, size=(4, 5, 5))
    spec = GroupSpec.near_equal(4, 2)
    params = [
        GaussianParams(
            mean=torch.tensor(mu[a:b], dtype=torch.float64),
            scale=torch.tensor(sigma[a:b], dtype=torch.float64),
        )
        for a, b in spec.channel_ranges
    ]
    total, per_group = rate_quantized(torch.tensor(y, dtype=torch.float64), params, spec)
    oracle = _independent_folded_bits(y, mu, sigma).sum()
    assert total == pytest.approx(oracle, rel=1e-9)
    assert sum(per_group) == pytest.approx(total, rel=1e-12)


@given(shift=st.integers(-5, 5), seed=st.integers(0, 1000))
def test_rate_quantized_translation_invariance(shift, seed):
    g = torch.Generator().manual_seed(seed)
    y = torch.randn((2, 4, 4), generator=g) * 3
    mu = torch.randn((2, 4, 4), generator=g)
    sigma = torch.rand((2, 4, 4), generator=g) * 4 + 0.2
    spec = GroupSpec.near_equal(2, 1)
    base, _ = rate_quantized(y, [GaussianParams(mu, sigma)], spec)
    moved, _ = rate_quantized(y + shift, [GaussianParams(mu + shift, sigma)], spec)
    assert moved == pytest.approx(base, rel=1e-12)


def test_vanishing_scale_costs_zero_bits_at_the_mean():
    spec = GroupSpec.near_equal(1, 1)
    params = [GaussianParams(torch.zeros(1, 1, 1), torch.full((1, 1, 1), 1e-4))]
    total, _ = rate_quantized(torch.zeros(1, 1, 1), params, spec)
    assert total == 0.0


def test_far_outlier_clips_to_edge_symbol():
    y = torch.full((1, 1, 1), 500.0)
    mean = torch.zeros(1, 1, 1)
    s = quantize_symbols(y, mean)
    assert s.item() == SYMBOL_BOUND
    sigma = 20.0
    spec = GroupSpec.near_equal(1, 1)
    total, _ = rate_quantized(y, [GaussianParams(mean, torch.full((1, 1, 1), sigma))], spec)
    oracle = -math.log2(1.0 - ndtr((SYMBOL_BOUND - 0.5) / sigma))
    assert total == pytest.approx(oracle, rel=1e-9)


def test_gaussian_tables_agree_with_quantized_rate_and_coder():
    rng = np.random.default_rng(8)
    n = 700
    scale = rng.uniform(0.12, 12.0, size=n)
    y = torch.tensor(rng.normal(0, 5, size=(1, 1, n)), dtype=torch.float32)
    mean = torch.tensor(rng.normal(0, 1, size=(1, 1, n)), dtype=torch.float32)
    params = [GaussianParams(mean, torch.tensor(scale.reshape(1, 1, n), dtype=torch.float32))]
    spec = GroupSpec.near_equal(1, 1)
    target, _ = rate_quantized(y, params, spec)

    rows = gaussian_cdf_rows(scale)
    assert rows.shape == (n, 2 * SYMBOL_BOUND + 2)
    symbols = quantize_symbols(y, mean).reshape(-1)
    payload = encode_indexed(symbols + SYMBOL_BOUND, rows, np.arange(n))
    assert len(payload) * 8 <= target * 1.01 + 64
    out = decode_indexed(payload, rows, np.arange(n), n)
    np.testing.assert_array_equal(out - SYMBOL_BOUND, symbols)


def test_logistic_density_closed_form():
    d = FactorizedDensity.logistic(channels=2)
    xs = torch.linspace(-6, 6, 25, dtype=torch.float64).repeat(2, 1)
    with torch.no_grad():
        np.testing.assert_allclose(d.cdf(xs).numpy(), expit(xs.numpy()), atol=1e-7)
        mass = d.bin_mass(torch.zeros(2, 1, dtype=torch.float64))
    oracle = expit(0.5) - expit(-0.5)
    np.testing.assert_allclose(mass.numpy(), oracle, atol=1e-9)
    assert d.medians().abs().max() < 1e-4


@given(seed=st.integers(0, 500), channels=st.integers(1, 4))
def test_learned_density_cdf_is_monotone(seed, channels):
    d = FactorizedDensity(channels, seed=seed)
    xs = torch.linspace(-64, 64, 257).repeat(channels, 1)
    with torch.no_grad():
        c = d.cdf(xs)
    assert (c[:, 1:] >= c[:, :-1]).all()
    assert (c[:, 0] < 0.05).all() and (c[:, -1] > 0.95).all()


def test_hyper_quantized_rate_matches_logistic_closed_form():
    d = FactorizedDensity.logistic(channels=3)
    rng = np.random.default_rng(4)
    z = torch.tensor(rng.normal(0, 4, size=(3, 6, 6)), dtype=torch.float32)
    got = hyper_rate_quantized(z, d)
    s = np.rint(z.numpy()).astype(np.int64)
    mass = expit(s + 0.5) - expit(s - 0.5)
    assert got == pytest.approx(float(-np.log2(mass).sum()), rel=1e-6)


def test_hyper_tables_round_trip_through_coder():
    d = FactorizedDensity(channels=5, seed=1)
    rng = np.random.default_rng(9)
    z = torch.tensor(rng.normal(0, 3, size=(5, 8, 8)), dtype=torch.float32)
    rows, offsets = hyper_cdf_rows(d)
    assert rows.shape == (5, 2 * SYMBOL_BOUND + 2)
    symbols = quantize_hyper_symbols(z, d)
    idx = (symbols - offsets.reshape(-1, 1, 1)).reshape(-1)
    assert (idx >= 0).all() and (idx <= 2 * SYMBOL_BOUND).all()
    row_idx = np.repeat(np.arange(5), 64)
    payload = encode_indexed(idx, rows, row_idx)
    target = hyper_rate_quantized(z, d)
    assert len(payload) * 8 <= target * 1.01 + 64
    np.testing.assert_array_equal(decode_indexed(payload, rows, row_idx, idx.size), idx)


def test_hyper_noised_rate_empty_input_is_zero():
    d = FactorizedDensity.logistic(1)
    z = torch.zeros(1, 0, 4)
    assert float(hyper_rate_noised(z, d, torch.Generator().manual_seed(0))) == 0.0
    assert hyper_rate_quantized(z, d) == 0.0


def _toy_model(channels=6, groups=3, ctx=4):
    torch.manual_seed(0)
    spec = GroupSpec.near_equal(channels, groups)
    return GroupedEntropyModel(spec, context_channels=ctx, hidden=8), spec


def test_group_prediction_is_causal():
    model, spec = _toy_model()
    torch.manual_seed(1)
    ctx = torch.randn(4, 5, 5)
    groups = [torch.randn(s, 5, 5) for s in spec.sizes()]
    base = model.teacher_forced_params(ctx, groups)

    bumped = [g.clone() for g in groups]
    bumped[1] += 10.0
    after = model.teacher_forced_params(ctx, bumped)
    # Earlier and same-index groups see nothing; a later group must react.
    for i in range(2):
        assert torch.equal(base[i].mean, after[i].mean)
        assert torch.equal(base[i].scale, after[i].scale)
    assert not torch.allclose(base[2].mean, after[2].mean)


def test_out_of_order_group_supply_rejected():
    model, spec = _toy_model()
    ctx = torch.zeros(4, 5, 5)
    with pytest.raises(ValueError):
        model.predict_params(1, ctx, [])
    with pytest.raises(ValueError):
        model.predict_params(0, ctx, [torch.zeros(2, 5, 5)])
    with pytest.raises(ValueError):
        model.predict_params(5, ctx, [])


def test_predicted_scales_respect_floor():
    model, spec = _toy_model()
    ctx = torch.randn(4, 5, 5) * 50
    p = model.predict_params(0, ctx, [])
    assert (p.scale >= model.scale_floor).all()
    assert p.mean.shape == (spec.sizes()[0], 5, 5)


def test_gaussian_params_validation():
    with pytest.raises(ValueError):
        GaussianParams(torch.zeros(2, 2), torch.zeros(2, 2))
    with pytest.raises(ValueError):
        GaussianParams(torch.zeros(2, 2), torch.ones(3, 2))
    with pytest.raises(ValueError):
        GaussianParams(torch.full((1,), float("nan")), torch.ones(1))


def test_rate_report_checks_breakdown():
    RateReport(10.0, 7.0, per_group_bits=[3.0, 2.0], hyper_bits=2.0)
    with pytest.raises(ValueError):
        RateReport(10.0, 7.0, per_group_bits=[3.0], hyper_bits=2.0)
    with pytest.raises(ValueError):
        RateReport(-1.0, 0.0)
