import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from duet.channel import (
    ChannelMetric, build_probability_matrix, ccm_forward, channel_distance, frequency_amplitude,
    pairwise_distances, sample_mask,
)
from duet.config import MetricKind
from duet.errors import AsymmetricDistance, SeriesTooShort, ShapeMismatch
from duet.oracles import dft_oracle, reference_distances, reference_probabilities

from conftest import t64

KINDS = [MetricKind.LEARNED_MAHALANOBIS, MetricKind.EUCLIDEAN, MetricKind.COSINE]


def random_metric(B, seed=0, kind=MetricKind.LEARNED_MAHALANOBIS):
    m = ChannelMetric(B, kind).double()
    if m.A is not None:
        with torch.no_grad():
            m.A.copy_(torch.randn(B, B, generator=torch.Generator().manual_seed(seed), dtype=torch.float64))
    return m


# ---------------------------------------------------------------- amplitudes

def test_pure_sine_amplitude():
    t = np.arange(96)
    amp = frequency_amplitude(t64(np.sin(2 * np.pi * 8 * t / 96))).numpy()
    assert amp.shape == (48,)
    assert abs(amp[7] - 48) < 1e-9
    assert np.all(np.delete(amp, 7) <= 1e-6)


def test_zero_signal_has_zero_spectrum():
    assert torch.all(frequency_amplitude(torch.zeros(10, dtype=torch.float64)) == 0)


def test_odd_length_matches_dft(rng):
    x = rng.standard_normal(17)
    amp = frequency_amplitude(t64(x)).numpy()
    assert amp.shape == (8,)
    np.testing.assert_allclose(amp, dft_oracle(x), rtol=1e-6, atol=1e-12)


def test_too_short():
    with pytest.raises(SeriesTooShort):
        frequency_amplitude(t64([1.0]))


def test_dft_oracle_impulse_and_cosine():
    x = np.zeros(12)
    x[0] = 1
    np.testing.assert_allclose(dft_oracle(x), np.ones(6), atol=1e-12)
    c = dft_oracle(np.cos(2 * np.pi * 3 * np.arange(32) / 32))
    assert abs(c[2] - 16) < 1e-9
    assert np.all(np.delete(c, 2) < 1e-9)


@settings(max_examples=120, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1))
def test_amplitudes_match_dft_for_every_length(T, seed):
    x = np.random.default_rng(seed).standard_normal(T)
    np.testing.assert_allclose(frequency_amplitude(t64(x)).numpy(), dft_oracle(x), rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- distances

@pytest.mark.parametrize("kind", KINDS)
def test_self_distance_is_zero(kind, rng):
    a = t64(rng.standard_normal(6))
    assert channel_distance(a, a, random_metric(6, kind=kind)).item() == pytest.approx(0, abs=1e-12)


def test_identity_metric_is_squared_euclidean(rng):
    a, b = t64(rng.standard_normal(5)), t64(rng.standard_normal(5))
    m = ChannelMetric(5).double()
    assert channel_distance(a, b, m).item() == pytest.approx(float(((a - b) ** 2).sum()), rel=1e-12)


def test_mahalanobis_matches_matvec_oracle(rng):
    m = random_metric(6, seed=3)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    v = m.A.detach().numpy() @ (a - b)
    assert channel_distance(t64(a), t64(b), m).item() == pytest.approx(float(v @ v), rel=1e-6)


def test_cosine_zero_guard():
    m = ChannelMetric(3, MetricKind.COSINE)
    z = torch.zeros(3, dtype=torch.float64)
    assert float(channel_distance(z, z, m)) == 0.0
    assert float(channel_distance(z, t64([1.0, 0, 0]), m)) == 1.0


def test_distance_shape_check():
    with pytest.raises(ShapeMismatch):
        channel_distance(t64(np.zeros(3)), t64(np.zeros(4)), ChannelMetric(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(KINDS))
def test_distance_is_exactly_symmetric(seed, kind):
    g = np.random.default_rng(seed)
    m = random_metric(5, seed % 100, kind)
    a, b = t64(g.standard_normal(5)), t64(g.standard_normal(5))
    assert torch.equal(channel_distance(a, b, m), channel_distance(b, a, m))


def test_q_is_positive_semidefinite(rng):
    m = random_metric(8, seed=7)
    Q = m.Q().detach().numpy()
    xs = rng.standard_normal((1000, 8))
    assert np.all(np.einsum("ni,ij,nj->n", xs, Q, xs) >= -1e-9)
    np.testing.assert_allclose(Q, Q.T)


@pytest.mark.parametrize("kind", KINDS)
def test_pairwise_matches_all_pairs_loop(kind, rng):
    m = random_metric(6, seed=2, kind=kind)
    feats = rng.standard_normal((4, 6))
    D = pairwise_distances(t64(feats), m).detach().numpy()
    A = m.A.detach().numpy() if m.A is not None else None
    np.testing.assert_allclose(D, reference_distances(feats, A, kind.value), atol=1e-6)
    assert np.all(np.diag(D) == 0)
    assert np.array_equal(D, D.T)


# ---------------------------------------------------------------- probabilities

def test_two_channel_probability():
    rel = build_probability_matrix(t64([[0, 2.0], [2.0, 0]]), 0.9)
    assert rel.C[0, 1] == 0.5
    np.testing.assert_allclose(rel.P.numpy(), [[1, 0.9], [0.9, 1]])


def test_single_channel():
    assert build_probability_matrix(t64([[0.0]]), 0.9).P.tolist() == [[1.0]]


def test_identical_channels_hit_the_floor():
    rel = build_probability_matrix(t64([[0, 0.0], [0.0, 0]]), 0.9, 1e-8)
    assert rel.C[0, 1] == pytest.approx(1e8)
    assert rel.P[0, 1] == pytest.approx(0.9)
    assert torch.isfinite(rel.P).all()


def test_asymmetric_distance_rejected():
    with pytest.raises(AsymmetricDistance):
        build_probability_matrix(t64([[0, 1.0], [2.0, 0]]), 0.9)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.floats(0.05, 0.95))
def test_probability_invariants(seed, N, gamma):
    g = np.random.default_rng(seed)
    X = g.random((N, N)) * 5
    D = (X + X.T) / 2
    np.fill_diagonal(D, 0)
    rel = build_probability_matrix(t64(D), gamma)
    P = rel.P.numpy()
    assert np.all(np.diag(P) == 1) and np.all(np.diag(rel.C.numpy()) == 0)
    off = ~np.eye(N, dtype=bool)
    assert np.all(P[off] >= 0) and np.all(P[off] <= gamma + 1e-12)
    for i in range(N):
        if N > 1:
            assert max(P[i][off[i]]) == pytest.approx(gamma)
    np.testing.assert_allclose(P, reference_probabilities(D, gamma), atol=1e-12)


# ---------------------------------------------------------------- masks

def test_certain_and_impossible_links():
    N = 4
    ones = torch.ones(N, N, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    assert torch.equal(sample_mask(ones, mode="train", rng=g).hard, ones)
    eye = torch.eye(N, dtype=torch.float64)
    assert torch.equal(sample_mask(eye, mode="train", rng=g).hard, eye)
    assert torch.equal(sample_mask(ones, mode="eval").hard, ones)
    assert torch.equal(sample_mask(eye, mode="eval").hard, eye)


def test_bernoulli_frequency_at_point_seven():
    P = t64([[1, 0.7], [0.7, 1]]).expand(10_000, 2, 2)
    mask = sample_mask(P, 1.0, "train", torch.Generator().manual_seed(0))
    assert abs(float(mask.hard[:, 0, 1].mean()) - 0.7) <= 0.02
    assert torch.all(mask.hard[:, 0, 0] == 1)


def test_eval_threshold():
    P = t64([[1, 0.5, 0.49], [0.2, 1, 0.9], [0.6, 0.1, 1]])
    assert sample_mask(P, mode="eval").hard.tolist() == [[1, 1, 0], [0, 1, 1], [1, 0, 1]]


def test_straight_through_values():
    P = t64([[1, 0.3, 0.6], [0.2, 1, 0.9], [0.6, 0.1, 1]]).requires_grad_()
    m = sample_mask(P, 0.5, "train", torch.Generator().manual_seed(3))
    assert torch.equal(m.values.detach(), m.hard)
    m.values.sum().backward()
    off = ~torch.eye(3, dtype=torch.bool)
    assert torch.all(P.grad[off] > 0)


def test_random_mask_ignores_p():
    P = torch.zeros(2000, 3, 3, dtype=torch.float64)
    m = sample_mask(P, mode="eval", rng=torch.Generator().manual_seed(0), random=True)
    frac = float(m.hard[:, 0, 1].mean())
    assert abs(frac - 0.5) < 0.05
    assert torch.all(torch.diagonal(m.hard, dim1=-2, dim2=-1) == 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.sampled_from(["train", "eval"]))
def test_mask_diagonal_and_binary(seed, N, mode):
    P = torch.rand(N, N, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    m = sample_mask(P, 1.0, mode, torch.Generator().manual_seed(seed + 1))
    assert torch.all(torch.diagonal(m.hard) == 1)
    assert set(m.hard.unique().tolist()) <= {0.0, 1.0}


# ---------------------------------------------------------------- module

def test_duplicate_channels_are_connected(rng):
    x = rng.standard_normal(16)
    X = t64(np.stack([x, x, rng.standard_normal(16)]))
    with torch.no_grad():
        mask, rel = ccm_forward(X, ChannelMetric(8).double(), 0.9)
    assert rel.D[0, 1] == 0
    assert rel.P[0, 1] == pytest.approx(0.9)
    assert mask.hard[0, 1] == 1


def test_single_channel_module(rng):
    mask, _ = ccm_forward(t64(rng.standard_normal((1, 10))), ChannelMetric(5).double(), 0.9)
    assert mask.hard.tolist() == [[1.0]]


def test_module_distances_match_oracle(rng):
    X = rng.standard_normal((4, 12))
    m = random_metric(6, seed=9)
    _, rel = ccm_forward(t64(X), m, 0.9)
    amps = np.stack([dft_oracle(r) for r in X])
    np.testing.assert_allclose(rel.D.detach().numpy(), reference_distances(amps, m.A.detach().numpy()),
                               rtol=1e-6, atol=1e-9)


def test_temporal_distances_use_raw_series(rng):
    X = rng.standard_normal((3, 6))
    _, rel = ccm_forward(t64(X), ChannelMetric(6).double(), 0.9, temporal=True)
    np.testing.assert_allclose(rel.D.detach().numpy(), reference_distances(X, np.eye(6)), atol=1e-12)


def test_gradient_reaches_metric_in_train_mode(rng):
    m = random_metric(6, seed=1)
    X = t64(rng.standard_normal((8, 4, 12)))
    mask, _ = ccm_forward(X, m, 0.9, 1.0, "train", torch.Generator().manual_seed(0))
    w = torch.randn(mask.values.shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    (mask.values * w).sum().backward()
    assert m.A.grad is not None and float(m.A.grad.abs().sum()) > 0
