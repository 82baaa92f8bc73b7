"""Temporal clustering: noisy top-k routing over linear trend/seasonal extractors.

Every operation here is channel-independent: inputs have shape
``(..., T)`` or ``(..., N, T)`` and leading dimensions are carried through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidK, InvalidKernel, ShapeMismatch, UnknownExtractor


def _tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def kaiming_uniform(shape, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    # same bound as the torch Linear default (kaiming_uniform with a=sqrt(5))
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator) * 2 - 1) * bound


def softplus(z: torch.Tensor) -> torch.Tensor:
    """Overflow-safe ``log(1 + exp(z))``."""
    return torch.log1p(torch.exp(-z.abs())) + z.clamp_min(0)


class DistributionRouter(nn.Module):
    """Mean/scale encoders plus the logit projection of the gating network."""

    def __init__(self, T: int, d0: int, M: int, generator: torch.Generator | None = None):
        super().__init__()
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.W0_mu = nn.Parameter(kaiming_uniform((T, d0), T, g))
        self.W1_mu = nn.Parameter(kaiming_uniform((d0, M), d0, g))
        self.W0_sigma = nn.Parameter(kaiming_uniform((T, d0), T, g))
        self.W1_sigma = nn.Parameter(kaiming_uniform((d0, M), d0, g))
        self.WH = nn.Parameter(kaiming_uniform((M, M), M, g))

    @property
    def T(self) -> int:
        return self.W0_mu.shape[0]

    @property
    def M(self) -> int:
        return self.WH.shape[0]


class PatternExtractors(nn.Module):
    """``M`` pairs of linear maps ``T -> d`` for the trend and seasonal parts."""

    def __init__(self, T: int, d: int, M: int, generator: torch.Generator | None = None):
        super().__init__()
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.Wt = nn.Parameter(kaiming_uniform((M, T, d), T, g))
        self.Ws = nn.Parameter(kaiming_uniform((M, T, d), T, g))

    @property
    def M(self) -> int:
        return self.Wt.shape[0]


def encode_distribution(x, params: DistributionRouter) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(mu, sigma_raw)``, each of length ``M``; ``sigma_raw`` is pre-softplus."""
    x = _tensor(x, params.W0_mu)
    if x.shape[-1] != params.T:
        raise ShapeMismatch(f"router expects length {params.T}, got {x.shape[-1]}")
    mu = torch.relu(x @ params.W0_mu) @ params.W1_mu
    sigma_raw = torch.relu(x @ params.W0_sigma) @ params.W1_sigma
    return mu, sigma_raw


def sample_gate_logits(mu, sigma_raw, eps, params: DistributionRouter) -> torch.Tensor:
    """``H = WH @ (mu + eps * softplus(sigma_raw))`` along the last axis."""
    mu = _tensor(mu, params.WH)
    z = mu + _tensor(eps, mu) * softplus(_tensor(sigma_raw, mu))
    return z @ params.WH.T


def top_k_gates(H: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Dense sparse-softmax gates and the selected indices (ranked, best first).

    Ties go to the lowest index.  Non-selected positions get exactly zero.
    """
    M = H.shape[-1]
    if not 1 <= k <= M:
        raise InvalidK(f"k must be in [1, {M}], got {k}")
    order = torch.sort(H, dim=-1, descending=True, stable=True).indices
    idx = order[..., :k]
    kept = torch.full_like(H, float("-inf")).scatter(-1, idx, H.gather(-1, idx))
    return torch.softmax(kept, dim=-1), idx


@dataclass(frozen=True, eq=False)
class GateSelection:
    logits: np.ndarray
    indices: np.ndarray   # ascending
    weights: np.ndarray   # aligned with indices
    noise_draw: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.zeros(len(self.logits))
        out[self.indices] = self.weights
        return out


def keep_top_k(H, k: int, noise_draw=None) -> GateSelection:
    H = _tensor(H).detach()
    if H.ndim != 1:
        raise ShapeMismatch("keep_top_k takes a single logit vector")
    dense, idx = top_k_gates(H, k)
    idx = torch.sort(idx).values
    noise = np.zeros(H.shape[0]) if noise_draw is None else np.asarray(_tensor(noise_draw).detach())
    return GateSelection(H.numpy().copy(), idx.numpy().copy(), dense[idx].numpy().copy(), noise)


@dataclass(frozen=True, eq=False)
class DecompositionPair:
    trend: torch.Tensor
    seasonal: torch.Tensor


def decompose_series(x, kernel: int) -> DecompositionPair:
    """Centered moving average with edge replication; seasonal is the remainder."""
    x = _tensor(x)
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidKernel(f"kernel must be a positive odd integer, got {kernel}")
    T = x.shape[-1]
    if kernel > 2 * T - 1:
        raise InvalidKernel(f"kernel {kernel} exceeds 2T-1 = {2 * T - 1}")
    pad = (kernel - 1) // 2
    lead = x.shape[:-1]
    padded = torch.cat([x[..., :1].expand(*lead, pad), x, x[..., -1:].expand(*lead, pad)], dim=-1)
    trend = padded.unfold(-1, kernel, 1).mean(dim=-1)
    return DecompositionPair(trend, x - trend)


def extract_pattern(pair: DecompositionPair, extractor_id: int, params: PatternExtractors) -> torch.Tensor:
    if not 0 <= extractor_id < params.M:
        raise UnknownExtractor(f"extractor {extractor_id} not in [0, {params.M})")
    trend = _tensor(pair.trend, params.Wt)
    seasonal = _tensor(pair.seasonal, params.Wt)
    return trend @ params.Wt[extractor_id] + seasonal @ params.Ws[extractor_id]


def aggregate_features(features, gates) -> torch.Tensor:
    """Gate-weighted sum of the selected extractors' features.

    ``gates`` is a ``GateSelection`` or a plain weight vector aligned with
    ``features``.
    """
    weights = gates.weights if isinstance(gates, GateSelection) else gates
    feats = torch.stack([_tensor(f) for f in features]) if isinstance(features, (list, tuple)) else _tensor(features)
    weights = _tensor(weights, feats)
    if feats.shape[0] != weights.shape[-1]:
        raise ShapeMismatch(f"{feats.shape[0]} features for {weights.shape[-1]} gate weights")
    return torch.tensordot(weights, feats, dims=([-1], [0]))


@dataclass(frozen=True, eq=False)
class TemporalTrace:
    """Per-row routing record of one ``tcm_forward`` call (shapes ``(..., N, .)``)."""

    logits: torch.Tensor
    gates: torch.Tensor     # dense, (..., N, M)
    indices: torch.Tensor   # ranked, (..., N, k)
    eps: torch.Tensor

    def selections(self, batch_index: int | None = None) -> list[GateSelection]:
        def pick(t):
            t = t.detach()
            return t if batch_index is None else t[batch_index]
        logits, gates, idx, eps = map(pick, (self.logits, self.gates, self.indices, self.eps))
        out = []
        for n in range(logits.shape[0]):
            ids = torch.sort(idx[n]).values
            out.append(GateSelection(logits[n].numpy().copy(), ids.numpy().copy(),
                                     gates[n][ids].numpy().copy(), eps[n].numpy().copy()))
        return out


def tcm_forward(X_norm, router: DistributionRouter | None, extractors: PatternExtractors, k: int,
                kernel: int, mode: str = "eval", rng: torch.Generator | None = None,
                eps: torch.Tensor | None = None) -> tuple[torch.Tensor, TemporalTrace]:
    """Route every channel row to ``k`` extractors and mix their features.

    Only the selected extractors are evaluated.  With ``router=None`` the
    single extractor is applied with gate 1 (the no-TCM ablation).  In
    ``train`` mode the gating noise comes from ``rng`` unless ``eps`` is
    given; in ``eval`` mode it is zero.
    """
    X_norm = _tensor(X_norm, extractors.Wt)
    lead, T = X_norm.shape[:-1], X_norm.shape[-1]
    M = extractors.M
    pair = decompose_series(X_norm, kernel)

    if router is None:
        if M != 1 or k != 1:
            raise InvalidK("a router-less temporal module needs exactly one extractor and k=1")
        zeros = X_norm.new_zeros(*lead, 1)
        trace = TemporalTrace(zeros, torch.ones_like(zeros), torch.zeros(*lead, 1, dtype=torch.long), zeros)
        return extract_pattern(pair, 0, extractors), trace

    if router.M != M:
        raise ShapeMismatch(f"router has {router.M} outputs for {M} extractors")
    mu, sigma_raw = encode_distribution(X_norm, router)
    if eps is None:
        if mode == "train":
            eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
        else:
            eps = torch.zeros_like(mu)
    H = sample_gate_logits(mu, sigma_raw, eps, router)
    gates, idx = top_k_gates(H, k)

    trend = pair.trend.reshape(-1, T)
    seasonal = pair.seasonal.reshape(-1, T)
    flat_idx = idx.reshape(-1, k)
    flat_gates = gates.reshape(-1, M)
    out = trend.new_zeros(trend.shape[0], extractors.Wt.shape[-1])
    for m in range(M):
        rows = (flat_idx == m).any(dim=-1).nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        feat = trend[rows] @ extractors.Wt[m] + seasonal[rows] @ extractors.Ws[m]
        out = out.index_add(0, rows, feat * flat_gates[rows, m].unsqueeze(-1))
    features = out.reshape(*lead, -1)
    return features, TemporalTrace(H, gates, idx, eps)
