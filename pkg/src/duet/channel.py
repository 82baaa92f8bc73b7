"""Channel clustering: frequency amplitudes, learned metric, sparse channel masks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import MetricKind
from .errors import AsymmetricDistance, SeriesTooShort, ShapeMismatch
from .temporal import _tensor

P_EPS = 1e-6


def frequency_amplitude(x) -> torch.Tensor:
    """``|DFT(x)|`` at bins ``1 .. floor(T/2)`` (DC dropped, unnormalized)."""
    x = _tensor(x)
    T = x.shape[-1]
    if T < 2:
        raise SeriesTooShort(f"need at least 2 samples, got {T}")
    return torch.fft.rfft(x, dim=-1).abs()[..., 1:T // 2 + 1]


class ChannelMetric(nn.Module):
    """Holds ``A`` for the learned Mahalanobis metric ``Q = A^T A``.

    Other metric kinds carry no parameters.
    """

    def __init__(self, n_bins: int, metric_kind: MetricKind | str = MetricKind.LEARNED_MAHALANOBIS):
        super().__init__()
        self.metric_kind = MetricKind(metric_kind)
        self.n_bins = n_bins
        if self.metric_kind == MetricKind.LEARNED_MAHALANOBIS:
            self.A = nn.Parameter(torch.eye(n_bins))
        else:
            self.A = None

    def Q(self) -> torch.Tensor:
        return self.A.T @ self.A


def _cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    dot = (a * b).sum(-1)
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    denom = na * nb
    both_zero = (na == 0) & (nb == 0)
    cos = torch.where(denom > 0, dot / torch.where(denom > 0, denom, torch.ones_like(denom)),
                      both_zero.to(dot.dtype))
    return 1 - cos


def channel_distance(a, b, params: ChannelMetric) -> torch.Tensor:
    a = _tensor(a)
    b = _tensor(b, a)
    if a.shape != b.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    kind = params.metric_kind
    if kind == MetricKind.LEARNED_MAHALANOBIS:
        if a.shape[-1] != params.n_bins:
            raise ShapeMismatch(f"metric expects {params.n_bins} bins, got {a.shape[-1]}")
        proj = (a - b) @ params.A.T.to(a.dtype)
        return (proj ** 2).sum(-1)
    if kind == MetricKind.EUCLIDEAN:
        return ((a - b) ** 2).sum(-1)
    if kind == MetricKind.COSINE:
        return _cosine_distance(a, b)
    return a.new_zeros(a.shape[:-1])


def pairwise_distances(features: torch.Tensor, params: ChannelMetric) -> torch.Tensor:
    """All-pairs distance matrix ``(..., N, N)`` from features ``(..., N, B)``."""
    a = features.unsqueeze(-2)   # (..., N, 1, B)
    b = features.unsqueeze(-3)   # (..., 1, N, B)
    kind = params.metric_kind
    if kind == MetricKind.LEARNED_MAHALANOBIS:
        D = ((a - b) @ params.A.T).pow(2).sum(-1)
    elif kind == MetricKind.EUCLIDEAN:
        D = (a - b).pow(2).sum(-1)
    elif kind == MetricKind.COSINE:
        D = _cosine_distance(a, b)
    else:
        N = features.shape[-2]
        return features.new_zeros(*features.shape[:-2], N, N)
    D = 0.5 * (D + D.transpose(-1, -2))
    eye = torch.eye(D.shape[-1], dtype=torch.bool)
    return D.masked_fill(eye, 0.0)


@dataclass(frozen=True, eq=False)
class ChannelRelation:
    D: torch.Tensor
    C: torch.Tensor
    P: torch.Tensor


def build_probability_matrix(D, gamma: float, d_floor: float = 1e-8, check: bool = True) -> ChannelRelation:
    """Inverse distances, row-normalized so each row's strongest link is ``gamma``."""
    D = _tensor(D)
    if check and D.numel() and (D - D.transpose(-1, -2)).abs().max() > 1e-6:
        raise AsymmetricDistance("distance matrix is not symmetric")
    N = D.shape[-1]
    off = ~torch.eye(N, dtype=torch.bool)
    C = torch.where(off, 1.0 / D.clamp_min(d_floor), torch.zeros_like(D))
    row_max = C.amax(dim=-1, keepdim=True)
    safe = torch.where(row_max > 0, row_max, torch.ones_like(row_max))
    P = torch.where(off, C * gamma / safe, torch.ones_like(D))
    return ChannelRelation(D, C, P)


@dataclass(frozen=True, eq=False)
class ChannelMask:
    """Binary channel mask.  ``values`` equals ``hard`` in the forward pass
    and carries the gradient of ``soft`` (straight-through)."""

    hard: torch.Tensor
    soft: torch.Tensor
    values: torch.Tensor


def sample_mask(rel: ChannelRelation | torch.Tensor, temperature: float = 1.0, mode: str = "eval",
                rng: torch.Generator | None = None, threshold: float = 0.5,
                random: bool = False) -> ChannelMask:
    """Bernoulli mask from ``P`` via two-class Gumbel-softmax (train) or a threshold (eval).

    With ``random=True`` the off-diagonal entries are fair coins and ``P`` is
    ignored.  The diagonal is always 1.
    """
    P = rel.P if isinstance(rel, ChannelRelation) else _tensor(rel)
    N = P.shape[-1]
    eye = torch.eye(N, dtype=P.dtype)
    if random:
        hard = (torch.rand(P.shape, generator=rng, dtype=P.dtype) < 0.5).to(P.dtype)
        soft = hard
        values = hard
    elif mode == "train":
        Pc = P.clamp(P_EPS, 1 - P_EPS)
        u = torch.rand((2,) + tuple(P.shape), generator=rng, dtype=P.dtype)
        u = u.clamp(torch.finfo(P.dtype).tiny, 1.0)
        g = -torch.log(-torch.log(u))
        z = (torch.log(Pc) + g[0] - torch.log1p(-Pc) - g[1]) / temperature
        soft = torch.sigmoid(z)
        hard = (z > 0).to(P.dtype)
        certain = P >= 1
        never = P <= 0
        hard = torch.where(certain, torch.ones_like(hard), torch.where(never, torch.zeros_like(hard), hard))
        soft = torch.where(certain, torch.ones_like(soft), torch.where(never, torch.zeros_like(soft), soft))
        values = hard + (soft - soft.detach())
    else:
        hard = (P >= threshold).to(P.dtype)
        soft = hard
        values = hard
    off = 1 - eye
    return ChannelMask(hard * off + eye, soft * off + eye, values * off + eye)


def channel_features(X_norm: torch.Tensor, temporal: bool = False) -> torch.Tensor:
    return X_norm if temporal else frequency_amplitude(X_norm)


def ccm_forward(X_norm, params: ChannelMetric, gamma: float, temperature: float = 1.0, mode: str = "eval",
                rng: torch.Generator | None = None, d_floor: float = 1e-8, threshold: float = 0.5,
                temporal: bool = False) -> tuple[ChannelMask, ChannelRelation]:
    """Channel mask and relation matrices for inputs of shape ``(..., N, T)``.

    ``temporal=True`` measures distances on the normalized series itself
    instead of its amplitude spectrum.
    """
    X_norm = _tensor(X_norm)
    feats = channel_features(X_norm, temporal)
    if params.A is not None and feats.shape[-1] != params.n_bins:
        raise ShapeMismatch(f"metric expects {params.n_bins} features per channel, got {feats.shape[-1]}")
    D = pairwise_distances(feats, params)
    rel = build_probability_matrix(D, gamma, d_floor, check=False)
    mask = sample_mask(rel, temperature, mode, rng, threshold, random=params.metric_kind == MetricKind.RANDOM)
    return mask, rel
