"""Masked channel attention block and the linear forecast head."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .channel import ChannelMask
from .errors import DeadRow, ShapeMismatch
from .temporal import _tensor, kaiming_uniform

LN_EPS = 1e-5


class FusionBlock(nn.Module):
    def __init__(self, d: int, d_ff: int, generator: torch.Generator | None = None):
        super().__init__()
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.WQ = nn.Parameter(kaiming_uniform((d, d), d, g))
        self.WK = nn.Parameter(kaiming_uniform((d, d), d, g))
        self.WV = nn.Parameter(kaiming_uniform((d, d), d, g))
        self.ln1_gain = nn.Parameter(torch.ones(d))
        self.ln1_bias = nn.Parameter(torch.zeros(d))
        self.ln2_gain = nn.Parameter(torch.ones(d))
        self.ln2_bias = nn.Parameter(torch.zeros(d))
        self.ffn_W1 = nn.Parameter(kaiming_uniform((d, d_ff), d, g))
        self.ffn_b1 = nn.Parameter(torch.zeros(d_ff))
        self.ffn_W2 = nn.Parameter(kaiming_uniform((d_ff, d), d_ff, g))
        self.ffn_b2 = nn.Parameter(torch.zeros(d))

    @property
    def d(self) -> int:
        return self.WQ.shape[0]


class Predictor(nn.Module):
    def __init__(self, d: int, F: int, generator: torch.Generator | None = None):
        super().__init__()
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.WO = nn.Parameter(kaiming_uniform((d, F), d, g))


def _mask_values(mask) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(mask, ChannelMask):
        return mask.values, mask.hard
    mask = _tensor(mask)
    return mask, mask


def masked_attention(X_temp, mask, params: FusionBlock, return_weights: bool = False):
    """Single-head scaled dot-product attention across channels.

    Positions with mask 0 get exactly zero weight.  The mask enters the
    softmax multiplicatively, ``w_ij = m_ij exp(s_ij) / sum_l m_il exp(s_il)``,
    which on a binary mask is the same as filling masked scores with -inf
    but keeps the derivative with respect to ``m`` finite on every lane.
    """
    X = _tensor(X_temp, params.WQ)
    m, hard = _mask_values(mask)
    m = m.to(X.dtype)
    hard = hard.to(X.dtype)
    N = X.shape[-2]
    if m.shape[-1] != N or m.shape[-2] != N:
        raise ShapeMismatch(f"mask of shape {tuple(m.shape)} for {N} channels")
    if bool((hard.sum(-1) == 0).any()):
        raise DeadRow("channel mask has a row with no live entry")
    Q, K, V = X @ params.WQ, X @ params.WK, X @ params.WV
    scores = Q @ K.transpose(-1, -2) / math.sqrt(params.d)
    shift = scores.masked_fill(hard == 0, float("-inf")).amax(dim=-1, keepdim=True).detach()
    e = torch.exp((scores - shift).clamp_max(0.0)) * m
    weights = e / e.sum(dim=-1, keepdim=True)
    out = weights @ V
    return (out, weights) if return_weights else out


def _layer_norm(x, gain, bias):
    return F.layer_norm(x, (x.shape[-1],), gain, bias, LN_EPS)


def fusion_block(X_temp, mask, params: FusionBlock, return_weights: bool = False):
    """Pre-norm block: attention and a GELU feed-forward, each with a residual."""
    X = _tensor(X_temp, params.WQ)
    attn, weights = masked_attention(_layer_norm(X, params.ln1_gain, params.ln1_bias), mask, params,
                                     return_weights=True)
    h = X + attn
    z = _layer_norm(h, params.ln2_gain, params.ln2_bias)
    out = h + F.gelu(z @ params.ffn_W1 + params.ffn_b1) @ params.ffn_W2 + params.ffn_b2
    return (out, weights) if return_weights else out


def predict(X_mix, params: Predictor) -> torch.Tensor:
    X = _tensor(X_mix, params.WO)
    if X.shape[-1] != params.WO.shape[0]:
        raise ShapeMismatch(f"features have width {X.shape[-1]}, predictor expects {params.WO.shape[0]}")
    return X @ params.WO
