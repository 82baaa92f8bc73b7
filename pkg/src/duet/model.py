"""End-to-end forecaster: instance norm -> (TCM || CCM) -> fusion -> linear head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .channel import ChannelMask, ChannelMetric, ChannelRelation, ccm_forward
from .config import DuetConfig, MetricKind, VariantKind
from .data import NormStats, instance_denormalize, instance_normalize
from .errors import ShapeMismatch
from .fusion import FusionBlock, Predictor, fusion_block, predict
from .temporal import DistributionRouter, PatternExtractors, TemporalTrace, tcm_forward

# fixed keys so each submodule's init is independent of which others exist
_INIT_KEYS = {"router": 1, "extractors": 2, "fusion": 3, "predictor": 4}
_STREAM_KEYS = {"gate": 11, "mask": 12, "shuffle": 13}


def derive_seed(seed: int, key: int) -> int:
    return int(np.random.SeedSequence([seed, key]).generate_state(1, np.uint32)[0])


def make_generator(seed: int, key: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, key))


@dataclass
class RngStreams:
    """Independent noise sources for gating noise and mask sampling."""

    gate: torch.Generator
    mask: torch.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        return cls(make_generator(seed, _STREAM_KEYS["gate"]), make_generator(seed, _STREAM_KEYS["mask"]))

    def get_state(self) -> dict[str, torch.Tensor]:
        return {"gate": self.gate.get_state(), "mask": self.mask.get_state()}

    def set_state(self, state: dict[str, torch.Tensor]) -> None:
        self.gate.set_state(state["gate"])
        self.mask.set_state(state["mask"])


@dataclass(frozen=True, eq=False)
class DuetOutput:
    forecast: torch.Tensor        # (..., N, F), original scale of the input
    forecast_norm: torch.Tensor   # before instance denormalization
    stats: NormStats
    temporal: torch.Tensor        # (..., N, d)
    trace: TemporalTrace
    mask: ChannelMask
    relation: ChannelRelation | None
    attention: torch.Tensor       # (..., N, N)


class DuetModel(nn.Module):
    """Parameters and wiring for one configuration.

    The variant decides which submodules exist: ``no_tcm`` has no router and
    a single extractor, ``no_ccm`` / ``full_attention`` have no channel
    metric and use a fixed identity / all-ones mask.
    """

    def __init__(self, config: DuetConfig):
        super().__init__()
        self.config = config
        c = config
        seed = c.seed
        if c.variant != VariantKind.NO_TCM:
            self.router = DistributionRouter(c.T, c.d0, c.M, make_generator(seed, _INIT_KEYS["router"]))
        else:
            self.router = None
        self.extractors = PatternExtractors(c.T, c.d, c.n_extractors, make_generator(seed, _INIT_KEYS["extractors"]))
        if c.variant not in (VariantKind.NO_CCM, VariantKind.FULL_ATTENTION):
            self.metric = ChannelMetric(c.n_bins, c.metric_kind)
        else:
            self.metric = None
        self.fusion = FusionBlock(c.d, c.d_ff, make_generator(seed, _INIT_KEYS["fusion"]))
        self.predictor = Predictor(c.d, c.F, make_generator(seed, _INIT_KEYS["predictor"]))

    def fixed_mask(self, N: int, dtype) -> torch.Tensor | None:
        if self.config.variant == VariantKind.NO_CCM:
            return torch.eye(N, dtype=dtype)
        if self.config.variant == VariantKind.FULL_ATTENTION:
            return torch.ones(N, N, dtype=dtype)
        return None

    def forward(self, X, mode: str = "eval", rngs: RngStreams | None = None,
                mask_override: torch.Tensor | None = None) -> DuetOutput:
        """Forecast from look-back windows ``X`` of shape ``(..., N, T)``.

        ``mask_override`` replaces the channel mask (used to check ablation
        wiring); the CCM is then skipped.
        """
        c = self.config
        dtype = self.fusion.WQ.dtype
        X = torch.as_tensor(X, dtype=dtype)
        if X.shape[-1] != c.T:
            raise ShapeMismatch(f"look-back length {X.shape[-1]} != T = {c.T}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if rngs is None:
            rngs = RngStreams.from_seed(c.seed)
        N = X.shape[-2]

        X_norm, stats = instance_normalize(X, c.std_floor)
        temporal, trace = tcm_forward(X_norm, self.router, self.extractors, c.n_active, c.kernel, mode, rngs.gate)

        relation = None
        fixed = mask_override if mask_override is not None else self.fixed_mask(N, dtype)
        if fixed is not None:
            fixed = torch.as_tensor(fixed, dtype=dtype).expand(*X.shape[:-2], N, N)
            mask = ChannelMask(fixed, fixed, fixed)
        else:
            mask, relation = ccm_forward(
                X_norm, self.metric, c.gamma, c.temperature, mode, rngs.mask, c.d_floor, c.mask_threshold,
                temporal=c.variant == VariantKind.TEMPORAL_INFO,
            )

        mixed, attention = fusion_block(temporal, mask, self.fusion, return_weights=True)
        y_norm = predict(mixed, self.predictor)
        y = instance_denormalize(y_norm, stats)
        return DuetOutput(y, y_norm, stats, temporal, trace, mask, relation, attention)


def duet_forward(X, model: DuetModel, mode: str = "eval", rngs: RngStreams | None = None) -> torch.Tensor:
    return model(X, mode, rngs).forecast


def build_variant(config: DuetConfig) -> DuetModel:
    return DuetModel(config)


def tensor_shapes(config: DuetConfig) -> dict[str, tuple[int, ...]]:
    """Expected parameter shapes for ``config``, keyed by state-dict name."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {}
    if c.variant != VariantKind.NO_TCM:
        shapes.update({
            "router.W0_mu": (c.T, c.d0), "router.W1_mu": (c.d0, c.M),
            "router.W0_sigma": (c.T, c.d0), "router.W1_sigma": (c.d0, c.M),
            "router.WH": (c.M, c.M),
        })
    shapes["extractors.Wt"] = (c.n_extractors, c.T, c.d)
    shapes["extractors.Ws"] = (c.n_extractors, c.T, c.d)
    if c.variant not in (VariantKind.NO_CCM, VariantKind.FULL_ATTENTION) and c.metric_kind == MetricKind.LEARNED_MAHALANOBIS:
        shapes["metric.A"] = (c.n_bins, c.n_bins)
    d, d_ff = c.d, c.d_ff
    shapes.update({
        "fusion.WQ": (d, d), "fusion.WK": (d, d), "fusion.WV": (d, d),
        "fusion.ln1_gain": (d,), "fusion.ln1_bias": (d,), "fusion.ln2_gain": (d,), "fusion.ln2_bias": (d,),
        "fusion.ffn_W1": (d, d_ff), "fusion.ffn_b1": (d_ff,), "fusion.ffn_W2": (d_ff, d), "fusion.ffn_b2": (d,),
        "predictor.WO": (d, c.F),
    })
    return shapes
