"""Hyperparameters and variant selection."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

from .errors import ConfigError, InvalidK, InvalidKernel


class VariantKind(str, enum.Enum):
    FULL = "full"
    NO_TCM = "no_tcm"
    NO_CCM = "no_ccm"
    FULL_ATTENTION = "full_attention"
    TEMPORAL_INFO = "temporal_info"


class MetricKind(str, enum.Enum):
    LEARNED_MAHALANOBIS = "learned_mahalanobis"
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"
    RANDOM = "random"


@dataclass(frozen=True)
class DuetConfig:
    """All knobs of one model + training run.

    ``T`` is the look-back length, ``F`` the horizon, ``N`` the channel
    count, ``M`` the number of pattern extractors and ``k`` how many of
    them each channel is routed to.  ``d_ff`` defaults to ``2 * d``.
    """

    T: int = 96
    F: int = 96
    N: int = 7
    M: int = 4
    k: int = 2
    d: int = 128
    d0: int = 64
    d_ff: int | None = None
    kernel: int = 25
    gamma: float = 0.9
    temperature: float = 1.0
    mask_threshold: float = 0.5
    std_floor: float = 1e-5
    d_floor: float = 1e-8
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    variant: VariantKind = VariantKind.FULL
    metric_kind: MetricKind = MetricKind.LEARNED_MAHALANOBIS
    split: tuple[float, float, float] = field(default=(6.0, 2.0, 2.0))

    def __post_init__(self):
        object.__setattr__(self, "variant", VariantKind(self.variant))
        object.__setattr__(self, "metric_kind", MetricKind(self.metric_kind))
        object.__setattr__(self, "split", tuple(float(r) for r in self.split))
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 2 * self.d)
        self.validate()

    def validate(self) -> None:
        for name in ("T", "F", "N", "M", "k", "d", "d0", "d_ff", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 1 <= self.k <= self.M:
            raise InvalidK(f"topk must satisfy 1 <= k <= M (k={self.k}, M={self.M})")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidKernel(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.kernel > 2 * self.T - 1:
            raise InvalidKernel(f"kernel {self.kernel} exceeds 2T-1 = {2 * self.T - 1}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.T < 2 and self.variant != VariantKind.TEMPORAL_INFO:
            raise ConfigError("frequency-space channel distances need T >= 2")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) <= 0:
            raise ConfigError(f"split ratios must be three nonnegative numbers with positive sum, got {self.split}")

    @property
    def n_bins(self) -> int:
        """Width of the per-channel feature the channel metric acts on."""
        if self.variant == VariantKind.TEMPORAL_INFO:
            return self.T
        return self.T // 2

    @property
    def n_extractors(self) -> int:
        return 1 if self.variant == VariantKind.NO_TCM else self.M

    @property
    def n_active(self) -> int:
        return 1 if self.variant == VariantKind.NO_TCM else self.k

    def replace(self, **changes) -> "DuetConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.value
        out["metric_kind"] = self.metric_kind.value
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DuetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "split" in data:
            data["split"] = tuple(data["split"])
        return cls(**data)
