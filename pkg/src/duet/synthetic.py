"""Synthetic datasets with known structure.

* ``two_regime``: alternating segments from a trend-dominant and a
  seasonal-dominant generator, each rescaled to a fixed variance so the
  regime statistics differ by construction.
* ``correlated_pair``: pairs of channels with a chosen lag-0 correlation,
  padded with independent noise channels.
* ``sinusoid_mix``: noiseless sums of sinusoids, exactly forecastable by a
  linear map.
"""

from __future__ import annotations

import numpy as np

from .data import TimeSeriesDataset
from .errors import InvalidSpec

KINDS = ("two_regime", "correlated_pair", "sinusoid_mix")

REGIME_MEANS = (1.0, -1.0)


def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    e = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = e[0] / np.sqrt(1 - phi ** 2)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + e[t]
    return out


def _standardize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    s = x.std()
    return x / s if s > 0 else x


def _trend_segment(rng: np.random.Generator, n: int) -> np.ndarray:
    drift = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
    level = np.cumsum(drift + 0.5 * rng.standard_normal(n))
    t = np.arange(n)
    ripple = 0.1 * level.std() * np.sin(2 * np.pi * t / 24 + rng.uniform(0, 2 * np.pi))
    return level + ripple


def _seasonal_segment(rng: np.random.Generator, n: int, t0: int) -> np.ndarray:
    t = np.arange(t0, t0 + n)
    a1, a2 = rng.uniform(0.8, 1.2), rng.uniform(0.3, 0.6)
    x = a1 * np.sin(2 * np.pi * t / 24 + rng.uniform(0, 2 * np.pi))
    x += a2 * np.sin(2 * np.pi * t / 12 + rng.uniform(0, 2 * np.pi))
    return x + 0.2 * _ar1(rng, n, 0.7)


def regime_labels(length: int, segment_length: int) -> np.ndarray:
    """Regime id (0 = trend, 1 = seasonal) of every timestamp."""
    return (np.arange(length) // segment_length) % 2


def pure_regime_windows(labels: np.ndarray, origins: np.ndarray, T: int) -> np.ndarray:
    """Regime id of every window whose look-back lies inside one regime, else -1."""
    out = np.full(len(origins), -1)
    for i, o in enumerate(origins):
        seg = labels[o - T:o]
        if np.all(seg == seg[0]):
            out[i] = seg[0]
    return out


def mean_pairwise_tv(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    """Mean total-variation distance ``0.5 * sum |p - q|`` over all pairs of
    rows ``p`` from ``a`` and ``q`` from ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    for s in range(0, len(a), chunk):
        total += 0.5 * np.abs(a[s:s + chunk, None, :] - b[None, :, :]).sum()
    return total / (len(a) * len(b))


def make_synthetic(kind: str, length: int, channels: int, seed: int = 0, *, T: int = 96, F: int = 96,
                   noise: float = 0.1, segment_length: int | None = None, variance_ratio: float = 4.0,
                   correlation: float = 0.95) -> TimeSeriesDataset:
    """Generate one synthetic dataset; identical arguments give identical data."""
    if kind not in KINDS:
        raise InvalidSpec(f"unknown synthetic kind {kind!r}; choose from {', '.join(KINDS)}")
    if channels < 1:
        raise InvalidSpec("channels must be positive")
    if T < 1 or F < 1 or length < 4 * (T + F):
        raise InvalidSpec(f"length {length} must be at least 4*(T+F) = {4 * (T + F)}")
    if noise < 0:
        raise InvalidSpec("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    names = tuple(f"ch{i}" for i in range(channels))
    labels = None

    if kind == "two_regime":
        seg = segment_length or 2 * (T + F)
        if seg < 2 or variance_ratio <= 0:
            raise InvalidSpec("segment_length must be >= 2 and variance_ratio positive")
        labels = regime_labels(length, seg)
        values = np.empty((length, channels))
        scales = (1.0, np.sqrt(variance_ratio))
        for start in range(0, length, seg):
            n = min(seg, length - start)
            regime = labels[start]
            for c in range(channels):
                if regime == 0:
                    part = _trend_segment(rng, n)
                else:
                    part = _seasonal_segment(rng, n, start)
                values[start:start + n, c] = REGIME_MEANS[regime] + scales[regime] * _standardize(part)
        values += noise * rng.standard_normal(values.shape)

    elif kind == "correlated_pair":
        if not -1 < correlation < 1:
            raise InvalidSpec("correlation must lie in (-1, 1)")
        if channels < 2:
            raise InvalidSpec("correlated_pair needs at least two channels")
        n_pairs = (channels + 1) // 3
        values = np.empty((length, channels))
        for p in range(n_pairs):
            z = _standardize(_ar1(rng, length, 0.9))
            w = _standardize(_ar1(rng, length, 0.9))
            values[:, 2 * p] = z
            values[:, 2 * p + 1] = correlation * z + np.sqrt(1 - correlation ** 2) * w
        for c in range(2 * n_pairs, channels):
            values[:, c] = _standardize(_ar1(rng, length, 0.9))
        values += noise * rng.standard_normal(values.shape)

    else:
        t = np.arange(length)
        values = np.zeros((length, channels))
        for c in range(channels):
            for period in (24, 12, 8):
                amp = rng.uniform(0.5, 1.5)
                values[:, c] += amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))

    return TimeSeriesDataset(values, names, f"synthetic:{kind}", "synthetic", labels)
