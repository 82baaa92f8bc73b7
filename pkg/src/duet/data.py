"""CSV ingestion, chronological splits, sliding windows and instance norm."""

from __future__ import annotations

import csv
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch

from .errors import EmptyDataset, InvalidSplit, NoWindows, ParseError, ShapeMismatch


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """A multichannel series stored time-major: ``values[t, n]``.

    ``labels`` is optional per-timestamp metadata (synthetic regime ids);
    it never feeds the model.
    """

    values: np.ndarray
    channel_names: tuple[str, ...]
    source_path: str = ""
    frequency_label: str = ""
    labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise EmptyDataset(f"dataset needs at least one row and one channel, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("dataset contains non-finite values")
        if len(self.channel_names) != values.shape[1]:
            raise ShapeMismatch(f"{len(self.channel_names)} channel names for {values.shape[1]} channels")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "TimeSeriesDataset":
        return TimeSeriesDataset(values, self.channel_names, self.source_path, self.frequency_label, self.labels)


def load_dataset(path, has_header: bool = True, date_column: str | None = "date",
                 frequency_label: str = "") -> TimeSeriesDataset:
    """Read a comma-separated file of channels into a dataset.

    The date column, when present (matched by header name), is dropped.
    Rows are trusted to be in ascending time order.  ``ParseError`` rows
    and columns are 1-based and count data rows and channel columns only.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if has_header:
        if not rows:
            raise EmptyDataset(f"{path}: no header row")
        header, rows = rows[0], rows[1:]
    else:
        width = len(rows[0]) if rows else 0
        header = [f"ch{i}" for i in range(width)]
    header = [h.strip() for h in header]

    keep = list(range(len(header)))
    if has_header and date_column is not None and date_column in header:
        keep.remove(header.index(date_column))
    names = [header[i] for i in keep]
    if not rows or not names:
        raise EmptyDataset(f"{path}: {len(rows)} data rows, {len(names)} channels")

    values = np.empty((len(rows), len(keep)), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(r + 1, len(row), "<ragged row>")
        for c, idx in enumerate(keep):
            cell = row[idx].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(r + 1, c + 1, cell) from None
            if not math.isfinite(v):
                raise ParseError(r + 1, c + 1, cell)
            values[r, c] = v
    return TimeSeriesDataset(values, tuple(names), path, frequency_label)


def save_dataset(ds: TimeSeriesDataset, path, date_column: str | None = "date") -> None:
    """Write ``ds`` in the ingestion format (hourly ISO timestamps if dated)."""
    start = np.datetime64("2016-07-01T00:00")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = list(ds.channel_names)
        w.writerow(([date_column] if date_column else []) + head)
        for t, row in enumerate(ds.values):
            cells = [repr(float(v)) for v in row]
            if date_column:
                stamp = str(start + np.timedelta64(t, "h")).replace("T", " ")
                cells = [stamp + ":00"] + cells
            w.writerow(cells)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[Fraction, Fraction, Fraction]

    def __post_init__(self):
        ratios = tuple(Fraction(str(r)) if not isinstance(r, Fraction) else r for r in self.ratios)
        if len(ratios) != 3:
            raise InvalidSplit(f"expected three ratios, got {len(ratios)}")
        if any(r < 0 for r in ratios) or sum(ratios) <= 0:
            raise InvalidSplit(f"split ratios must be nonnegative with positive sum: {self}")
        object.__setattr__(self, "ratios", ratios)

    @classmethod
    def parse(cls, text: str) -> "SplitSpec":
        parts = text.split(":")
        try:
            return cls(tuple(Fraction(p.strip()) for p in parts))
        except (ValueError, ZeroDivisionError):
            raise InvalidSplit(f"cannot parse split {text!r}") from None

    def as_floats(self) -> tuple[float, float, float]:
        return tuple(float(r) for r in self.ratios)


def split_dataset(ds: TimeSeriesDataset | int, spec: SplitSpec, T: int, F: int) -> tuple[range, range, range]:
    """Chronological train/val/test index ranges covering ``[0, L)``.

    Boundaries are ``floor(L * cumulative_ratio)``.  Every segment must hold
    at least ``T + F`` timestamps.
    """
    if not isinstance(spec, SplitSpec):
        spec = SplitSpec(tuple(spec))
    L = ds if isinstance(ds, int) else ds.length
    total = sum(spec.ratios)
    b1 = math.floor(L * spec.ratios[0] / total)
    b2 = math.floor(L * (spec.ratios[0] + spec.ratios[1]) / total)
    parts = (range(0, b1), range(b1, b2), range(b2, L))
    for name, r in zip(("train", "val", "test"), parts):
        if len(r) < T + F:
            raise InvalidSplit(f"{name} segment {r.start}:{r.stop} has {len(r)} timestamps, needs >= T+F = {T + F}")
    return parts


@dataclass(frozen=True, eq=False)
class WindowPair:
    X: np.ndarray  # N x T
    Y: np.ndarray  # N x F
    origin_index: int


class WindowSet(Sequence):
    """Stride-1 windows over one split segment.

    Window ``i`` has its target starting at ``origins[i]``; the look-back may
    reach into the preceding segment.  ``X`` and ``Y`` are stacked views of
    shape ``(W, N, T)`` and ``(W, N, F)``.
    """

    def __init__(self, values: np.ndarray, origins: np.ndarray, T: int, F: int):
        self.T, self.F = T, F
        self.origins = origins
        series = np.ascontiguousarray(values.T)  # N x L
        views = np.lib.stride_tricks.sliding_window_view(series, T + F, axis=1)  # N x (L-T-F+1) x (T+F)
        starts = origins - T
        block = views[:, starts, :].transpose(1, 0, 2)
        self.X = block[:, :, :T]
        self.Y = block[:, :, T:]

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return WindowPair(self.X[i], self.Y[i], int(self.origins[i]))


def make_windows(ds: TimeSeriesDataset | np.ndarray, rng: range, T: int, F: int) -> WindowSet:
    if T < 1 or F < 1:
        raise NoWindows(f"T and F must be positive (T={T}, F={F})")
    values = ds.values if isinstance(ds, TimeSeriesDataset) else np.asarray(ds)
    first = max(rng.start, T)
    last = rng.stop - F
    if last < first:
        raise NoWindows(f"range {rng.start}:{rng.stop} admits no window for T={T}, F={F}")
    return WindowSet(values, np.arange(first, last + 1), T, F)


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray | torch.Tensor
    std: np.ndarray | torch.Tensor


def instance_normalize(X, std_floor: float = 1e-5):
    """Standardize each channel row of ``X`` (shape ``(..., N, T)``).

    Population standard deviation, clamped below at ``std_floor``.  Works on
    numpy arrays and torch tensors alike.
    """
    if isinstance(X, torch.Tensor):
        mean = X.mean(dim=-1, keepdim=True)
        std = ((X - mean) ** 2).mean(dim=-1, keepdim=True).sqrt().clamp_min(std_floor)
    else:
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=-1, keepdims=True)
        std = np.maximum(np.sqrt(((X - mean) ** 2).mean(axis=-1, keepdims=True)), std_floor)
    return (X - mean) / std, NormStats(mean, std)


def instance_denormalize(Y_hat, stats: NormStats):
    if Y_hat.shape[-2] != stats.mean.shape[-2]:
        raise ShapeMismatch(f"forecast has {Y_hat.shape[-2]} channels, stats have {stats.mean.shape[-2]}")
    return Y_hat * stats.std + stats.mean


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Dataset-level z-scoring with statistics from the training segment.

    Forecast errors are reported in this scale.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: TimeSeriesDataset, train: range) -> "Standardizer":
        seg = ds.values[train.start:train.stop]
        std = seg.std(axis=0)
        return cls(seg.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, ds: TimeSeriesDataset) -> TimeSeriesDataset:
        if ds.n_channels != len(self.mean):
            raise ShapeMismatch(f"dataset has {ds.n_channels} channels, scaler has {len(self.mean)}")
        return ds.with_values((ds.values - self.mean) / self.std)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean
