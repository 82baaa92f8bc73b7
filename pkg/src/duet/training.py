"""Training loop, evaluation metrics, checkpoints and run reports."""

from __future__ import annotations

import base64
import copy
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import DuetConfig
from .data import SplitSpec, Standardizer, TimeSeriesDataset, WindowSet, make_windows, split_dataset
from .errors import ConfigMismatch, CorruptCheckpoint, DivergenceError, EmptySet, ShapeMismatch
from .model import _STREAM_KEYS, DuetModel, RngStreams, derive_seed, tensor_shapes

log = logging.getLogger(__name__)

MAGIC = b"DUETCKP1"
FORMAT_VERSION = 1


def l1_loss(Y_hat, Y):
    """Mean absolute error over every entry (torch in, torch out; else float)."""
    if Y_hat.shape != Y.shape:
        raise ShapeMismatch(f"prediction {tuple(Y_hat.shape)} vs target {tuple(Y.shape)}")
    if isinstance(Y_hat, torch.Tensor):
        return (Y_hat - torch.as_tensor(Y, dtype=Y_hat.dtype)).abs().mean()
    return float(np.mean(np.abs(np.asarray(Y_hat, dtype=np.float64) - np.asarray(Y, dtype=np.float64))))


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    n_windows: int


def compute_metrics(Y_hat, Y) -> Metrics:
    """MSE and MAE over the flattened ``(windows, N, F)`` set."""
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y_hat.shape != Y.shape:
        raise ShapeMismatch(f"prediction {Y_hat.shape} vs target {Y.shape}")
    if Y.size == 0:
        raise EmptySet("no windows to score")
    err = Y_hat - Y
    n = Y.shape[0] if Y.ndim == 3 else 1
    return Metrics(float(np.mean(err ** 2)), float(np.mean(np.abs(err))), n)


@dataclass
class TrainState:
    config: DuetConfig
    params: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    best_val_mse: float = math.inf
    epochs_since_best: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def model(self) -> DuetModel:
        m = DuetModel(self.config)
        m.load_state_dict(self.params)
        m.eval()
        return m


def _as_tensor(a, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)


@torch.no_grad()
def predict_windows(model: DuetModel, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode forecasts for stacked windows ``(W, N, T)``.

    Every batch starts from freshly seeded noise streams so the result does
    not depend on call history (this only matters for the random-mask
    variant).
    """
    out = []
    for s in range(0, len(X), batch_size):
        rngs = RngStreams.from_seed(model.config.seed)
        xb = _as_tensor(X[s:s + batch_size], model.fusion.WQ.dtype)
        out.append(model(xb, "eval", rngs).forecast.double().numpy())
    return np.concatenate(out) if out else np.empty((0,) + X.shape[1:-1] + (model.config.F,))


def fit(config: DuetConfig, train: WindowSet, val: WindowSet, *, max_steps: int | None = None,
        model: DuetModel | None = None, meta: dict | None = None) -> TrainState:
    """Mini-batch Adam on the L1 loss with early stopping on validation MSE.

    Deterministic for a given ``config.seed``: window order, gating noise and
    mask sampling each draw from their own seeded stream.  Returns the state
    holding the best-validation parameters.
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptySet("training and validation windows must be nonempty")
    model = model if model is not None else DuetModel(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    rngs = RngStreams.from_seed(config.seed)
    shuffle = np.random.Generator(np.random.PCG64(derive_seed(config.seed, _STREAM_KEYS["shuffle"])))

    X_train, Y_train = _as_tensor(train.X), _as_tensor(train.Y)
    state = TrainState(config, {}, meta=dict(meta or {}))
    best = copy.deepcopy(model.state_dict())
    step = 0
    done = False
    for epoch in range(config.max_epochs):
        model.train()
        order = shuffle.permutation(len(train))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[s:s + config.batch_size])
            out = model(X_train[idx], "train", rngs)
            loss = l1_loss(out.forecast, Y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            losses.append(value)
            if max_steps is not None and step >= max_steps:
                done = True
                break
        model.eval()
        val_metrics = compute_metrics(predict_windows(model, val.X), val.Y)
        train_loss = float(np.mean(losses))
        state.history.append({"epoch": epoch, "step": step, "train_loss": train_loss, "val_mse": val_metrics.mse})
        log.info("epoch %d step %d train_l1 %.5f val_mse %.5f", epoch, step, train_loss, val_metrics.mse)
        if val_metrics.mse < state.best_val_mse:
            state.best_val_mse = val_metrics.mse
            state.epochs_since_best = 0
            best = copy.deepcopy(model.state_dict())
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best >= config.patience:
                break
        if done:
            break

    model.load_state_dict(best)
    model.eval()
    state.params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    names = dict(model.named_parameters())
    for name, p in names.items():
        st = opt.state.get(p, {})
        if "exp_avg" in st:
            state.exp_avg[name] = st["exp_avg"].detach().clone()
            state.exp_avg_sq[name] = st["exp_avg_sq"].detach().clone()
    state.step = step
    state.rng_state = {"gate": rngs.gate.get_state(), "mask": rngs.mask.get_state(),
                       "shuffle": shuffle.bit_generator.state}
    return state


@dataclass(frozen=True)
class Evaluation:
    metrics: Metrics
    per_step_mse: list[float]
    per_step_mae: list[float]
    predictions: np.ndarray = field(repr=False)


def evaluate(state: TrainState | DuetModel, windows: WindowSet) -> Evaluation:
    model = state.model() if isinstance(state, TrainState) else state
    c = model.config
    if windows.X.shape[1] != c.N or windows.T != c.T or windows.F != c.F:
        raise ConfigMismatch(
            f"model expects N={c.N}, T={c.T}, F={c.F}; data has N={windows.X.shape[1]}, T={windows.T}, F={windows.F}")
    if len(windows) == 0:
        raise EmptySet("no test windows")
    pred = predict_windows(model, windows.X)
    err = pred - windows.Y
    return Evaluation(
        compute_metrics(pred, windows.Y),
        [float(v) for v in np.mean(err ** 2, axis=(0, 1))],
        [float(v) for v in np.mean(np.abs(err), axis=(0, 1))],
        pred,
    )


# ---------------------------------------------------------------- checkpoints

def _state_tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    out = [(f"param.{k}", v) for k, v in state.params.items()]
    out += [(f"adam_m.{k}", v) for k, v in state.exp_avg.items()]
    out += [(f"adam_v.{k}", v) for k, v in state.exp_avg_sq.items()]
    return out


def _encode_rng(rng_state: dict) -> dict:
    out = {}
    for key in ("gate", "mask"):
        if key in rng_state:
            out[key] = base64.b64encode(rng_state[key].numpy().tobytes()).decode("ascii")
    if "shuffle" in rng_state:
        out["shuffle"] = rng_state["shuffle"]
    return out


def _decode_rng(data: dict) -> dict:
    out = {}
    for key in ("gate", "mask"):
        if key in data:
            out[key] = torch.from_numpy(np.frombuffer(base64.b64decode(data[key]), dtype=np.uint8).copy())
    if "shuffle" in data:
        out["shuffle"] = data["shuffle"]
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Write ``MAGIC | u64 manifest length | JSON manifest | float32 LE tensors``."""
    entries, blobs, offset = [], [], 0
    for name, t in _state_tensors(state):
        raw = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "tensors": entries,
        "train": {"step": state.step, "best_val_mse": state.best_val_mse,
                  "epochs_since_best": state.epochs_since_best, "history": state.history},
        "rng": _encode_rng(state.rng_state),
        "meta": state.meta,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic or truncated header")
    (n,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(raw):
        raise CorruptCheckpoint(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start:start + n].decode("utf-8"))
        config = DuetConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported format {manifest.get('format')}")
    body = raw[start + n:]
    expected_len = sum(e["nbytes"] for e in entries)
    if len(body) != expected_len:
        raise CorruptCheckpoint(f"{path}: tensor data is {len(body)} bytes, manifest declares {expected_len}")

    shapes = tensor_shapes(config)
    groups: dict[str, dict[str, torch.Tensor]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        kind, _, pname = name.partition(".")
        if kind not in groups or pname not in shapes:
            raise CorruptCheckpoint(f"{path}: unexpected tensor {name!r}")
        if shape != shapes[pname]:
            raise CorruptCheckpoint(f"{path}: tensor {name!r} has shape {shape}, config implies {shapes[pname]}")
        if e["nbytes"] != 4 * int(np.prod(shape, dtype=np.int64)) or e["offset"] + e["nbytes"] > len(body):
            raise CorruptCheckpoint(f"{path}: tensor {name!r} byte range is inconsistent with its shape")
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(shape, dtype=np.int64)), offset=e["offset"])
        groups[kind][pname] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
    missing = set(shapes) - set(groups["param"])
    if missing:
        raise CorruptCheckpoint(f"{path}: missing tensors {sorted(missing)}")

    train = manifest.get("train", {})
    return TrainState(
        config=config,
        params=groups["param"],
        exp_avg=groups["adam_m"],
        exp_avg_sq=groups["adam_v"],
        step=train.get("step", 0),
        best_val_mse=train.get("best_val_mse", math.inf),
        epochs_since_best=train.get("epochs_since_best", 0),
        rng_state=_decode_rng(manifest.get("rng", {})),
        history=train.get("history", []),
        meta=manifest.get("meta", {}),
    )


# ---------------------------------------------------------------- experiments

@dataclass
class PreparedData:
    dataset: TimeSeriesDataset       # standardized with train statistics
    scaler: Standardizer
    ranges: tuple[range, range, range]
    windows: dict[str, WindowSet]


def prepare_data(ds: TimeSeriesDataset, config: DuetConfig, scaler: Standardizer | None = None) -> PreparedData:
    """Split chronologically, z-score with train statistics and window every part."""
    ranges = split_dataset(ds, SplitSpec(config.split), config.T, config.F)
    scaler = scaler if scaler is not None else Standardizer.fit(ds, ranges[0])
    scaled = scaler.transform(ds)
    windows = {name: make_windows(scaled, r, config.T, config.F) for name, r in zip(("train", "val", "test"), ranges)}
    return PreparedData(scaled, scaler, ranges, windows)


def scaler_meta(scaler: Standardizer) -> dict:
    return {"mean": [float(v) for v in scaler.mean], "std": [float(v) for v in scaler.std]}


def scaler_from_meta(meta: dict) -> Standardizer:
    return Standardizer(np.asarray(meta["mean"], dtype=np.float64), np.asarray(meta["std"], dtype=np.float64))


REPORT_KEYS = ("dataset", "variant", "metric_kind", "T", "F", "M", "k", "seed", "split", "mse", "mae",
               "n_windows", "normalized_scale", "wall_seconds")


def make_report(config: DuetConfig, dataset: str, split: str, result: Evaluation, wall_seconds: float,
                extra: dict | None = None) -> dict:
    report = {
        "dataset": dataset,
        "variant": config.variant.value,
        "metric_kind": config.metric_kind.value,
        "T": config.T, "F": config.F, "M": config.M, "k": config.k,
        "seed": config.seed,
        "split": split,
        "mse": result.metrics.mse,
        "mae": result.metrics.mae,
        "n_windows": result.metrics.n_windows,
        "normalized_scale": True,
        "wall_seconds": round(wall_seconds, 3),
        "per_step_mse": result.per_step_mse,
        "per_step_mae": result.per_step_mae,
    }
    if extra:
        report.update(extra)
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def run_experiment(ds: TimeSeriesDataset, config: DuetConfig, dataset_name: str = "",
                   max_steps: int | None = None) -> tuple[TrainState, Evaluation, dict, PreparedData]:
    """Train on the train part, select on val, score the test part."""
    if ds.n_channels != config.N:
        raise ConfigMismatch(f"config has N={config.N}, dataset has {ds.n_channels} channels")
    t0 = time.perf_counter()
    prep = prepare_data(ds, config)
    meta = {"dataset": dataset_name or os.path.basename(ds.source_path), "channel_names": list(ds.channel_names),
            "scaler": scaler_meta(prep.scaler)}
    state = fit(config, prep.windows["train"], prep.windows["val"], max_steps=max_steps, meta=meta)
    result = evaluate(state, prep.windows["test"])
    report = make_report(config, meta["dataset"], "test", result, time.perf_counter() - t0)
    return state, result, report, prep
