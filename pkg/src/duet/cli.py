"""Command-line harness: train, eval, inspect, ablate, sweep and synth.

Exit codes: 0 success, 2 bad flags or configuration, 3 data problems,
4 training divergence.  Every failure prints exactly one line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import DuetConfig, MetricKind, VariantKind
from .data import SplitSpec, load_dataset, save_dataset
from .errors import (
    ConfigError, ConfigMismatch, CorruptCheckpoint, DataError, DivergenceError, DuetError, WindowOutOfRange,
)
from .model import RngStreams
from .synthetic import KINDS, make_synthetic
from .training import (
    evaluate, load_checkpoint, make_report, prepare_data, run_experiment, save_checkpoint, scaler_from_meta,
    write_report,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _split(text: str) -> str:
    try:
        SplitSpec.parse(text)
    except (DuetError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lookback", type=int, default=96)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--split", type=_split, default="6:2:2")
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--topk", type=int, default=2)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--kernel", type=int, default=25)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--metric", choices=[m.value for m in MetricKind], default=MetricKind.LEARNED_MAHALANOBIS.value)
    # overrides
    p.add_argument("--d0", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="duet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="fit one model and write model.ckpt + manifest.json")
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=[v.value for v in VariantKind], default=VariantKind.FULL.value)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a checkpoint on one split part")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split-part", choices=["train", "val", "test"], default="test")
    p.add_argument("--report", required=True)

    p = sub.add_parser("inspect", help="export gate weights or channel mask of one window as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--what", choices=["gates", "mask"], required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--split-part", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and score every (variant, seed) cell")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", type=_name_list, required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    _add_model_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="vary the number of extractors M")
    p.add_argument("--data", required=True)
    p.add_argument("--experts-list", type=_int_list, required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--variant", choices=[v.value for v in VariantKind], default=VariantKind.FULL.value)
    _add_model_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lookback", type=int, default=96)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------- helpers

def _config(args, N: int, **extra) -> DuetConfig:
    values = dict(
        T=args.lookback, F=args.horizon, N=N, M=args.experts, k=args.topk, gamma=args.gamma,
        kernel=args.kernel, d=args.d, d0=args.d0, d_ff=args.d_ff, lr=args.lr, batch_size=args.batch_size,
        max_epochs=args.max_epochs, patience=args.patience, temperature=args.temperature,
        metric_kind=args.metric, split=tuple(float(r) for r in SplitSpec.parse(args.split).ratios),
    )
    values.update(extra)
    cfg = DuetConfig(**values)
    cfg.validate()
    return cfg


def _build_id() -> str:
    from . import __version__
    return f"duet {__version__}; torch {torch.__version__}; numpy {np.__version__}; python {platform.python_version()}"


def _write_manifest(path: Path, command: str, config: DuetConfig | None, inputs: list[str], outputs: list[str],
                    **extra) -> dict:
    manifest = {
        "command": command,
        "config": config.to_dict() if config is not None else None,
        "inputs": inputs,
        "outputs": outputs,
        "build": _build_id(),
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    manifest.update(extra)
    _dump_json(manifest, path)
    return manifest


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_for_checkpoint(args):
    state = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if ds.n_channels != state.config.N:
        raise ConfigMismatch(f"checkpoint was trained on {state.config.N} channels, data has {ds.n_channels}")
    scaler = scaler_from_meta(state.meta["scaler"]) if "scaler" in state.meta else None
    prep = prepare_data(ds, state.config, scaler)
    return state, ds, prep


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg = _config(args, ds.n_channels, seed=args.seed, variant=args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = ["manifest.json", "model.ckpt", "report.json"]
    manifest = _write_manifest(out / "manifest.json", "train", cfg, [os.path.abspath(args.data)],
                               [str(out / f) for f in files])
    t0 = time.perf_counter()
    state, _, report, _ = run_experiment(ds, cfg, Path(args.data).stem, max_steps=args.max_steps)
    save_checkpoint(state, out / "model.ckpt")
    write_report(report, out / "report.json")
    manifest["wall_seconds"] = round(time.perf_counter() - t0, 3)
    _dump_json(manifest, out / "manifest.json")
    print(f"{report['mse']!r}\t{report['mae']!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, ds, prep = _load_for_checkpoint(args)
    t0 = time.perf_counter()
    result = evaluate(state, prep.windows[args.split_part])
    name = state.meta.get("dataset") or Path(args.data).stem
    report = make_report(state.config, name, args.split_part, result, time.perf_counter() - t0)
    write_report(report, args.report)
    print(f"{report['mse']!r}\t{report['mae']!r}")
    return EXIT_OK


@torch.no_grad()
def cmd_inspect(args) -> int:
    state, ds, prep = _load_for_checkpoint(args)
    windows = prep.windows[args.split_part]
    if not 0 <= args.window < len(windows):
        raise WindowOutOfRange(f"window {args.window} outside 0..{len(windows) - 1} of the {args.split_part} part")
    model = state.model()
    x = torch.as_tensor(windows.X[args.window], dtype=model.fusion.WQ.dtype)
    outp = model(x, "eval", RngStreams.from_seed(state.config.seed))
    names = list(ds.channel_names)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if args.what == "gates":
            gates = outp.trace.gates.double().numpy()
            w.writerow(["channel"] + [f"expert_{m}" for m in range(gates.shape[-1])])
            for name, row in zip(names, gates):
                w.writerow([name] + [repr(float(v)) for v in row])
        else:
            mask = outp.mask.hard.double().numpy()
            P = outp.relation.P.double().numpy() if outp.relation is not None else mask
            w.writerow(["matrix", "channel"] + names)
            for label, mat in (("P", P), ("M", mask)):
                for name, row in zip(names, mat):
                    w.writerow([label, name] + [repr(float(v)) for v in row])
    return EXIT_OK


def _run_cell(data: str, cfg: DuetConfig, out_dir: str, max_steps) -> dict:
    """One (variant, seed) run in its own directory; returns the report."""
    torch.set_num_threads(1)
    ds = load_dataset(data)
    state, _, report, _ = run_experiment(ds, cfg, Path(data).stem, max_steps=max_steps)
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(state, os.path.join(out_dir, "model.ckpt"))
    write_report(report, os.path.join(out_dir, "report.json"))
    return report


def _run_cells(cells: list[tuple[str, str, DuetConfig, str]], data: str, max_steps) -> list[dict]:
    """Run cells, in parallel when ``DUET_THREADS`` > 1; failures become records."""
    threads = max(1, int(os.environ.get("DUET_THREADS", "1") or 1))
    records = []
    if threads == 1:
        for key, label, cfg, out_dir in cells:
            try:
                records.append({"key": key, "label": label, "report": _run_cell(data, cfg, out_dir, max_steps)})
            except (DuetError, ValueError) as exc:
                records.append({"key": key, "label": label, "error": f"{type(exc).__name__}: {exc}"})
        return records
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [(key, label, pool.submit(_run_cell, data, cfg, out_dir, max_steps))
                   for key, label, cfg, out_dir in cells]
        for key, label, fut in futures:
            try:
                records.append({"key": key, "label": label, "report": fut.result()})
            except (DuetError, ValueError) as exc:
                records.append({"key": key, "label": label, "error": f"{type(exc).__name__}: {exc}"})
    return records


def _aggregate(records: list[dict], key_name: str, out: Path, table: str) -> list[dict]:
    rows, order = {}, []
    for r in records:
        if r["key"] not in rows:
            rows[r["key"]] = []
            order.append(r["key"])
        if "report" in r:
            rows[r["key"]].append(r["report"])
    table_rows = []
    with open(out / table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key_name, "mse", "mae", "n_runs"])
        for key in order:
            reps = rows[key]
            if not reps:
                continue
            mse = float(np.mean([r["mse"] for r in reps]))
            mae = float(np.mean([r["mae"] for r in reps]))
            w.writerow([key, repr(mse), repr(mae), len(reps)])
            table_rows.append({key_name: key, "mse": mse, "mae": mae, "n_runs": len(reps)})
    failures = [{"cell": r["label"], "error": r["error"]} for r in records if "error" in r]
    _dump_json(failures, out / "failures.json")
    return table_rows


def _finish_grid(records: list[dict], out: Path, manifest: dict, t0: float) -> int:
    manifest["wall_seconds"] = round(time.perf_counter() - t0, 3)
    _dump_json(manifest, out / "manifest.json")
    if all("error" in r for r in records):
        first = records[0]["error"] if records else "no cells to run"
        code = EXIT_DIVERGED if all(r["error"].startswith("DivergenceError") for r in records) else EXIT_DATA
        print(f"duet: error: every run failed; first failure: {first}", file=sys.stderr)
        return code
    return EXIT_OK


def cmd_ablate(args) -> int:
    for v in args.variants:
        if v not in {k.value for k in VariantKind}:
            raise UsageError(f"argument --variants: unknown variant {v!r}")
    if not args.variants or not args.seeds:
        raise UsageError("argument --variants/--seeds: need at least one value")
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells, outputs = [], [str(out / f) for f in ("manifest.json", "ablation.csv", "failures.json")]
    for v in args.variants:
        for s in args.seeds:
            cfg = _config(args, ds.n_channels, seed=s, variant=v)
            cell = out / f"{v}_seed{s}"
            cells.append((v, cell.name, cfg, str(cell)))
            outputs += [str(cell / "model.ckpt"), str(cell / "report.json")]
    manifest = _write_manifest(out / "manifest.json", "ablate", None, [os.path.abspath(args.data)], outputs,
                               variants=args.variants, seeds=args.seeds,
                               configs={c[1]: c[2].to_dict() for c in cells})
    t0 = time.perf_counter()
    records = _run_cells(cells, args.data, args.max_steps)
    for row in _aggregate(records, "variant", out, "ablation.csv"):
        print(f"{row['variant']}\t{row['mse']!r}\t{row['mae']!r}")
    return _finish_grid(records, out, manifest, t0)


def cmd_sweep(args) -> int:
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells, outputs = [], [str(out / f) for f in ("manifest.json", "sweep.csv", "failures.json")]
    for M in args.experts_list:
        for s in args.seeds:
            cfg = _config(args, ds.n_channels, seed=s, variant=args.variant, M=M, k=min(args.topk, M))
            cell = out / f"M{M}_seed{s}"
            cells.append((str(M), cell.name, cfg, str(cell)))
            outputs += [str(cell / "model.ckpt"), str(cell / "report.json")]
    manifest = _write_manifest(out / "manifest.json", "sweep", None, [os.path.abspath(args.data)], outputs,
                               experts=args.experts_list, seeds=args.seeds,
                               configs={c[1]: c[2].to_dict() for c in cells})
    t0 = time.perf_counter()
    records = _run_cells(cells, args.data, args.max_steps)
    for row in _aggregate(records, "M", out, "sweep.csv"):
        print(f"{row['M']}\t{row['mse']!r}\t{row['mae']!r}")
    return _finish_grid(records, out, manifest, t0)


def cmd_synth(args) -> int:
    ds = make_synthetic(args.kind, args.length, args.channels, args.seed, T=args.lookback, F=args.horizon,
                        noise=args.noise)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    save_dataset(ds, args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "synth": cmd_synth}


def _fail(code: int, message: str) -> int:
    print("duet: error: " + " ".join(str(message).split()), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, exc)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, exc)
    except (DataError, CorruptCheckpoint) as exc:
        return _fail(EXIT_DATA, exc)
    except (OSError, DuetError, ValueError) as exc:
        return _fail(EXIT_DATA, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
