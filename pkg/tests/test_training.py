import json
import struct

import numpy as np
import pytest
import torch

from duet import DuetConfig, DuetModel, make_synthetic
from duet.data import make_windows
from duet.errors import ConfigMismatch, CorruptCheckpoint, DivergenceError, EmptySet, ShapeMismatch
from duet.oracles import loop_mean_abs, loop_mean_sq
from duet.training import (
    MAGIC, REPORT_KEYS, TrainState, compute_metrics, evaluate, fit, l1_loss, load_checkpoint, predict_windows,
    prepare_data, run_experiment, save_checkpoint,
)

from conftest import small_config


def sinusoid_setup(**kw):
    cfg = DuetConfig(T=24, F=8, N=2, M=2, k=1, d=16, d0=8, kernel=5, batch_size=16, max_epochs=50, **kw)
    ds = make_synthetic("sinusoid_mix", 600, 2, seed=0, T=24, F=8)
    return cfg, ds, prepare_data(ds, cfg)


# ---------------------------------------------------------------- losses and metrics

def test_l1_examples(rng):
    Y = rng.standard_normal((3, 4))
    assert l1_loss(Y, Y) == 0
    assert l1_loss(Y + 1, Y) == pytest.approx(1.0)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert abs(l1_loss(A, B) - loop_mean_abs(A, B)) < 1e-9
    assert abs(float(l1_loss(torch.tensor(A), B)) - loop_mean_abs(A, B)) < 1e-9
    with pytest.raises(ShapeMismatch):
        l1_loss(A, B[:, :2])


def test_metric_examples(rng):
    Y = rng.standard_normal((5, 3, 4))
    m = compute_metrics(Y, Y)
    assert (m.mse, m.mae, m.n_windows) == (0.0, 0.0, 5)
    m = compute_metrics(Y + 2, Y)
    assert m.mse == pytest.approx(4) and m.mae == pytest.approx(2)
    P = rng.standard_normal((5, 3, 4))
    m = compute_metrics(P, Y)
    assert abs(m.mse - loop_mean_sq(P, Y)) < 1e-9
    assert abs(m.mae - loop_mean_abs(P, Y)) < 1e-9
    with pytest.raises(EmptySet):
        compute_metrics(np.zeros((0, 3, 4)), np.zeros((0, 3, 4)))


# ---------------------------------------------------------------- fit

def test_zero_learning_rate_keeps_parameters():
    cfg, ds, prep = sinusoid_setup(lr=0.0)
    init = DuetModel(cfg).state_dict()
    state = fit(cfg, prep.windows["train"], prep.windows["val"], max_steps=15)
    for k, v in init.items():
        assert torch.equal(state.params[k], v), k


def test_adam_with_zero_gradient_is_a_no_op():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = torch.optim.Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        opt.step()
    assert p.tolist() == [1.0, -2.0]


def test_fit_is_bit_reproducible():
    cfg, ds, prep = sinusoid_setup()
    a = fit(cfg, prep.windows["train"], prep.windows["val"], max_steps=40)
    b = fit(cfg, prep.windows["train"], prep.windows["val"], max_steps=40)
    for k in a.params:
        assert torch.equal(a.params[k], b.params[k])
    assert a.history == b.history


def test_training_halves_the_loss_on_learnable_data():
    cfg, ds, prep = sinusoid_setup()
    train = prep.windows["train"]
    before = l1_loss(predict_windows(DuetModel(cfg), train.X), train.Y)
    state = fit(cfg, train, prep.windows["val"], max_steps=200)
    after = l1_loss(predict_windows(state.model(), train.X), train.Y)
    assert state.step <= 200
    assert after < 0.5 * before, (before, after)


def test_early_stopping_respects_patience():
    cfg, ds, prep = sinusoid_setup(lr=0.0, patience=2)
    state = fit(cfg, prep.windows["train"], prep.windows["val"])
    assert len(state.history) == 3
    assert state.epochs_since_best == 2


def test_divergence_is_reported():
    cfg, ds, prep = sinusoid_setup(lr=1e30)
    with pytest.raises(DivergenceError) as err:
        fit(cfg, prep.windows["train"], prep.windows["val"], max_steps=50)
    assert err.value.step >= 1


def test_fit_needs_windows():
    cfg, ds, prep = sinusoid_setup()
    empty = prep.windows["train"]
    empty.origins = empty.origins[:0]
    with pytest.raises(EmptySet):
        fit(cfg, empty, prep.windows["val"])


def test_adam_moments_match_parameter_shapes():
    cfg, ds, prep = sinusoid_setup()
    state = fit(cfg, prep.windows["train"], prep.windows["val"], max_steps=5)
    assert set(state.exp_avg) == set(state.params)
    for k, v in state.exp_avg.items():
        assert v.shape == state.params[k].shape == state.exp_avg_sq[k].shape


# ---------------------------------------------------------------- evaluation

def test_exact_forecasts_score_zero():
    # constant channels are forecast exactly (normalized input is zero, so the
    # network output is zero and denormalization restores the level)
    from duet.data import TimeSeriesDataset
    cfg = small_config(N=2)
    ds = TimeSeriesDataset(np.tile([4.0, -2.5], (60, 1)), ("a", "b"))
    ev = evaluate(DuetModel(cfg), make_windows(ds, range(0, 60), cfg.T, cfg.F))
    assert ev.metrics.mse == 0 and ev.metrics.mae == 0


def test_evaluate_rejects_mismatched_windows():
    m = DuetModel(small_config(N=3))
    ds = make_synthetic("sinusoid_mix", 200, 2, T=8, F=4)
    with pytest.raises(ConfigMismatch):
        evaluate(m, make_windows(ds, range(0, 200), 8, 4))


def test_run_experiment_report_schema():
    cfg, ds, _ = sinusoid_setup()
    state, ev, report, prep = run_experiment(ds, cfg, "sines", max_steps=20)
    for key in REPORT_KEYS:
        assert key in report
    assert report["normalized_scale"] is True
    assert report["mse"] == ev.metrics.mse
    assert len(report["per_step_mse"]) == cfg.F
    assert report["n_windows"] == len(prep.windows["test"])


# ---------------------------------------------------------------- checkpoints

def fresh_state(cfg=None):
    cfg = cfg or small_config()
    m = DuetModel(cfg)
    params = {k: v.clone() for k, v in m.state_dict().items()}
    moments = {k: torch.randn_like(v) for k, v in params.items()}
    return TrainState(cfg, params, moments, {k: v.abs() for k, v in moments.items()}, step=7, best_val_mse=0.5,
                      rng_state={"gate": torch.Generator().get_state()}, meta={"note": "x"})


def test_round_trip_is_bit_exact(tmp_path):
    st = fresh_state()
    save_checkpoint(st, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == st.config
    for group in ("params", "exp_avg", "exp_avg_sq"):
        a, b = getattr(st, group), getattr(back, group)
        assert set(a) == set(b)
        for k in a:
            assert torch.equal(a[k], b[k])
    assert back.step == 7 and back.best_val_mse == 0.5 and back.meta == {"note": "x"}
    assert torch.equal(back.rng_state["gate"], st.rng_state["gate"])


def test_saving_is_deterministic(tmp_path):
    st = fresh_state()
    save_checkpoint(st, tmp_path / "a")
    save_checkpoint(st, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_truncated_file(tmp_path):
    save_checkpoint(fresh_state(), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    for cut in (4, 12, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "t.ckpt")


def test_bad_magic(tmp_path):
    save_checkpoint(fresh_state(), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "m.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "m.ckpt")


def rewrite(path, edit):
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    body = edit(manifest, raw[16 + n:])
    head = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + body)


def test_width_mismatch_names_the_tensor(tmp_path):
    cfg = small_config(d=8)
    p = tmp_path / "m.ckpt"
    save_checkpoint(fresh_state(cfg), p)

    def widen(manifest, body):
        for e in manifest["tensors"]:
            if e["name"] == "param.fusion.WQ":
                e["shape"] = [8, 9]
        return body
    rewrite(p, widen)
    with pytest.raises(CorruptCheckpoint, match="param.fusion.WQ"):
        load_checkpoint(p)


def test_missing_tensor(tmp_path):
    p = tmp_path / "m.ckpt"
    st = fresh_state()
    st.params.pop("predictor.WO")
    save_checkpoint(st, p)
    with pytest.raises(CorruptCheckpoint, match="predictor.WO"):
        load_checkpoint(p)


def test_garbage_manifest(tmp_path):
    p = tmp_path / "m.ckpt"
    head = b"{not json"
    p.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(p)


def test_trailing_bytes(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(fresh_state(), p)
    p.write_bytes(p.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(p)


def test_tensors_are_little_endian_float32(tmp_path):
    st = fresh_state()
    p = tmp_path / "m.ckpt"
    save_checkpoint(st, p)
    raw = p.read_bytes()
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    body = raw[16 + n:]
    e = next(e for e in manifest["tensors"] if e["name"] == "param.predictor.WO")
    arr = np.frombuffer(body[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4").reshape(e["shape"])
    assert np.array_equal(arr, st.params["predictor.WO"].numpy())
