import math
import os

import numpy as np
import pytest

import ravnet.trainer as trainer_mod
from ravnet.arch import NetworkConfig, RAVNet
from ravnet.data import WindowSpec, load_manifest, synth_generate, synth_samples
from ravnet.errors import ConfigError, DivergenceError, FormatError, IoError, StateError
from ravnet.layers import ParamStore
from ravnet.losses import LOSSES, MetricsReport, loss_compare_experiment
from ravnet.tensor import Tape, Tensor
from ravnet.trainer import (
    TrainConfig,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    evaluate,
    evaluate_model,
    fit,
    load_checkpoint,
    predict_prob,
    sample_arrays,
    save_checkpoint,
    train,
)

TINY = NetworkConfig(levels=2, base_channels=4)


def tiny_cfg(**kw):
    return TrainConfig(**{"net": TINY, "max_epochs": 2, "lr": 1e-3, **kw})


# ---------------------------------------------------------------- Adam


def test_adam_first_step_moves_by_lr_times_sign():
    store = ParamStore()
    p = store.add("w", np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 1e-3])
    adam_step(store, lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-6)
    assert store.step == 1


def test_adam_bias_correction_second_step():
    store = ParamStore()
    p = store.add("w", np.array([0.0]))
    for g in (1.0, 3.0):
        p.grad = np.array([g])
        adam_step(store, lr=1.0, eps=0.0)
    m = (0.9 * 0.1 * 1 + 0.1 * 3) / (1 - 0.9 ** 2)
    v = (0.999 * 0.001 * 1 + 0.001 * 9) / (1 - 0.999 ** 2)
    assert p.data[0] == pytest.approx(-1.0 - m / math.sqrt(v), rel=1e-12)


def test_adam_requires_gradients():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(StateError, match="'w'"):
        adam_step(store, 1e-3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_loss=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss_kind="focal")


# ---------------------------------------------------------------- checkpoints


@pytest.fixture(scope="module")
def trained():
    samples = synth_samples(3, 16, 0)
    return fit(tiny_cfg(), samples[:2], samples[2:]), samples


def test_checkpoint_round_trip_is_bit_exact(trained, tmp_path):
    res, samples = trained
    save_checkpoint(tmp_path / "ck", res.last)
    back = load_checkpoint(tmp_path / "ck")
    assert set(back.tensors) == set(res.last.tensors)
    assert all(np.array_equal(back.tensors[k], v) for k, v in res.last.tensors.items())
    assert all(np.array_equal(back.moments[k], v) for k, v in res.last.moments.items())
    assert (back.epoch, back.step, back.rng_state) == (res.last.epoch, res.last.step, res.last.rng_state)
    assert back.net == TINY and back.window == WindowSpec()
    a = predict_prob(res.model, samples[0].image, WindowSpec())
    b = predict_prob(back.build_model(), samples[0].image, WindowSpec())
    assert np.array_equal(a, b)
    assert os.listdir(tmp_path) == ["ck"]


def test_checkpoint_layout_header(trained):
    buf = encode_checkpoint(trained[0].last)
    assert buf[:4] == b"RAVN"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert decode_checkpoint(buf).tensors.keys() == trained[0].last.tensors.keys()


def test_corrupted_checkpoints_raise_format_error(trained):
    buf = encode_checkpoint(trained[0].last)
    with pytest.raises(FormatError) as e:
        decode_checkpoint(b"RAVX" + buf[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(FormatError) as e:
        decode_checkpoint(buf[:100])
    assert e.value.offset is not None and e.value.offset <= 100
    with pytest.raises(FormatError):
        decode_checkpoint(buf + b"\0")


def test_restore_into_mismatched_config_names_tensor_and_keeps_model(trained):
    other = RAVNet(NetworkConfig(levels=2, base_channels=8), seed=1)
    before = {k: v.copy() for k, v in other.store.arrays().items()}
    with pytest.raises(StateError, match="enc0"):
        trained[0].last.restore(other)
    assert all(np.array_equal(before[k], v) for k, v in other.store.arrays().items())


def test_save_to_missing_directory_is_io_error(trained, tmp_path):
    with pytest.raises(IoError):
        save_checkpoint(tmp_path / "no" / "ck", trained[0].last)
    with pytest.raises(IoError):
        load_checkpoint(tmp_path / "absent")


# ---------------------------------------------------------------- training loop


def test_exit_rule_tiny_threshold_runs_all_epochs_huge_exits_first():
    samples = synth_samples(1, 16, 0)
    assert len(fit(tiny_cfg(max_epochs=3, early_stop_loss=1e-30), samples).history.rows) == 3
    assert len(fit(tiny_cfg(max_epochs=3, early_stop_loss=1e30), samples).history.rows) == 1


def test_fit_is_deterministic():
    samples = synth_samples(3, 16, 2)
    a = fit(tiny_cfg(batch_size=2), samples)
    b = fit(tiny_cfg(batch_size=2), samples)
    assert a.history.step_losses == b.history.step_losses
    assert encode_checkpoint(a.last) == encode_checkpoint(b.last)
    assert len(a.history.step_losses) == 4


def test_divergence_reports_epoch(monkeypatch):
    calls = []

    def exploding(pred, truth):
        calls.append(1)
        loss = LOSSES["bce"](pred, truth)
        return loss * float("nan") if len(calls) > 1 else loss

    monkeypatch.setitem(trainer_mod.LOSSES, "dice", exploding)
    with pytest.raises(DivergenceError) as e:
        fit(tiny_cfg(max_epochs=3), synth_samples(1, 16, 0))
    assert e.value.epoch == 2


def test_best_checkpoint_follows_validation_dsc(monkeypatch, tmp_path):
    scores = iter([0.3, 0.7, 0.5])

    def fake_eval(model, samples, window, pooled=False):
        return MetricsReport(1.0, 1.0, next(scores), 1.0), [], []

    monkeypatch.setattr(trainer_mod, "evaluate_model", fake_eval)
    samples = synth_samples(2, 16, 0)
    res = fit(tiny_cfg(max_epochs=3), samples[:1], samples[1:], tmp_path / "best")
    assert res.best.epoch == 2 and res.last.epoch == 3
    assert load_checkpoint(tmp_path / "best").epoch == 2
    assert load_checkpoint(tmp_path / "best.last").epoch == 3


def test_loss_kind_changes_only_the_loss_nodes():
    samples = synth_samples(1, 16, 0)
    xs, ys = sample_arrays(samples, WindowSpec())
    ops, shapes = {}, {}
    for kind in ("dice", "bce"):
        model = RAVNet(TINY, seed=0)
        with Tape() as tape:
            pred = model(Tensor(xs), training=True)
            n_model = len(tape)
            LOSSES[kind](pred, ys)
            ops[kind] = [n.op for n in tape.nodes[:n_model]]
        shapes[kind] = {k: p.dims for k, p in model.store}
    assert ops["dice"] == ops["bce"]
    assert shapes["dice"] == shapes["bce"]


def test_loss_drops_on_single_sample():
    samples = synth_samples(1, 16, 0)
    res = fit(tiny_cfg(max_epochs=30, lr=1e-3), samples)
    assert res.history.step_losses[-1] < res.history.step_losses[0]


# ---------------------------------------------------------------- manifests and evaluation


def test_train_and_evaluate_from_manifests(tmp_path):
    m = synth_generate(3, 16, 4, tmp_path / "data")
    best, history = train(tiny_cfg(), m, m.subset(m.entries[:1]), tmp_path / "ck", tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_dsc" and len(lines) == 3
    agg, rows = evaluate(load_checkpoint(tmp_path / "ck"), m, report_path=tmp_path / "r.csv")
    assert [sid for sid, _ in rows] == ["phantom_0000", "phantom_0001", "phantom_0002"]
    again, _ = evaluate(load_checkpoint(tmp_path / "ck"), load_manifest(tmp_path / "data" / "manifest.csv"))
    assert again == agg
    assert (tmp_path / "r.csv").read_text().startswith("sample_id,accuracy,precision,dsc,jsc\n")


def test_evaluate_rejects_incompatible_slices(trained, tmp_path):
    m = synth_generate(1, 6, 0, tmp_path)
    with pytest.raises(StateError):
        evaluate(trained[0].last, m)


def test_evaluate_model_pooled_option(trained):
    res, samples = trained
    mean, rows, counts = evaluate_model(res.model, samples, WindowSpec())
    pooled, _, _ = evaluate_model(res.model, samples, WindowSpec(), pooled=True)
    assert len(rows) == len(counts) == 3
    assert 0.0 <= pooled.dsc <= 1.0 and 0.0 <= mean.dsc <= 1.0


def test_loss_compare_rows_in_order():
    rows = loss_compare_experiment(synth_samples(2, 16, 0), tiny_cfg(max_epochs=1))
    assert [r[0] for r in rows] == ["dice", "bce"]
    assert all(0.0 <= v <= 1.0 for r in rows for v in r[1:])


def test_checkpoint_records_training_echo(trained):
    echo = trained[0].last.train_echo
    assert echo["loss_kind"] == "dice" and echo["lr"] == pytest.approx(1e-3)
