import dataclasses
import io
import zipfile
import zlib

import numpy as np
import pytest
import torch

from dgstmtl import checkpoint
from dgstmtl.config import LossConfig, ModelConfig, TrainConfig, derive_seed
from dgstmtl.data import synth_coupled
from dgstmtl.errors import ConfigError, InputError, LoadError, NumericError
from dgstmtl.model import task_metrics
from dgstmtl.training import build_model, evaluate, model_grad_check, predict, prepare, split_loss, train


@pytest.fixture(scope="module")
def exp():
    a, b, edges = synth_coupled(4, 160, 0.8, seed=2)
    return prepare([a, b], edges)


def _train(exp, cfg=None, seed=0, epochs=3, **kw):
    model = build_model(exp, cfg or ModelConfig(head_hidden=8), hidden=8, ctke_dim=6, seed=seed)
    result = train(model, exp.splits, TrainConfig(max_epochs=epochs, seed=seed, **kw), LossConfig.uniform(2))
    return model, result


def test_derive_seed_frozen():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert len({derive_seed(0, "init"), derive_seed(0, "shuffle"), derive_seed(1, "init")}) == 3
    for seed, label in ((0, "init"), (7, "shuffle")):
        expected = np.random.SeedSequence([seed, zlib.crc32(label.encode())]).generate_state(1)[0]
        assert derive_seed(seed, label) == int(expected)
    assert derive_seed(0, "init") == 3501147124
    assert derive_seed(7, "shuffle") == 3020656833


def test_prior_uses_train_columns_only(exp):
    a, b, edges = synth_coupled(4, 160, 0.8, seed=2)
    b2 = dataclasses.replace(b, series=b.series.copy())
    b2.series[:, 120:] = np.random.default_rng(0).standard_normal((4, 40))
    other = prepare([a, b2], edges)
    np.testing.assert_array_equal(other.prior.a_p, exp.prior.a_p)


def test_trace_and_best_checkpoint(exp):
    model, result = _train(exp, epochs=6, patience=2)
    assert 1 <= len(result.trace) <= 6
    assert [r.epoch for r in result.trace] == list(range(1, len(result.trace) + 1))
    vals = [r.val_loss for r in result.trace]
    assert result.best_val == min(vals) and result.trace[result.best_epoch - 1].val_loss == result.best_val
    # the returned model carries the best epoch's parameters
    assert split_loss(model, exp.splits["val"], LossConfig.uniform(2)) == pytest.approx(result.best_val, abs=1e-12)


def test_early_stopping_patience(exp):
    # lr 0 freezes the model, so validation never improves after epoch 1
    _, result = _train(exp, epochs=50, patience=3, learning_rate=0.0)
    assert len(result.trace) == 4 and result.best_epoch == 1


def test_on_epoch_can_stop(exp):
    model = build_model(exp, ModelConfig(head_hidden=8), hidden=8, ctke_dim=6)
    seen = []
    result = train(model, exp.splits, TrainConfig(max_epochs=10), LossConfig.uniform(2),
                   on_epoch=lambda rec: seen.append(rec.epoch) or rec.epoch == 2)
    assert seen == [1, 2] and len(result.trace) == 2


def test_training_is_deterministic(exp):
    m1, r1 = _train(exp, seed=4)
    m2, r2 = _train(exp, seed=4)
    _, r3 = _train(exp, seed=5)
    assert [dataclasses.astuple(r) for r in r1.trace] == [dataclasses.astuple(r) for r in r2.trace]
    for (_, p), (_, q) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(p, q)
    assert r1.trace[0].train_loss != r3.trace[0].train_loss


def test_non_finite_loss_raises(exp):
    bad = dict(exp.splits)
    tr = bad["train"]
    inputs = tr.inputs.copy()
    inputs[0, 0, 0, 0, 0] = np.nan
    bad["train"] = dataclasses.replace(tr, inputs=inputs)
    model = build_model(exp, ModelConfig(head_hidden=8), hidden=8, ctke_dim=6)
    with pytest.raises(NumericError, match="epoch 1"):
        train(model, bad, TrainConfig(max_epochs=2), LossConfig.uniform(2))


def test_empty_splits_rejected(exp):
    model = build_model(exp, ModelConfig(head_hidden=8), hidden=8, ctke_dim=6)
    empty = dataclasses.replace(exp.splits["val"], inputs=exp.splits["val"].inputs[:0],
                                targets=exp.splits["val"].targets[:0])
    with pytest.raises(InputError, match="validation"):
        train(model, {**exp.splits, "val": empty}, TrainConfig(max_epochs=1), LossConfig.uniform(2))
    with pytest.raises(InputError):
        evaluate(model, empty, ["a", "b"])


def test_gate_l1_shrinks_gates(exp):
    m0, _ = _train(exp, epochs=2)
    m1, _ = _train(exp, epochs=2, gate_l1=1e-2)
    assert m1.gate_penalty().item() < m0.gate_penalty().item()


def test_evaluate_is_on_original_scale(exp):
    model, _ = _train(exp, epochs=1)
    sp = exp.splits["test"]
    metrics = evaluate(model, sp, ["flow", "speed"])
    y_hat = predict(model, sp.inputs) * sp.scaler.std + sp.scaler.mean
    y = sp.targets * sp.scaler.std + sp.scaler.mean
    for k, m in enumerate(metrics):
        want = task_metrics(m.task, y[..., k], y_hat[..., k])
        assert m.rmse == pytest.approx(want.rmse, rel=1e-12) and m.mape == pytest.approx(want.mape, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)


def test_model_grad_check_defaults():
    assert model_grad_check() < 1e-4


# -- checkpoint --------------------------------------------------------------

@pytest.mark.parametrize("variant", [None, 1, 2, 4, 9, 10])
def test_checkpoint_round_trip_bit_exact(exp, tmp_path, variant):
    model = build_model(exp, ModelConfig.for_variant(variant, head_hidden=8), hidden=8, ctke_dim=6, seed=3)
    ckpt = checkpoint.Checkpoint(model, ["flow", "speed"], exp.splits["train"].scaler, {"best_epoch": 4})
    checkpoint.save(tmp_path / "a.zip", ckpt)
    back = checkpoint.load(tmp_path / "a.zip")
    assert back.task_names == ["flow", "speed"] and back.extra == {"best_epoch": 4}
    assert back.model.cfg == model.cfg and back.model.dims == model.dims
    np.testing.assert_array_equal(back.scaler.mean, ckpt.scaler.mean)
    x = exp.splits["test"].inputs
    np.testing.assert_array_equal(predict(back.model, x), predict(model, x))
    checkpoint.save(tmp_path / "b.zip", back)
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()


def test_static_only_checkpoint_lacks_ctke(exp, tmp_path):
    model = build_model(exp, ModelConfig.for_variant(1), hidden=8, ctke_dim=6)
    checkpoint.save(tmp_path / "s.zip", checkpoint.Checkpoint(model, ["a", "b"], exp.splits["train"].scaler))
    names = zipfile.ZipFile(tmp_path / "s.zip").namelist()
    assert "tensors/a_p.npy" in names
    assert not any("ctke" in n or "gates" in n for n in names)


def _rewrite(src, dst, edit):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for info in zin.infolist():
            data = edit(info.filename, zin.read(info.filename))
            if data is not None:
                zout.writestr(info, data)


def test_checkpoint_load_errors(exp, tmp_path):
    model = build_model(exp, ModelConfig(head_hidden=8), hidden=8, ctke_dim=6)
    checkpoint.save(tmp_path / "ok.zip", checkpoint.Checkpoint(model, ["a", "b"], exp.splits["train"].scaler))
    (tmp_path / "junk.zip").write_bytes(b"not a zip")
    with pytest.raises(LoadError, match="cannot open"):
        checkpoint.load(tmp_path / "junk.zip")
    _rewrite(tmp_path / "ok.zip", tmp_path / "fmt.zip",
             lambda n, d: d.replace(b"dgstmtl-checkpoint/1", b"dgstmtl-checkpoint/9") if n == "meta.json" else d)
    with pytest.raises(LoadError, match="unsupported"):
        checkpoint.load(tmp_path / "fmt.zip")
    _rewrite(tmp_path / "ok.zip", tmp_path / "nometa.zip", lambda n, d: None if n == "meta.json" else d)
    with pytest.raises(LoadError, match="meta.json"):
        checkpoint.load(tmp_path / "nometa.zip")

    def shrink(name, data):
        if name == "tensors/in_b.npy":
            buf = io.BytesIO()
            np.save(buf, np.zeros((2, 7)))
            return buf.getvalue()
        return data

    _rewrite(tmp_path / "ok.zip", tmp_path / "shape.zip", shrink)
    with pytest.raises(LoadError, match="in_b"):
        checkpoint.load(tmp_path / "shape.zip")
    _rewrite(tmp_path / "ok.zip", tmp_path / "cfg.zip",
             lambda n, d: d.replace(b'"hidden": 8', b'"hidden": 5') if n == "meta.json" else d)
    with pytest.raises(LoadError, match="do not match"):
        checkpoint.load(tmp_path / "cfg.zip")
