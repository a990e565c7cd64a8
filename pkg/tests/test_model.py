import json

import numpy as np
import pytest

from gridshield.data import WindowSet, generate_benign, make_windows
from gridshield.errors import DivergenceError, ShapeError
from gridshield.model import (ArchSpec, Layer, Model, TrainConfig, conv, dense_layer, evaluate, fit,
                              maxpool, metrics_from_counts, param_shapes, predict_batch, reference_arch, train)


def toy_arch(width=48):
    return ArchSpec((conv(8, 5), maxpool(2), conv(8, 3), Layer("flatten"), dense_layer(16),
                     Layer("dropout", rate=0.3), dense_layer(1, "sigmoid")), width)


@pytest.fixture(scope="module")
def toy_data():
    ds = make_windows(generate_benign(4, 60, 0), seed=0)
    return ds.split("train"), ds.split("val"), ds.split("test")


def test_reference_layers():
    arch = reference_arch()
    assert len(arch.layers) == 9
    assert [l.kind for l in arch.layers] == ["conv", "conv", "conv", "maxpool", "conv", "flatten", "dense",
                                             "dropout", "dense"]
    assert [l.units for l in arch.layers if l.kind == "conv"] == [128, 256, 256, 512]
    assert all(l.kernel == 3 and l.stride == 1 and l.activation == "relu" for l in arch.layers if l.kind == "conv")
    assert arch.layers[7].rate == 0.5


def test_reference_shapes():
    shapes = reference_arch().shapes()
    assert [s[0] for s in shapes[:5]] == [46, 44, 42, 21, 19]
    assert shapes[5] == (512 * 19,)
    assert shapes[-1] == (1,)


def test_reference_parameter_count():
    shapes = param_shapes(reference_arch())
    assert shapes["6.weight"] == (9728, 1024)
    assert sum(int(np.prod(s)) for s in shapes.values()) == 10_653_185


def test_reference_output_is_scalar_per_window():
    m = Model.init(reference_arch(), seed=0)
    assert predict_batch(m, np.zeros((3, 48), np.float32)).shape == (3,)


def test_arch_validation():
    with pytest.raises(ShapeError, match="final layer"):
        ArchSpec((conv(4, 3), Layer("flatten"), dense_layer(2, "sigmoid")), 16)
    with pytest.raises(ShapeError, match="conv kernel"):
        ArchSpec((conv(4, 20), Layer("flatten"), dense_layer(1, "sigmoid")), 16)
    with pytest.raises(ShapeError, match="unflattened"):
        ArchSpec((conv(4, 3), dense_layer(1, "sigmoid")), 16)


def test_arch_dict_roundtrip():
    arch = reference_arch()
    assert ArchSpec.from_dict(json.loads(json.dumps(arch.to_dict()))) == arch


def test_overfit_tiny_set():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 48)).astype(np.float32)
    y = np.array([0, 1] * 16)
    ws = WindowSet(x, y, np.where(y == 1, "f1", "benign"))
    model = train(toy_arch(), ws, ws, TrainConfig(epochs=200, batch_size=32, patience=200, seed=0))
    assert evaluate(model, ws).accuracy >= 0.95


def test_zero_epochs_is_chance(toy_data):
    tr, va, te = toy_data
    accs = [evaluate(train(toy_arch(), tr, va, TrainConfig(epochs=0, seed=s)), te).accuracy for s in range(5)]
    assert abs(np.mean(accs) - 0.5) < 0.15


def test_training_is_deterministic(toy_data):
    tr, va, _ = toy_data
    cfg = TrainConfig(epochs=2, seed=3)
    a, b = train(toy_arch(), tr, va, cfg), train(toy_arch(), tr, va, cfg)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert len(a.history) == 2 and {"train_loss", "val_loss"} <= set(a.history[0])


def test_training_learns(toy_data):
    tr, va, te = toy_data
    before = evaluate(Model.init(toy_arch(), 0), te).accuracy
    after = evaluate(train(toy_arch(), tr, va, TrainConfig(epochs=8, seed=0)), te).accuracy
    assert after > max(before, 0.8)


def test_divergence_reports_last_finite_epoch(toy_data):
    tr, va, _ = toy_data
    bad = tr.with_values(np.where(np.arange(tr.width) == 0, np.inf, tr.values).astype(np.float32))
    with pytest.raises(DivergenceError) as err, pytest.warns(RuntimeWarning):
        fit(Model.init(toy_arch(), 0), bad, va, TrainConfig(epochs=3))
    assert err.value.last_finite_epoch == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# --------------------------------------------------------------------------
# metrics


def test_metrics_from_counts():
    m = metrics_from_counts(tp=40, fp=10, fn=10, tn=40)
    assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx((0.8, 0.8, 0.8, 0.8))


def test_metrics_degenerate():
    m = metrics_from_counts(tp=0, fp=0, fn=50, tn=50)
    assert m.recall == 0 and m.f1 == 0
    m = metrics_from_counts(tp=50, fp=0, fn=0, tn=50)
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_all_benign_predictions():
    arch = ArchSpec((Layer("flatten"), dense_layer(1, "sigmoid")), 4)
    m = Model(arch, {"1.weight": np.zeros((4, 1), np.float32), "1.bias": np.full(1, -5.0, np.float32)})
    ws = WindowSet(np.zeros((10, 4)), [0, 1] * 5, ["benign", "f1"] * 5)
    met = evaluate(m, ws)
    assert met.recall == 0 and met.f1 == 0 and met.accuracy == 0.5


def test_perfect_predictor_and_adr():
    arch = ArchSpec((Layer("flatten"), dense_layer(1, "sigmoid")), 4)
    m = Model(arch, {"1.weight": np.full((4, 1), 10.0, np.float32), "1.bias": np.full(1, -5.0, np.float32)})
    x = np.repeat(np.array([[0.0], [1.0], [1.0], [0.0]]), 4, axis=1)
    ws = WindowSet(x, [0, 1, 1, 1], ["benign", "f2", "fgsm", "cw"])
    met = evaluate(m, ws)
    assert met.adr == 0.5  # fgsm flagged, cw not; f2 is not adversarial
    perfect = evaluate(m, ws.subset([0, 1, 2]))
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0, 1.0)
    assert perfect.adr == 1.0


def test_evaluate_empty():
    m = Model.init(toy_arch(), 0)
    with pytest.raises(ValueError, match="empty"):
        evaluate(m, WindowSet(np.zeros((0, 48)), [], []))


def test_evaluate_pure_and_permutation_invariant(toy_data):
    _, _, te = toy_data
    m = Model.init(toy_arch(), 1)
    a, b = evaluate(m, te), evaluate(m, te)
    assert a == b
    perm = np.random.default_rng(0).permutation(len(te))
    assert evaluate(m, te.subset(perm)) == a


# --------------------------------------------------------------------------
# prediction


def test_predict_batch_properties(toy_data):
    _, _, te = toy_data
    m = Model.init(toy_arch(), 2)
    x = np.concatenate([te.values[:20], te.values[:1]])
    p = predict_batch(m, x)
    assert np.all((p >= 0) & (p <= 1))
    assert p[0] == p[-1]
    single = np.array([predict_batch(m, row[None])[0] for row in x])
    assert np.max(np.abs(single - p)) < 1e-6
    assert np.max(np.abs(predict_batch(m, x, batch=7) - p)) < 1e-6


def test_predict_width_mismatch():
    with pytest.raises(ShapeError, match="width"):
        predict_batch(Model.init(toy_arch(), 0), np.zeros((2, 47)))


# --------------------------------------------------------------------------
# persistence


def test_save_load_roundtrip(tmp_path, toy_data):
    tr, va, te = toy_data
    m = train(toy_arch(), tr, va, TrainConfig(epochs=1))
    nbytes = m.save(tmp_path / "m")
    back = Model.load(tmp_path / "m")
    assert nbytes == m.size_bytes() == back.size_bytes()
    assert back.to_bytes() == m.to_bytes()
    assert np.array_equal(predict_batch(back, te), predict_batch(m, te))
    assert back.history == m.history


def test_reference_size_bytes():
    m = Model.init(reference_arch(), 0)
    assert m.size_bytes() == 42_612_964


def test_param_mismatch_rejected():
    with pytest.raises(ShapeError):
        Model(toy_arch(), {})
