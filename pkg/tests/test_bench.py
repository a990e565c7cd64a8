import csv
import json

import numpy as np
import pytest

from gridshield.attacks import AttackConfig
from gridshield.bench import (CURVES_HEADER, TABLE_HEADER, BenchMatrix, emit_report, measure_latency, measure_size,
                              run_matrix, table_records)
from gridshield.compress import quantize
from gridshield.data import generate_benign, make_windows
from gridshield.model import ArchSpec, Layer, Model, TrainConfig, conv, dense_layer, maxpool, reference_arch, train

TOY = TrainConfig(epochs=4, seed=0)
ATTACKS = [AttackConfig("fgsm", epsilon=0.2, n_samples=24), AttackConfig("bim", epsilon=0.2, alpha=0.05,
                                                                          n_samples=24)]
P_LEVELS = (20, 100)


def toy_arch():
    return ArchSpec((conv(8, 5), maxpool(2), conv(8, 3), Layer("flatten"), dense_layer(16),
                     Layer("dropout", rate=0.3), dense_layer(1, "sigmoid")), 48)


@pytest.fixture(scope="module")
def setup():
    ds = make_windows(generate_benign(4, 60, 0), seed=0)
    victim = train(toy_arch(), ds.split("train"), ds.split("val"), TOY, name="original")
    proposed = quantize(victim)
    proposed.name = "proposed"
    matrix = run_matrix(victim, proposed, ATTACKS, P_LEVELS, ds, seed=0, train_cfg=TOY)
    matrix.records.extend(table_records({"original": victim, "proposed": proposed}, ds.split("test"), 0, reps=10,
                                        warmup=1, batch=16))
    return ds, victim, proposed, matrix


def test_latency_is_stable():
    m = Model.init(toy_arch(), 0)
    x = np.random.default_rng(0).standard_normal((64, 48)).astype(np.float32)
    a, b = measure_latency(m, x, reps=30), measure_latency(m, x, reps=30)
    assert a > 0 and abs(a - b) / max(a, b) <= 0.2


def test_latency_preconditions():
    m = Model.init(toy_arch(), 0)
    with pytest.raises(ValueError, match="non-empty"):
        measure_latency(m, np.zeros((0, 48), np.float32))
    with pytest.raises(ValueError, match="reps"):
        measure_latency(m, np.zeros((4, 48), np.float32), reps=5)


def test_size_is_canonical():
    m = Model.init(toy_arch(), 3)
    n = measure_size(m)
    back = Model.from_bytes(m.to_bytes(), m.arch)
    assert measure_size(back) == n and back.to_bytes() == m.to_bytes()


def test_quantize_only_size_ratio():
    m = Model.init(reference_arch(), 0)
    assert measure_size(quantize(m)) <= 0.35 * measure_size(m)


def test_matrix_is_complete(setup):
    _, _, _, matrix = setup
    cells = matrix.curve_cells()
    assert not matrix.gaps
    assert len(cells) == len(ATTACKS) * len(P_LEVELS) * 2
    assert {(r.state, r.attack, r.p) for r in cells} == {(s, a.kind, p) for s in ("original", "proposed")
                                                          for a in ATTACKS for p in P_LEVELS}
    assert all(0 <= r.adr <= 1 for r in cells)


def test_table_rows_describe_clean_performance(setup):
    ds, victim, proposed, matrix = setup
    rows = {r.state: r for r in matrix.table_rows()}
    assert set(rows) == {"original", "proposed"}
    assert rows["original"].size_bytes == victim.size_bytes()
    assert rows["proposed"].size_bytes == proposed.size_bytes() < victim.size_bytes()
    assert rows["original"].latency_ms > 0


def test_report_files(tmp_path, setup):
    _, _, _, matrix = setup
    files = emit_report(matrix, tmp_path / "r", manifest={"seed": 0})
    table = list(csv.reader(files["table"].open()))
    curves = list(csv.reader(files["curves"].open()))
    assert tuple(table[0]) == TABLE_HEADER and len(table) - 1 == 2
    assert tuple(curves[0]) == CURVES_HEADER and len(curves) - 1 == len(ATTACKS) * len(P_LEVELS) * 2
    assert {r[0] for r in curves[1:]} == {"before", "after"}
    manifest = json.loads(files["manifest"].read_text())
    assert manifest["seed"] == 0 and "gpu_utilization" in manifest and manifest["gaps"] == []
    assert files["curves_png"].stat().st_size > 0 and files["table_png"].stat().st_size > 0


def test_report_reemit_is_identical(tmp_path, setup):
    _, _, _, matrix = setup
    a = emit_report(matrix, tmp_path / "a")
    b = emit_report(matrix, tmp_path / "b")
    for key in ("table", "curves", "records", "curves_png", "table_png"):
        assert a[key].read_bytes() == b[key].read_bytes(), key
    ma, mb = (json.loads(f["manifest"].read_text()) for f in (a, b))
    ma.pop("generated"), mb.pop("generated")
    assert ma == mb


def test_report_errors(tmp_path, setup):
    with pytest.raises(ValueError, match="empty"):
        emit_report(BenchMatrix(), tmp_path / "x")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(setup[3], blocker / "sub")


def test_failing_cell_is_a_gap(setup, monkeypatch):
    import gridshield.bench as bench

    ds, victim, proposed, _ = setup
    real = bench.transfer_attack

    def flaky(sur, level, d_train, targets, cfg, floor):
        if cfg.kind == "bim":
            raise RuntimeError("boom")
        return real(sur, level, d_train, targets, cfg, floor)

    monkeypatch.setattr(bench, "transfer_attack", flaky)
    matrix = run_matrix(victim, proposed, ATTACKS, (100,), ds, seed=0, train_cfg=TOY)
    assert [(g["attack"], g["p"]) for g in matrix.gaps] == [("bim", 100)]
    assert "boom" in matrix.gaps[0]["error"]
    assert len(matrix.curve_cells()) == 2
