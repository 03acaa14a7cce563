import json

import numpy as np
import pytest

import smagnet


def test_generate_scene_shapes_and_determinism():
    a = smagnet.generate_scene(5, size=32)
    b = smagnet.generate_scene(5, size=32)
    assert a["sar"].shape == (2, 32, 32)
    assert a["msi"].shape == (4, 32, 32)
    assert a["validity"].shape == (32, 32)
    assert set(np.unique(a["label"])) <= {0, 1}
    assert np.array_equal(a["sar"], b["sar"])


def test_metrics_example():
    m = smagnet.metrics(3, 1, 1, 5)
    assert m["oa"] == pytest.approx(0.8)
    assert m["precision"] == 0.75
    assert m["iou"] == pytest.approx(0.6)


def test_mannwhitney_separated_samples():
    u, p, exact = smagnet.mannwhitney_u([1, 2, 3], [10, 20, 30])
    assert u == 0
    assert exact
    assert p == pytest.approx(0.1)


def test_select_threshold_separable():
    t, iou, degenerate = smagnet.select_threshold(np.array([0.1, 0.9]), np.array([0, 1]))
    assert t == pytest.approx(0.9)
    assert iou == 1.0
    assert not degenerate


def test_ndvi():
    out = smagnet.ndvi(np.array([[0.3, 0.0]]), np.array([[0.3, 1.0]]))
    assert out.shape == (1, 2)
    assert out.tolist() == [[0.0, 1.0]]


def test_model_full_missing_heads_agree():
    model = smagnet.Model({"kind": "smagnet"})
    rng = np.random.default_rng(0)
    sar = rng.standard_normal((1, 2, 64, 64)).astype(np.float32)
    msi = rng.standard_normal((1, 4, 64, 64)).astype(np.float32)
    fused, sar_logits = model.forward(sar, msi, np.zeros((1, 1, 64, 64), np.float32))
    assert fused.shape == (1, 1, 64, 64)
    assert np.abs(fused - sar_logits).max() <= 1e-5
    assert model.parameter_count > 0
    assert "dec.head.weight" in model.parameter_names()


def test_bad_config_raises():
    with pytest.raises(smagnet.ConfigError):
        smagnet.Model({"kind": "resnet"})
    with pytest.raises(smagnet.ConfigError):
        smagnet.train({"train": {"epochz": 1}}, "unused")


def test_train_eval_round_trip(tmp_path):
    data = tmp_path / "data"
    split = smagnet.gen_data(str(data), scenes=20, size=32, seed=3)
    assert len(split["train"]) + len(split["val"]) + len(split["test"]) == 20
    config = {"data": {"dir": str(data)}, "train": {"epochs": 1, "batch_size": 4}}
    run = tmp_path / "run"
    result = smagnet.train(config, run)
    assert result["best_epoch"] == 1
    assert json.loads((run / "config.json").read_text())["train"]["epochs"] == 1
    m = smagnet.evaluate(str(run), str(data))
    assert 0.0 <= m["iou"] <= 1.0
    rows = smagnet.sweep(str(run), str(data), [0, 100])
    assert [r[0] for r in rows] == [0.0, 100.0]
    loaded = smagnet.Model.load(str(run))
    assert loaded.parameter_count == smagnet.Model().parameter_count
