import json

import numpy as np
import pytest

from mmlc.bilevel import TaskSpec, TrainConfig
from mmlc.data import SynthSpec
from mmlc.errors import ConfigError
from mmlc.harness import (
    REPORT_SCHEMA,
    ExperimentConfig,
    compare_baseline,
    evaluate,
    evaluate_checkpoint,
    metrics_from_confusion,
    metrics_from_predictions,
    prepare_data,
    recovery_config,
    run_experiment,
    run_id,
)
from mmlc.nn import Classifier, ClassifierSpec, load_checkpoint


def small_config(**train) -> ExperimentConfig:
    return ExperimentConfig(
        synth=SynthSpec(length=400, trend_slopes=[1, 0, -1, 0, 1, -1, 0, 1], noise_sd=1.0, seed=3),
        horizons=[10, 13],
        noise_rate=0.3,
        image_side=8,
        classifier=ClassifierSpec(input_side=8, hidden_sizes=(8,)),
        lcn_branch_hidden=8,
        lcn_fusion_hidden=4,
        train=TrainConfig(**{"K": 2, "eta": 0.1, "mu": 0.1, "noisy_batch": 16, "clean_batch": 16, "meta_steps": 3, **train}),
    )


def test_metrics_perfect():
    m = metrics_from_predictions([0, 1, 2, 2], [0, 1, 2, 2])
    assert m.accuracy == 1.0 and m.f1_macro == 1.0 and m.precision_macro == 1.0


def test_metrics_confusion_example():
    m = metrics_from_confusion([[5, 0, 0], [0, 0, 5], [0, 0, 5]])
    assert m.accuracy == pytest.approx(10 / 15)
    assert m.precision_per_class == (1.0, 0.0, 0.5)
    assert m.recall_per_class == (1.0, 0.0, 1.0)
    assert m.precision_macro == pytest.approx(0.5)
    assert m.f1_macro == pytest.approx((1.0 + 0.0 + 2 / 3) / 3)


def test_majority_floor():
    y = [0] * 100 + [1] * 270 + [2] * 91
    m = metrics_from_predictions(y, [1] * len(y))
    assert m.accuracy == pytest.approx(270 / 461)
    assert round(100 * m.accuracy, 1) == 58.6


def test_metrics_consistency_and_order_invariance():
    rng = np.random.default_rng(0)
    y, p = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
    m = metrics_from_predictions(y, p)
    c = np.array(m.confusion)
    assert c.sum() == 200 and m.accuracy == np.trace(c) / 200
    assert 0 <= m.precision_macro <= 1 and 0 <= m.f1_macro <= 1
    perm = rng.permutation(200)
    assert metrics_from_predictions(y[perm], p[perm]) == m


def test_metrics_empty():
    with pytest.raises(ValueError):
        metrics_from_predictions([], [])


def test_evaluate_ties_go_to_lower_class():
    net = Classifier(ClassifierSpec(input_side=2, hidden_sizes=(2,)))
    m = evaluate(net, np.zeros(net.size), np.zeros((4, 4)), [0, 0, 1, 2])
    assert np.array(m.confusion)[:, 0].sum() == 4


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(horizons=[])
    with pytest.raises(ConfigError):
        ExperimentConfig(encoder="rrp")
    with pytest.raises(ConfigError):
        ExperimentConfig(csv="x.csv")  # synth is also set
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(image_side=8)


def test_config_round_trip(tmp_path):
    cfg = recovery_config(2)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.load(p)
    assert back.to_dict() == cfg.to_dict()
    assert run_id(back) == run_id(cfg)
    csv_cfg = ExperimentConfig.from_dict({"csv": "prices.csv"})
    assert csv_cfg.synth is None


def test_prepare_data_shapes_and_isolation():
    cfg = small_config()
    _, data = prepare_data(cfg)
    assert [hd.horizon for hd in data] == [10, 13]
    hd = data[0]
    assert hd.noisy_x.shape[1] == hd.noisy_y.shape[1] == 64
    assert len(hd.noisy_x) == 240 - 30 - 10 + 1
    flips = np.mean(hd.noisy_labels != hd.noisy_reference)
    assert 0.15 < flips < 0.45
    task = hd.task(0)
    assert isinstance(task, TaskSpec)
    # the only labels a task carries are the clean ones
    assert not any(np.shares_memory(getattr(task, f), hd.noisy_labels) for f in ("noisy_x", "noisy_y", "clean_x", "clean_labels"))


def test_noisy_labels_do_not_affect_mmlc():
    a = run_experiment(small_config())
    cfg = small_config()
    cfg.noise_rate = 0.9
    b = run_experiment(cfg)
    for ta, tb in zip(a["tasks"], b["tasks"]):
        assert ta["metrics"] == tb["metrics"]
        assert ta["corrected_label_agreement"] == tb["corrected_label_agreement"]


def test_run_experiment_outputs(tmp_path):
    cfg = small_config()
    report = run_experiment(cfg, tmp_path)
    assert report["schema"] == REPORT_SCHEMA
    assert len(report["tasks"]) == 2 and report["meta_steps"] == 3
    t = report["tasks"][0]
    assert {"metrics", "class_distribution", "corrected_label_agreement", "clean_label_agreement"} <= set(t)
    assert abs(sum(t["class_distribution"]["test"]["proportions"]) - 1.0) < 1e-9
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk["run_id"] == report["run_id"]
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [0, 1, 2]
    ck = load_checkpoint(tmp_path / "checkpoint.bin")
    assert set(ck) == {"alpha", "w10", "w13"}
    ev = evaluate_checkpoint(cfg, tmp_path / "checkpoint.bin")
    assert [e["metrics"] for e in ev["tasks"]] == [t["metrics"] for t in report["tasks"]]


def test_run_experiment_deterministic(tmp_path):
    cfg = small_config()
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b", threads=2)
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    a.pop("wall_clock_seconds"), b.pop("wall_clock_seconds")
    assert json.dumps(a) == json.dumps(b)


def test_evaluate_checkpoint_missing_horizon(tmp_path):
    cfg = small_config()
    run_experiment(cfg, tmp_path)
    cfg.horizons = [10, 15]
    with pytest.raises(ConfigError, match="horizon 15"):
        evaluate_checkpoint(cfg, tmp_path / "checkpoint.bin")


def test_compare_schema(tmp_path):
    report = compare_baseline(small_config(), tmp_path)
    assert report["schema"] == REPORT_SCHEMA and report["kind"] == "compare"
    for t in report["tasks"]:
        assert {"baseline", "mmlc", "delta"} <= set(t)
        assert t["delta"]["accuracy"] == pytest.approx(t["mmlc"]["accuracy"] - t["baseline"]["accuracy"])
    assert json.loads((tmp_path / "compare.json").read_text())["tasks"] == report["tasks"]


def test_recovery_config_shape():
    cfg = recovery_config(1)
    assert cfg.synth.length == 1500 and cfg.n == 30 and cfg.horizons == [10, 13, 15]
    assert cfg.noise_rate == 0.3 and cfg.train.meta_steps == 200 and cfg.train.seed == 1


def test_shipped_recovery_config_matches():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "recovery.json"
    assert ExperimentConfig.load(path).to_dict() == recovery_config(0).to_dict()


def test_clip_norm():
    from mmlc.bilevel import clip_norm

    g = np.array([3.0, 4.0])
    np.testing.assert_allclose(clip_norm(g, 1.0), [0.6, 0.8])
    assert np.array_equal(clip_norm(g, 10.0), g)
    assert np.array_equal(clip_norm(g, None), g)
    with pytest.raises(ConfigError):
        TrainConfig(meta_grad_clip=0.0)
