"""Experiment orchestration: data -> images -> labels -> bi-level training -> metrics -> report."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoders
from .bilevel import TaskSpec, TrainConfig, initial_weights, task_rngs, train_mmlc, _sample
from .data import PriceSeries, SynthSpec, load_price_csv, split_cuts, split_dataset, synth_series
from .errors import ConfigError, NumericError
from .labeling import (
    LabelRuleConfig,
    TrendLabel,
    class_distribution,
    inject_label_noise,
    label_samples,
    triple_barrier_label,
)
from .nn import Classifier, ClassifierSpec, LabelCorrector, LcnSpec, ParamVector, load_checkpoint, one_hot, save_checkpoint

log = logging.getLogger(__name__)

REPORT_SCHEMA = "mmlc-report/1"

# 25 regimes of 60 days: rise, flat and fall in a fixed shuffled order, so every
# 20% segment of a 1500-day series contains all three trend classes
RECOVERY_SLOPES = (1, 0, -1, 0, -1, 1, 0, 1, -1, 0, 1, 0, -1, 1, 0, -1, 0, 1, -1, 0, 1, 0, -1, 0, 1)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision_macro: float
    f1_macro: float
    confusion: tuple[tuple[int, ...], ...]
    precision_per_class: tuple[float, ...]
    recall_per_class: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision_macro": self.precision_macro,
            "f1_macro": self.f1_macro,
            "confusion": [list(r) for r in self.confusion],
            "precision_per_class": list(self.precision_per_class),
            "recall_per_class": list(self.recall_per_class),
        }


def metrics_from_confusion(confusion) -> Metrics:
    """Rows are true classes, columns predictions; empty denominators score 0."""
    c = np.asarray(confusion, dtype=np.int64)
    total = int(c.sum())
    if total == 0:
        raise ValueError("empty test set")
    tp = np.diag(c).astype(float)
    predicted, actual = c.sum(axis=0), c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(3), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(3), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(3), where=denom > 0)
    for cls in np.flatnonzero(predicted == 0):
        log.debug("class %d never predicted; precision taken as 0", cls)
    return Metrics(
        accuracy=float(tp.sum() / total),
        precision_macro=float(precision.mean()),
        f1_macro=float(f1.mean()),
        confusion=tuple(tuple(int(v) for v in row) for row in c),
        precision_per_class=tuple(float(v) for v in precision),
        recall_per_class=tuple(float(v) for v in recall),
    )


def metrics_from_predictions(y_true: Sequence[int], y_pred: Sequence[int]) -> Metrics:
    c = np.zeros((3, 3), dtype=np.int64)
    np.add.at(c, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return metrics_from_confusion(c)


def evaluate(net: Classifier, w, X, labels: Sequence[int]) -> Metrics:
    if len(labels) == 0:
        raise ValueError("empty test set")
    probs = net.predict_proba(w, X)
    # np.argmax returns the first maximum, i.e. ties go to the lower class index
    return metrics_from_predictions(labels, np.argmax(probs, axis=1))


@dataclass
class ExperimentConfig:
    synth: SynthSpec | None = field(default_factory=SynthSpec)
    csv: str | None = None
    n: int = 30
    horizons: list[int] = field(default_factory=lambda: [10, 13, 15])
    encoder: str = "sgaf"
    labels: LabelRuleConfig = field(default_factory=LabelRuleConfig)
    noise_rate: float = 0.0
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    lcn_branch_hidden: int = 64
    lcn_fusion_hidden: int = 32
    train: TrainConfig = field(default_factory=TrainConfig)
    image_side: int = 16
    rrp_rows: int = 32
    rrp_clip: float = 0.1
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    output_dir: str | None = None

    def __post_init__(self):
        if not self.horizons:
            raise ConfigError("horizons must be non-empty")
        if self.encoder not in ("sgaf", "srp"):
            raise ConfigError(f"encoder must be 'sgaf' or 'srp', got {self.encoder!r}")
        if (self.synth is None) == (self.csv is None):
            raise ConfigError("exactly one of 'synth' and 'csv' must be given")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1]")
        if self.classifier.input_side != self.image_side:
            raise ConfigError("classifier.input_side must equal image_side")

    def lcn_spec(self) -> LcnSpec:
        d = self.image_side**2
        return LcnSpec(x_dim=d, y_dim=d, branch_hidden=self.lcn_branch_hidden, fusion_hidden=self.lcn_fusion_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["classifier"]["hidden_sizes"] = list(self.classifier.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if d.get("csv") is not None:
                d.setdefault("synth", None)
            if isinstance(d.get("synth"), dict):
                d["synth"] = SynthSpec.from_dict(d["synth"])
            if "labels" in d:
                d["labels"] = LabelRuleConfig(**d["labels"])
            if "classifier" in d:
                d["classifier"] = ClassifierSpec(**d["classifier"])
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if "ratios" in d:
                d["ratios"] = tuple(d["ratios"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            with Path(path).open(encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def recovery_config(seed: int = 0, noise_rate: float = 0.3, meta_steps: int = 200) -> ExperimentConfig:
    """Synthetic label-recovery experiment used by the end-to-end acceptance run.

    The classifier gets ``meta_steps * K`` = 4000 SGD steps, enough for a net
    trained on noisy hard labels to start fitting the noise. Clipping the
    meta-gradient keeps a rare large step from saturating the corrector's output.
    """
    return ExperimentConfig(
        synth=SynthSpec(length=1500, trend_slopes=list(RECOVERY_SLOPES), noise_sd=1.0, seed=seed),
        n=30,
        horizons=[10, 13, 15],
        noise_rate=noise_rate,
        train=TrainConfig(
            K=20,
            eta=0.1,
            mu=0.3,
            noisy_batch=128,
            clean_batch=300,
            meta_steps=meta_steps,
            seed=seed,
            lcn_init_scale=0.2,
            meta_grad_clip=1.0,
        ),
    )


@dataclass
class HorizonData:
    horizon: int
    noisy_x: np.ndarray
    noisy_y: np.ndarray
    noisy_reference: np.ndarray  # resolved rule labels, used only for reporting
    noisy_labels: np.ndarray  # hard labels seen by the noisy-label baseline only
    clean_x: np.ndarray
    clean_labels: np.ndarray
    test_x: np.ndarray
    test_labels: np.ndarray
    clean_agreement: float
    disagreements: int

    def task(self, task_id: int) -> TaskSpec:
        return TaskSpec(task_id, self.horizon, self.noisy_x, self.noisy_y, self.clean_x, self.clean_labels)


def history_images(samples, encoder: str, side: int) -> np.ndarray:
    return np.stack(
        [encoders.downsample(encoders.encode_history(s.history, encoder), side).matrix.ravel() for s in samples]
    )


def horizon_images(samples, side: int, rows: int, clip: float) -> np.ndarray:
    out = []
    for s in samples:
        raster = encoders.rasterize_rrp(encoders.rrp_ratios(s), rows, clip, s.k)
        out.append(encoders.downsample(raster, side).matrix.ravel())
    return np.stack(out)


def load_series(cfg: ExperimentConfig) -> PriceSeries:
    if cfg.csv is not None:
        return load_price_csv(cfg.csv)
    return synth_series(cfg.synth)


def prepare_horizon(cfg: ExperimentConfig, series: PriceSeries, H: int) -> HorizonData:
    split = split_dataset(series, cfg.n, H, cfg.ratios)
    side = cfg.image_side
    labels = {}
    agreement, disagreements = 0, 0
    for name in ("noisy", "clean", "test"):
        samples = getattr(split, name)
        _, _, outcomes = label_samples(samples, cfg.labels, H)
        labels[name] = np.array([int(o.label) for o in outcomes])
        if name == "clean":
            agreement = float(np.mean([o.agreed for o in outcomes]))
            disagreements = sum(not o.agreed for o in outcomes)
    if cfg.csv is not None:
        base = [triple_barrier_label(s, cfg.labels) for s in split.noisy]
    else:
        base = labels["noisy"]
    noise_seed = cfg.train.seed * 7919 + H
    noisy_labels = np.array([int(v) for v in inject_label_noise(base, cfg.noise_rate, noise_seed)])
    return HorizonData(
        horizon=H,
        noisy_x=history_images(split.noisy, cfg.encoder, side),
        noisy_y=horizon_images(split.noisy, side, cfg.rrp_rows, cfg.rrp_clip),
        noisy_reference=labels["noisy"],
        noisy_labels=noisy_labels,
        clean_x=history_images(split.clean, cfg.encoder, side),
        clean_labels=labels["clean"],
        test_x=history_images(split.test, cfg.encoder, side),
        test_labels=labels["test"],
        clean_agreement=agreement,
        disagreements=disagreements,
    )


def prepare_data(cfg: ExperimentConfig) -> tuple[PriceSeries, list[HorizonData]]:
    series = load_series(cfg)
    return series, [prepare_horizon(cfg, series, H) for H in cfg.horizons]


def run_id(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()[:12]


def _distributions(hd: HorizonData) -> dict:
    return {
        "noisy_reference": class_distribution(hd.noisy_reference).to_dict(),
        "noisy_labels": class_distribution(hd.noisy_labels).to_dict(),
        "clean": class_distribution(hd.clean_labels).to_dict(),
        "test": class_distribution(hd.test_labels).to_dict(),
    }


def train_supervised(
    net: Classifier,
    X: np.ndarray,
    labels: np.ndarray,
    w0: ParamVector,
    steps: int,
    eta: float,
    batch: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Plain minibatch SGD on hard labels (the noisy-label baseline)."""
    w = w0.values.copy()
    targets = one_hot(labels)
    for step in range(steps):
        idx = _sample(rng, len(X), batch)
        g = net.gradient(w, X[idx], targets[idx])
        if not np.all(np.isfinite(g)):
            raise NumericError(f"baseline diverged at step {step}")
        w = w - eta * g
    return ParamVector(w, net.layout)


def _run_mmlc(cfg: ExperimentConfig, data: list[HorizonData], threads: int):
    net = Classifier(cfg.classifier)
    lcn = LabelCorrector(cfg.lcn_spec())
    tasks = [hd.task(i) for i, hd in enumerate(data)]
    w0 = initial_weights(net, cfg.train, len(tasks))
    state = train_mmlc(tasks, net, lcn, cfg.train, w0=w0, threads=threads)
    return net, lcn, w0, state


def corrected_agreement(lcn: LabelCorrector, alpha, hd: HorizonData) -> float:
    """Share of noisy-domain samples whose corrected label equals the pre-noise label."""
    corrected = np.argmax(lcn.predict(alpha, hd.noisy_x, hd.noisy_y), axis=1)
    return float(np.mean(corrected == hd.noisy_reference))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, threads: int = 1) -> dict:
    """Full pipeline for every configured horizon; writes report, checkpoint and history if ``out_dir``."""
    t0 = time.perf_counter()
    series, data = prepare_data(cfg)
    net, lcn, _, state = _run_mmlc(cfg, data, threads)
    tasks = []
    for i, hd in enumerate(data):
        tasks.append(
            {
                "task_id": i,
                "horizon": hd.horizon,
                "sizes": {"noisy": len(hd.noisy_x), "clean": len(hd.clean_x), "test": len(hd.test_x)},
                "class_distribution": _distributions(hd),
                "clean_label_agreement": hd.clean_agreement,
                "clean_label_disagreements": hd.disagreements,
                "corrected_label_agreement": corrected_agreement(lcn, state.alpha, hd),
                "metrics": evaluate(net, state.ws[i], hd.test_x, hd.test_labels).to_dict(),
            }
        )
    report = {
        "schema": REPORT_SCHEMA,
        "run_id": run_id(cfg),
        "config": cfg.to_dict(),
        "series": {"ticker": series.ticker, "length": len(series), "boundaries": list(split_cuts(len(series), cfg.ratios))},
        "meta_steps": len(state.history),
        "tasks": tasks,
        "wall_clock_seconds": time.perf_counter() - t0,
    }
    out = out_dir or cfg.output_dir
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        params = {"alpha": state.alpha, **{f"w{hd.horizon}": w for hd, w in zip(data, state.ws)}}
        save_checkpoint(out / "checkpoint.bin", params)
        with (out / "history.jsonl").open("w", encoding="utf-8") as fh:
            for row in state.history:
                fh.write(json.dumps(row) + "\n")
        _write_json(out / "report.json", report)
    return report


def evaluate_checkpoint(cfg: ExperimentConfig, path: str | Path) -> dict:
    """Test-split metrics for every horizon whose weights (``w<H>``) are in the checkpoint."""
    params = load_checkpoint(path)
    _, data = prepare_data(cfg)
    net = Classifier(cfg.classifier)
    tasks = []
    for hd in data:
        key = f"w{hd.horizon}"
        if key not in params:
            raise ConfigError(f"checkpoint has no weights for horizon {hd.horizon}")
        if params[key].layout != net.layout:
            raise ConfigError(f"checkpoint weights for horizon {hd.horizon} do not match the classifier layout")
        tasks.append({"horizon": hd.horizon, "metrics": evaluate(net, params[key], hd.test_x, hd.test_labels).to_dict()})
    return {"schema": REPORT_SCHEMA, "kind": "eval", "run_id": run_id(cfg), "tasks": tasks}


def compare_baseline(cfg: ExperimentConfig, out_dir: str | Path | None = None, threads: int = 1) -> dict:
    """MMLC against a classifier trained directly on noisy hard labels, same init and SGD budget."""
    t0 = time.perf_counter()
    _, data = prepare_data(cfg)
    net, lcn, w0, state = _run_mmlc(cfg, data, threads)
    steps = cfg.train.meta_steps * cfg.train.K
    rngs = task_rngs(cfg.train.seed + 104729, len(data))
    tasks = []
    for i, hd in enumerate(data):
        w_base = train_supervised(net, hd.noisy_x, hd.noisy_labels, w0[i], steps, cfg.train.eta, cfg.train.noisy_batch, rngs[i])
        base = evaluate(net, w_base, hd.test_x, hd.test_labels)
        mmlc = evaluate(net, state.ws[i], hd.test_x, hd.test_labels)
        tasks.append(
            {
                "task_id": i,
                "horizon": hd.horizon,
                "baseline": base.to_dict(),
                "mmlc": mmlc.to_dict(),
                "corrected_label_agreement": corrected_agreement(lcn, state.alpha, hd),
                "delta": {
                    k: getattr(mmlc, k) - getattr(base, k) for k in ("accuracy", "precision_macro", "f1_macro")
                },
            }
        )
    report = {
        "schema": REPORT_SCHEMA,
        "kind": "compare",
        "run_id": run_id(cfg),
        "config": cfg.to_dict(),
        "tasks": tasks,
        "wall_clock_seconds": time.perf_counter() - t0,
    }
    out = out_dir or cfg.output_dir
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "compare.json", report)
    return report
