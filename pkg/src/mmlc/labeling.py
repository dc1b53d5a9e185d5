"""Trend labels: the mean-ratio baseline rule, triple barrier, and clean-label agreement."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import SampleWindow
from .encoders import rrp_ratios
from .errors import ConfigError, InputFormatError


class TrendLabel(enum.IntEnum):
    FALL = 0
    STATIONARY = 1
    RISE = 2


@dataclass(frozen=True)
class LabelRuleConfig:
    omega: float = 1.0
    rate: float = 0.005
    theta: float = 0.02

    def __post_init__(self):
        for name in ("omega", "rate", "theta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class CleanLabelOutcome:
    label: TrendLabel
    agreed: bool
    source: str  # "agreement" | "fallback" | "patch"


@dataclass(frozen=True)
class ClassDistribution:
    counts: tuple[int, int, int]
    proportions: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"counts": list(self.counts), "proportions": list(self.proportions)}


def baseline_threshold(cfg: LabelRuleConfig, H: int) -> float:
    """Stationary band half-width for a horizon of ``H`` days.

    The average compounded growth over the horizon at a daily ``rate``, minus one,
    scaled by ``omega``.
    """
    if H < 1:
        raise ValueError(f"horizon must be >= 1, got {H}")
    r = cfg.rate
    return cfg.omega * (((1.0 + r) ** (H + 1) - (1.0 + r)) / (r * H) - 1.0)


def mean_ratio_label(ratios: Sequence[float] | np.ndarray, b: float) -> TrendLabel:
    # |mean| == b falls in the (closed) stationary band
    r = np.asarray(ratios, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty ratio vector")
    if not b > 0:
        raise ValueError(f"baseline must be positive, got {b}")
    m = float(r.mean())
    if m < -b:
        return TrendLabel.FALL
    if m > b:
        return TrendLabel.RISE
    return TrendLabel.STATIONARY


def triple_barrier_label(sample: SampleWindow, cfg: LabelRuleConfig) -> TrendLabel:
    """First passage through anchor*(1 +/- theta) within the horizon; no hit is stationary."""
    anchor = sample.anchor
    if not anchor > 0:
        raise ValueError(f"anchor price must be positive, got {anchor}")
    upper, lower = anchor * (1.0 + cfg.theta), anchor * (1.0 - cfg.theta)
    for price in sample.horizon:
        if price >= upper:
            return TrendLabel.RISE
        if price <= lower:
            return TrendLabel.FALL
    return TrendLabel.STATIONARY


def clean_label_resolve(a: TrendLabel, b: TrendLabel) -> CleanLabelOutcome:
    """Keep ``a`` (the mean-ratio label) and mark whether the triple barrier agreed."""
    a = TrendLabel(a)
    if a == TrendLabel(b):
        return CleanLabelOutcome(a, True, "agreement")
    return CleanLabelOutcome(a, False, "fallback")


def label_samples(
    samples: Sequence[SampleWindow], cfg: LabelRuleConfig, H: int
) -> tuple[list[TrendLabel], list[TrendLabel], list[CleanLabelOutcome]]:
    """Both rule labels and the resolved clean outcome for every sample."""
    b = baseline_threshold(cfg, H)
    mean_labels = [mean_ratio_label(rrp_ratios(s), b) for s in samples]
    barrier_labels = [triple_barrier_label(s, cfg) for s in samples]
    outcomes = [clean_label_resolve(a, c) for a, c in zip(mean_labels, barrier_labels)]
    return mean_labels, barrier_labels, outcomes


def write_label_file(path: str | Path, ks: Iterable[int], outcomes: Iterable[CleanLabelOutcome]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "label", "agreed", "source"])
        for k, o in zip(ks, outcomes):
            w.writerow([k, int(o.label), int(o.agreed), o.source])


def write_disagreement_report(
    path: str | Path,
    ks: Sequence[int],
    mean_labels: Sequence[TrendLabel],
    barrier_labels: Sequence[TrendLabel],
) -> int:
    """List every sample where the two rules disagree; returns the number of rows."""
    rows = [(k, int(a), int(b)) for k, a, b in zip(ks, mean_labels, barrier_labels) if a != b]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "mean_ratio_label", "triple_barrier_label"])
        w.writerows(rows)
    return len(rows)


def apply_label_patch(
    ks: Sequence[int], outcomes: Sequence[CleanLabelOutcome], patch_path: str | Path
) -> list[CleanLabelOutcome]:
    """Override labels with human decisions from a ``k,label`` file."""
    patch: dict[int, TrendLabel] = {}
    with Path(patch_path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["k", "label"]:
            raise InputFormatError(f"{patch_path}: expected header 'k,label'")
        for line_no, row in enumerate(reader, start=2):
            try:
                patch[int(row[0])] = TrendLabel(int(row[1]))
            except (ValueError, IndexError):
                raise InputFormatError(f"malformed patch row at line {line_no}: {row}") from None
    out = list(outcomes)
    for i, k in enumerate(ks):
        if k in patch:
            out[i] = CleanLabelOutcome(patch[k], out[i].agreed, "agreement" if out[i].agreed else "patch")
    return out


def inject_label_noise(labels: Sequence[int], rho: float, seed: int) -> list[TrendLabel]:
    """Replace each label with probability ``rho`` by a uniformly drawn *different* class."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rho}")
    y = np.asarray([int(v) for v in labels], dtype=np.int64)
    rng = np.random.default_rng(seed)
    flip = rng.random(y.size) < rho
    shift = rng.integers(1, 3, size=y.size)
    noisy = np.where(flip, (y + shift) % 3, y)
    return [TrendLabel(int(v)) for v in noisy]


def class_distribution(labels: Sequence[int]) -> ClassDistribution:
    if len(labels) == 0:
        raise ValueError("empty label set")
    counts = np.bincount(np.asarray([int(v) for v in labels]), minlength=3)
    if counts.size != 3:
        raise ValueError("labels must be in {0, 1, 2}")
    total = int(counts.sum())
    return ClassDistribution(
        counts=tuple(int(c) for c in counts),
        proportions=tuple(float(c) / total for c in counts),
    )
