"""Price ingestion, synthetic series, sample windows and the noisy/clean/test split."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputFormatError

PRICE_FLOOR = 0.01


@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    dates: tuple[dt.date, ...]
    closes: np.ndarray

    def __post_init__(self):
        closes = np.asarray(self.closes, dtype=np.float64)
        object.__setattr__(self, "closes", closes)
        if closes.ndim != 1 or len(closes) != len(self.dates):
            raise ValueError("dates and closes must be 1-D sequences of equal length")
        if not np.all(np.isfinite(closes)) or np.any(closes <= 0):
            raise ValueError("closes must be finite and positive")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("dates must be strictly increasing")

    def __len__(self):
        return len(self.closes)


@dataclass(frozen=True)
class SampleWindow:
    """One (history, horizon) pair; ``k`` is local to the sequence it was cut from."""

    k: int
    history: np.ndarray
    horizon: np.ndarray

    @property
    def anchor(self) -> float:
        return float(self.history[-1])


@dataclass(frozen=True)
class ScaledWindow:
    values: np.ndarray
    scale_lo: float
    scale_hi: float


@dataclass(frozen=True)
class DatasetSplit:
    noisy: list[SampleWindow]
    clean: list[SampleWindow]
    test: list[SampleWindow]
    boundaries: tuple[int, int]


@dataclass
class SynthSpec:
    length: int = 1500
    regime: str = "piecewise-trend"
    trend_slopes: list[float] = field(default_factory=lambda: [1.0, -1.0])
    noise_sd: float = 1.0
    seed: int = 0
    start: float = 100.0
    reversion: float = 0.05

    def validate(self) -> None:
        if self.length < 100:
            raise ConfigError(f"synthetic length must be >= 100, got {self.length}")
        if self.regime not in ("piecewise-trend", "mean-reverting"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if not math.isfinite(self.noise_sd) or self.noise_sd < 0:
            raise ConfigError("noise_sd must be finite and >= 0")
        if self.regime == "piecewise-trend" and not self.trend_slopes:
            raise ConfigError("piecewise-trend regime needs at least one slope")
        if not self.start > 0:
            raise ConfigError("start price must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_price_csv(path: str | Path, ticker: str | None = None) -> PriceSeries:
    """Read a ``date,close`` CSV (ISO dates). Rows are sorted by date on return."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such price file: {path}")
    rows: list[tuple[dt.date, float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["date", "close"]:
            raise InputFormatError(f"{path}: expected header 'date,close', got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise InputFormatError(f"malformed row at line {line_no}: {row}")
            try:
                day = dt.date.fromisoformat(row[0].strip())
                close = float(row[1])
            except ValueError as exc:
                raise InputFormatError(f"malformed row at line {line_no}: {exc}") from None
            if not math.isfinite(close) or close <= 0:
                raise InputFormatError(f"non-positive price at line {line_no}")
            rows.append((day, close))
    rows.sort(key=lambda r: r[0])
    for (a, _), (b, _) in zip(rows, rows[1:]):
        if a == b:
            raise InputFormatError(f"duplicate date {a} in {path}")
    return PriceSeries(
        ticker=ticker or path.stem,
        dates=tuple(r[0] for r in rows),
        closes=np.array([r[1] for r in rows], dtype=np.float64),
    )


def write_price_csv(series: PriceSeries, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "close"])
        for day, close in zip(series.dates, series.closes):
            w.writerow([day.isoformat(), repr(float(close))])


def sample_count(N: int, n: int, H: int) -> int:
    # Each sample needs n history points and H future points.
    return N - n - H + 1


def enumerate_samples(series: PriceSeries | Sequence[float] | np.ndarray, n: int, H: int) -> list[SampleWindow]:
    """Slide a window of ``n`` history points followed by ``H`` horizon points.

    Sample ``k`` has history ``x[k : k + n]`` and horizon ``x[k + n : k + n + H]``
    (0-based), so the anchor is the last history value.
    """
    x = series.closes if isinstance(series, PriceSeries) else np.asarray(series, dtype=np.float64)
    if n < 2 or H < 1:
        raise ConfigError(f"need n >= 2 and H >= 1, got n={n}, H={H}")
    N = len(x)
    if N < n + H:
        raise ValueError(f"series too short: N={N} < n + H = {n + H}")
    return [
        SampleWindow(k=k, history=x[k : k + n].copy(), horizon=x[k + n : k + n + H].copy())
        for k in range(sample_count(N, n, H))
    ]


def scale_window(history: Sequence[float] | np.ndarray) -> ScaledWindow:
    """Affine min-max map onto [-1, 1]; a constant window maps to zeros."""
    x = np.asarray(history, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot scale an empty window")
    if not np.all(np.isfinite(x)):
        raise ValueError("window contains NaN or Inf")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return ScaledWindow(np.zeros_like(x), lo, hi)
    values = 2.0 * (x - lo) / (hi - lo) - 1.0
    return ScaledWindow(np.clip(values, -1.0, 1.0), lo, hi)


def split_cuts(N: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    # Fractions keep floor(0.6 * 1000) == 600 exact.
    fr = [Fraction(repr(float(r))) for r in ratios]
    return math.floor(fr[0] * N), math.floor((fr[0] + fr[1]) * N)


def split_dataset(
    series: PriceSeries,
    n: int,
    H: int,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
) -> DatasetSplit:
    """Cut the series into contiguous noisy/clean/test periods and window each one separately."""
    N = len(series)
    c1, c2 = split_cuts(N, ratios)
    segments = {"noisy": (0, c1), "clean": (c1, c2), "test": (c2, N)}
    out = {}
    for name, (a, b) in segments.items():
        if b - a < n + H:
            raise ValueError(f"{name} segment [{a}, {b}) has {b - a} points, shorter than n + H = {n + H}")
        out[name] = enumerate_samples(series.closes[a:b], n, H)
    return DatasetSplit(boundaries=(c1, c2), **out)


def synth_series(spec: SynthSpec, ticker: str = "SYNTH") -> PriceSeries:
    """Deterministic synthetic close prices for a given spec and seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    L = spec.length
    if spec.regime == "piecewise-trend":
        seg_lengths = [len(s) for s in np.array_split(np.arange(L), len(spec.trend_slopes))]
        steps = np.concatenate([np.full(m, float(s)) for m, s in zip(seg_lengths, spec.trend_slopes)])
        trend = spec.start + np.concatenate([[0.0], np.cumsum(steps[1:])])
        closes = trend + rng.normal(0.0, spec.noise_sd, size=L) if spec.noise_sd > 0 else trend
    else:
        closes = np.empty(L)
        closes[0] = spec.start
        shocks = rng.normal(0.0, spec.noise_sd, size=L)
        for t in range(1, L):
            closes[t] = closes[t - 1] + spec.reversion * (spec.start - closes[t - 1]) + shocks[t]
    closes = np.maximum(closes, PRICE_FLOOR)
    origin = dt.date(2000, 1, 1)
    dates = tuple(origin + dt.timedelta(days=i) for i in range(L))
    return PriceSeries(ticker=ticker, dates=dates, closes=closes)


def load_synth_spec(path: str | Path) -> SynthSpec:
    with Path(path).open(encoding="utf-8") as fh:
        return SynthSpec.from_dict(json.load(fh))
