"""Image encoders for history windows (GAF, SGAF, RP, SRP) and horizons (RRP).

All encoders return real matrices; conversion to 0-255 pixels only happens in
:func:`export_matrix`, so networks train on exact values.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SampleWindow, ScaledWindow, scale_window
from .errors import ConfigError

ENCODERS = ("gaf", "sgaf", "rp", "srp", "rrp")


@dataclass(frozen=True)
class EncodedImage:
    matrix: np.ndarray
    encoder: str
    sample_index: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.matrix.shape


@dataclass(frozen=True)
class RpConfig:
    q: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ConfigError(f"RP quantile must lie in (0, 1), got {self.q}")


def _as_values(x) -> np.ndarray:
    if isinstance(x, ScaledWindow):
        return x.values
    return np.asarray(x, dtype=np.float64)


def gaf_matrix(scaled: ScaledWindow | Sequence[float], k: int = 0) -> EncodedImage:
    """G[i, j] = x_i x_j - sqrt(1 - x_i^2) sqrt(1 - x_j^2), i.e. cos(phi_i + phi_j)."""
    x = _as_values(scaled)
    if np.any(np.abs(x) > 1.0):
        raise ValueError("GAF input must lie in [-1, 1]")
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    return EncodedImage(np.outer(x, x) - np.outer(s, s), "gaf", k)


def trend_sign(history: Sequence[float] | np.ndarray) -> int:
    """+1 when the window's endpoint slope is >= 0, else -1."""
    x = np.asarray(history, dtype=np.float64)
    if x.size < 2:
        raise ValueError("trend sign needs at least two points")
    return 1 if (x[-1] - x[0]) / (x.size - 1) >= 0 else -1


def sgaf(history: Sequence[float] | np.ndarray, k: int = 0) -> EncodedImage:
    sign = trend_sign(history)
    g = gaf_matrix(scale_window(history)).matrix
    return EncodedImage(sign * g, "sgaf", k)


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    # embedding dimension 1, delay 1: plain absolute differences
    return np.abs(x[:, None] - x[None, :])


def rp_threshold(history: Sequence[float] | np.ndarray, cfg: RpConfig = RpConfig()) -> float:
    """Nearest-rank-lower ``q``-quantile of the off-diagonal pairwise distances."""
    x = np.asarray(history, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("RP threshold needs at least two points")
    d = _pairwise_distances(x)[~np.eye(n, dtype=bool)]
    d.sort()
    return float(d[math.floor(cfg.q * (d.size - 1))])


def rp_matrix(history: Sequence[float] | np.ndarray, eps: float, k: int = 0) -> EncodedImage:
    if not eps >= 0:
        raise ValueError(f"recurrence threshold must be >= 0, got {eps}")
    x = np.asarray(history, dtype=np.float64)
    return EncodedImage((_pairwise_distances(x) <= eps).astype(np.float64), "rp", k)


def srp(history: Sequence[float] | np.ndarray, cfg: RpConfig = RpConfig(), k: int = 0) -> EncodedImage:
    r = rp_matrix(history, rp_threshold(history, cfg)).matrix
    return EncodedImage(trend_sign(history) * r, "srp", k)


def rrp_ratios(sample: SampleWindow) -> np.ndarray:
    """Relative change of each horizon price against the anchor (last history price)."""
    anchor = sample.anchor
    if not anchor > 0:
        raise ValueError(f"anchor price must be positive, got {anchor}")
    return np.asarray(sample.horizon, dtype=np.float64) / anchor - 1.0


def rasterize_rrp(ratios: Sequence[float] | np.ndarray, rows: int = 32, r_max: float = 0.1, k: int = 0) -> EncodedImage:
    """One-hot-per-column raster; row 0 is -r_max, row ``rows - 1`` is +r_max."""
    if rows < 3:
        raise ConfigError(f"raster needs at least 3 rows, got {rows}")
    if not r_max > 0:
        raise ConfigError(f"r_max must be positive, got {r_max}")
    r = np.clip(np.asarray(ratios, dtype=np.float64), -r_max, r_max)
    if r.ndim != 1 or r.size == 0 or not np.all(np.isfinite(r)):
        raise ValueError("ratios must be a non-empty finite vector")
    # round half up so that ties are platform independent
    idx = np.floor((r + r_max) / (2.0 * r_max) * (rows - 1) + 0.5).astype(int)
    idx = np.clip(idx, 0, rows - 1)
    out = np.zeros((rows, r.size))
    out[idx, np.arange(r.size)] = 1.0
    return EncodedImage(out, "rrp", k)


@lru_cache(maxsize=64)
def _area_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) matrix averaging source cells by their overlap with each target cell."""
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * src / dst, (i + 1) * src / dst
        for j in range(int(math.floor(lo)), min(src, int(math.ceil(hi)))):
            w[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    w /= w.sum(axis=1, keepdims=True)
    w.flags.writeable = False
    return w


def downsample(image: EncodedImage, side: int) -> EncodedImage:
    """Area-weighted pooling onto ``side x side``; plain block means when sizes divide."""
    if side < 1:
        raise ConfigError(f"side must be positive, got {side}")
    m = image.matrix
    if m.shape == (side, side):
        return image
    out = _area_weights(m.shape[0], side) @ m @ _area_weights(m.shape[1], side).T
    return EncodedImage(out, image.encoder, image.sample_index)


def encode_history(history: np.ndarray, encoder: str, rp_cfg: RpConfig = RpConfig(), k: int = 0) -> EncodedImage:
    if encoder == "sgaf":
        return sgaf(history, k)
    if encoder == "srp":
        return srp(history, rp_cfg, k)
    if encoder == "gaf":
        return gaf_matrix(scale_window(history), k)
    if encoder == "rp":
        return rp_matrix(history, rp_threshold(history, rp_cfg), k)
    raise ConfigError(f"unknown history encoder {encoder!r}")


def encode_sample(sample: SampleWindow, encoder: str, rows: int = 32, r_max: float = 0.1) -> EncodedImage:
    if encoder == "rrp":
        return rasterize_rrp(rrp_ratios(sample), rows, r_max, sample.k)
    return encode_history(sample.history, encoder, k=sample.k)


def export_matrix(image: EncodedImage, path: str | Path, fmt: str = "csv") -> None:
    m = image.matrix
    path = Path(path)
    if fmt == "csv":
        lines = (",".join(repr(float(v)) for v in row) for row in m)
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    elif fmt == "pgm":
        lo, hi = float(m.min()), float(m.max())
        if hi > lo:
            pix = np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(int)
        else:
            pix = np.zeros(m.shape, dtype=int)
        body = "\n".join(" ".join(str(p) for p in row) for row in pix)
        path.write_text(f"P2\n{m.shape[1]} {m.shape[0]}\n255\n{body}\n", encoding="ascii")
    else:
        raise ConfigError(f"unknown export format {fmt!r}")


def load_matrix_csv(path: str | Path) -> np.ndarray:
    rows = [line for line in Path(path).read_text(encoding="ascii").splitlines() if line]
    return np.array([[float(v) for v in line.split(",")] for line in rows])
