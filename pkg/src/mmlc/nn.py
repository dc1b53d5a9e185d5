"""Dense networks on flat parameter vectors with hand-derived gradients.

Two fixed architectures are provided:

* :class:`Classifier`, the per-task main model ``f_w``: flatten -> dense layers
  -> 3 logits -> softmax.
* :class:`LabelCorrector`, the shared meta model ``g_alpha``: two untied
  branches (history image, horizon image) -> concat -> relu fusion -> softmax.

Everything runs in float64 so that finite-difference oracles are meaningful.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputFormatError

EPS_NUM = 1e-12
NUM_CLASSES = 3

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size != layout_size(self.layout):
            raise ValueError(f"vector of length {v.size} does not match layout of size {layout_size(self.layout)}")

    def __len__(self):
        return self.values.size

    def unpack(self) -> dict[str, np.ndarray]:
        return unpack(self.values, self.layout)

    def replace(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)


def layout_size(layout: Layout) -> int:
    return int(sum(np.prod(shape, dtype=np.int64) for _, shape in layout))


def unpack(flat: np.ndarray, layout: Layout) -> dict[str, np.ndarray]:
    """Named reshaped views into ``flat`` (no copies)."""
    out, pos = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape))
        out[name] = flat[pos : pos + size].reshape(shape)
        pos += size
    return out


def _flat(w) -> np.ndarray:
    return w.values if isinstance(w, ParamVector) else np.asarray(w, dtype=np.float64)


def _batch(X) -> np.ndarray:
    """Accept an image, a list of images, or a (B, ...) array; return (B, features)."""
    if hasattr(X, "matrix"):
        return X.matrix.reshape(1, -1).astype(np.float64)
    if isinstance(X, (list, tuple)) and X and hasattr(X[0], "matrix"):
        return np.stack([_batch(x)[0] for x in X])
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(X.shape[0], -1)


def init_params(layout: Layout, seed: int, scale: float = 0.05) -> ParamVector:
    """Zero-mean normal weights with sd ``scale``; biases (names starting with ``b``) zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in layout:
        if name.startswith("b"):
            chunks.append(np.zeros(int(np.prod(shape))))
        else:
            chunks.append(rng.normal(0.0, 1.0, size=int(np.prod(shape))) * scale)
    return ParamVector(np.concatenate(chunks), layout)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    # vector-Jacobian product of softmax: p * (g - <g, p>)
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def soft_cross_entropy(target, pred) -> float:
    """Mean of ``-sum_c target_c log(pred_c + eps)`` over a batch (or a single pair)."""
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if t.shape != p.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {p.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("prediction is not a probability distribution")
    return float(np.mean(-np.sum(t * np.log(p + EPS_NUM), axis=-1)))


def one_hot(labels: Sequence[int]) -> np.ndarray:
    y = np.asarray([int(v) for v in labels])
    out = np.zeros((y.size, NUM_CLASSES))
    out[np.arange(y.size), y] = 1.0
    return out


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, h: (z > 0).astype(np.float64)),
}


@dataclass(frozen=True)
class ClassifierSpec:
    input_side: int = 16
    hidden_sizes: tuple[int, ...] = (64, 32)
    activation: str = "tanh"
    classes: int = NUM_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.classes != NUM_CLASSES:
            raise ConfigError("classifier must have exactly 3 classes")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError("hidden_sizes must be a non-empty list of positive ints")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class LcnSpec:
    x_dim: int = 256
    y_dim: int = 256
    branch_hidden: int = 64
    fusion_hidden: int = 32
    classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.classes != NUM_CLASSES:
            raise ConfigError("label corrector must emit 3 classes")
        if min(self.x_dim, self.y_dim, self.branch_hidden, self.fusion_hidden) < 1:
            raise ConfigError("LCN sizes must be positive")


class Classifier:
    def __init__(self, spec: ClassifierSpec):
        self.spec = spec
        dims = [spec.input_side**2, *spec.hidden_sizes, NUM_CLASSES]
        layout = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            layout += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        self.layout: Layout = tuple(layout)
        self.n_layers = len(dims) - 1
        self.act, self.dact = _ACTIVATIONS[spec.activation]

    @property
    def size(self) -> int:
        return layout_size(self.layout)

    def init_params(self, seed: int, scale: float = 0.05) -> ParamVector:
        return init_params(self.layout, seed, scale)

    def forward(self, w, X) -> tuple[np.ndarray, list]:
        """Class probabilities (B, 3) and the per-layer cache used by :meth:`backward`."""
        p = unpack(_flat(w), self.layout)
        h = _batch(X)
        if h.shape[1] != self.spec.input_side**2:
            raise ValueError(f"expected {self.spec.input_side ** 2} input features, got {h.shape[1]}")
        cache = []
        for i in range(self.n_layers - 1):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            cache.append((h, z))
            h = self.act(z)
        last = self.n_layers - 1
        cache.append((h, None))
        probs = softmax(h @ p[f"W{last}"] + p[f"b{last}"])
        return probs, cache

    def predict_proba(self, w, X) -> np.ndarray:
        return self.forward(w, X)[0]

    def loss(self, w, X, targets) -> float:
        return soft_cross_entropy(targets, self.predict_proba(w, X))

    def backward(self, w, cache: list, probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
        """Flat gradient given dL/dprobs for an already computed forward pass."""
        p = unpack(_flat(w), self.layout)
        grad = np.zeros(self.size)
        g = unpack(grad, self.layout)
        delta = _softmax_backward(probs, dprobs)
        for i in reversed(range(self.n_layers)):
            h_in, _ = cache[i]
            g[f"W{i}"][...] = h_in.T @ delta
            g[f"b{i}"][...] = delta.sum(axis=0)
            if i > 0:
                h_prev_in, z_prev = cache[i - 1]
                h_prev = h_in
                delta = (delta @ p[f"W{i}"].T) * self.dact(z_prev, h_prev)
        return grad

    def gradient(self, w, X, targets) -> np.ndarray:
        """Gradient of the mean soft cross-entropy over the batch with respect to ``w``."""
        probs, cache = self.forward(w, X)
        t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        dprobs = -t / (probs + EPS_NUM) / probs.shape[0]
        return self.backward(w, cache, probs, dprobs)


class LabelCorrector:
    """Pseudo-Siamese label correction network: untied branches for X' and Y'."""

    def __init__(self, spec: LcnSpec):
        self.spec = spec
        bh, fh = spec.branch_hidden, spec.fusion_hidden
        self.layout: Layout = (
            ("WA", (spec.x_dim, bh)),
            ("bA", (bh,)),
            ("WB", (spec.y_dim, bh)),
            ("bB", (bh,)),
            ("WF", (2 * bh, fh)),
            ("bF", (fh,)),
            ("WO", (fh, NUM_CLASSES)),
            ("bO", (NUM_CLASSES,)),
        )

    @property
    def size(self) -> int:
        return layout_size(self.layout)

    def init_params(self, seed: int, scale: float = 0.05) -> ParamVector:
        return init_params(self.layout, seed, scale)

    def forward(self, alpha, Xp, Yp) -> tuple[np.ndarray, tuple]:
        p = unpack(_flat(alpha), self.layout)
        xa, yb = _batch(Xp), _batch(Yp)
        if xa.shape[1] != self.spec.x_dim or yb.shape[1] != self.spec.y_dim:
            raise ValueError(
                f"LCN expects ({self.spec.x_dim}, {self.spec.y_dim}) features, got ({xa.shape[1]}, {yb.shape[1]})"
            )
        ha = np.tanh(xa @ p["WA"] + p["bA"])
        hb = np.tanh(yb @ p["WB"] + p["bB"])
        hc = np.concatenate([ha, hb], axis=1)
        zf = hc @ p["WF"] + p["bF"]
        hf = np.maximum(zf, 0.0)
        probs = softmax(hf @ p["WO"] + p["bO"])
        return probs, (xa, yb, ha, hb, hc, zf, hf)

    def predict(self, alpha, Xp, Yp) -> np.ndarray:
        return self.forward(alpha, Xp, Yp)[0]

    def backward(self, alpha, cache: tuple, probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
        p = unpack(_flat(alpha), self.layout)
        xa, yb, ha, hb, hc, zf, hf = cache
        grad = np.zeros(self.size)
        g = unpack(grad, self.layout)
        do = _softmax_backward(probs, dprobs)
        g["WO"][...] = hf.T @ do
        g["bO"][...] = do.sum(axis=0)
        dzf = (do @ p["WO"].T) * (zf > 0)
        g["WF"][...] = hc.T @ dzf
        g["bF"][...] = dzf.sum(axis=0)
        dhc = dzf @ p["WF"].T
        bh = self.spec.branch_hidden
        dza = dhc[:, :bh] * (1.0 - ha * ha)
        dzb = dhc[:, bh:] * (1.0 - hb * hb)
        g["WA"][...] = xa.T @ dza
        g["bA"][...] = dza.sum(axis=0)
        g["WB"][...] = yb.T @ dzb
        g["bB"][...] = dzb.sum(axis=0)
        return grad


def forward_classifier(net: Classifier, w, X) -> np.ndarray:
    return net.predict_proba(w, X)


def forward_lcn(lcn: LabelCorrector, alpha, Xp, Yp) -> np.ndarray:
    return lcn.predict(alpha, Xp, Yp)


def backward_classifier(net: Classifier, w, X, targets) -> np.ndarray:
    return net.gradient(w, X, targets)


def noisy_loss(lcn: LabelCorrector, net: Classifier, alpha, w, Xp, Yp) -> float:
    """Inner objective: cross-entropy of f_w(X') against the corrected label g_alpha(X', Y')."""
    return soft_cross_entropy(lcn.predict(alpha, Xp, Yp), net.predict_proba(w, Xp))


def backward_lcn_through_target(lcn: LabelCorrector, net: Classifier, alpha, w, Xp, Yp) -> np.ndarray:
    """d/d alpha of the inner objective with ``w`` held fixed.

    ``alpha`` only enters through the target side of the cross-entropy, whose
    derivative with respect to the target is ``-log(pred)``.
    """
    pred = net.predict_proba(w, Xp)
    yc, cache = lcn.forward(alpha, Xp, Yp)
    dtarget = -np.log(pred + EPS_NUM) / pred.shape[0]
    return lcn.backward(alpha, cache, yc, dtarget)


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"MMLCPV"
_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, ParamVector]) -> None:
    """Versioned header + JSON layout descriptor + little-endian float64 payload."""
    entries = [
        {"name": name, "layout": [[n, list(s)] for n, s in pv.layout], "count": len(pv)}
        for name, pv in params.items()
    ]
    header = json.dumps({"entries": entries}, separators=(",", ":")).encode("utf-8")
    payload = b"".join(pv.values.astype("<f8").tobytes() for pv in params.values())
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC + struct.pack("<HI", _VERSION, len(header)) + header + payload)


def load_checkpoint(path: str | Path) -> dict[str, ParamVector]:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise InputFormatError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, len(_MAGIC))
    if version != _VERSION:
        raise InputFormatError(f"{path}: unsupported checkpoint version {version}")
    start = len(_MAGIC) + struct.calcsize("<HI")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        entries = header["entries"]
        total = sum(int(e["count"]) for e in entries)
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise InputFormatError(f"{path}: corrupt checkpoint header ({exc})") from None
    if len(raw) - start - hlen != 8 * total:
        raise InputFormatError(f"{path}: payload size does not match header")
    data = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    out, pos = {}, 0
    for e in entries:
        layout = tuple((n, tuple(s)) for n, s in e["layout"])
        out[e["name"]] = ParamVector(data[pos : pos + e["count"]].astype(np.float64), layout)
        pos += e["count"]
    return out
