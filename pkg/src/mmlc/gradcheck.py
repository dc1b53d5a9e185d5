"""Finite-difference oracles for every hand-derived gradient in the package.

Each check returns a :class:`CheckResult`; :func:`run_suite` collects them into
the table printed by ``mmlc gradcheck``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bilevel import (
    CleanObjective,
    InnerState,
    NoisyObjective,
    TrainConfig,
    bilevel_fd_oracle,
    fd_hvp_ww,
    meta_gradient,
)
from .nn import (
    Classifier,
    ClassifierSpec,
    LabelCorrector,
    LcnSpec,
    backward_lcn_through_target,
    noisy_loss,
    soft_cross_entropy,
    softmax,
)

FD_STEP = 1e-5
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    size: int
    error: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for j in range(x.size):
        old = x[j]
        x[j] = old + h
        up = f(x)
        x[j] = old - h
        down = f(x)
        x[j] = old
        out[j] = (up - down) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b)) / scale


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    return float(a @ b) / (na * nb) if na and nb else 0.0


def _random_point(rng, size, scale=0.5):
    # biases are random too: zero biases can leave relu pre-activations exactly at the kink
    return rng.normal(0.0, scale, size)


def _soft_targets(rng, m):
    return softmax(rng.normal(size=(m, 3)))


def random_classifier(rng: np.random.Generator) -> Classifier:
    depth = int(rng.integers(1, 3))
    spec = ClassifierSpec(
        input_side=int(rng.integers(2, 5)),
        hidden_sizes=tuple(int(h) for h in rng.integers(2, 9, size=depth)),
        activation=str(rng.choice(["tanh", "relu"])),
    )
    return Classifier(spec)


def random_lcn(rng: np.random.Generator) -> LabelCorrector:
    return LabelCorrector(
        LcnSpec(
            x_dim=int(rng.integers(2, 17)),
            y_dim=int(rng.integers(2, 17)),
            branch_hidden=int(rng.integers(2, 9)),
            fusion_hidden=int(rng.integers(2, 9)),
        )
    )


def check_classifier(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = random_classifier(rng)
    w = _random_point(rng, net.size)
    X = rng.normal(size=(5, net.spec.input_side**2))
    t = _soft_targets(rng, 5)
    num = central_difference(lambda v: net.loss(v, X, t), w)
    err = relative_error(net.gradient(w, X, t), num)
    s = net.spec
    return CheckResult(f"classifier[{seed}]", net.size, err, GRAD_TOL, f"{s.activation} {list(s.hidden_sizes)}")


def check_lcn(seed: int) -> CheckResult:
    """Gradient of the corrected-label loss with respect to the corrector, classifier fixed."""
    rng = np.random.default_rng(seed)
    lcn = random_lcn(rng)
    side = int(np.sqrt(lcn.spec.x_dim))
    if side * side != lcn.spec.x_dim:
        lcn = LabelCorrector(LcnSpec(side * side, lcn.spec.y_dim, lcn.spec.branch_hidden, lcn.spec.fusion_hidden))
    net = Classifier(ClassifierSpec(input_side=side, hidden_sizes=(3,)))
    w = _random_point(rng, net.size, 0.8)
    a = _random_point(rng, lcn.size)
    Xp = rng.normal(size=(6, lcn.spec.x_dim))
    Yp = rng.normal(size=(6, lcn.spec.y_dim))
    num = central_difference(lambda v: noisy_loss(lcn, net, v, w, Xp, Yp), a)
    err = relative_error(backward_lcn_through_target(lcn, net, a, w, Xp, Yp), num)
    return CheckResult(f"lcn[{seed}]", lcn.size, err, GRAD_TOL, f"branch {lcn.spec.branch_hidden} fusion {lcn.spec.fusion_hidden}")


def check_lcn_own_loss(seed: int) -> CheckResult:
    """Gradient of a plain cross-entropy on the corrector's output (its forward/backward pair)."""
    rng = np.random.default_rng(seed)
    lcn = random_lcn(rng)
    a = _random_point(rng, lcn.size)
    Xp = rng.normal(size=(4, lcn.spec.x_dim))
    Yp = rng.normal(size=(4, lcn.spec.y_dim))
    t = _soft_targets(rng, 4)
    num = central_difference(lambda v: soft_cross_entropy(t, lcn.predict(v, Xp, Yp)), a)
    probs, cache = lcn.forward(a, Xp, Yp)
    ana = lcn.backward(a, cache, probs, -t / (probs + 1e-12) / 4)
    return CheckResult(f"lcn-head[{seed}]", lcn.size, relative_error(ana, num), GRAD_TOL)


@dataclass
class HypergradInstance:
    noisy: NoisyObjective
    clean: CleanObjective
    alpha: np.ndarray
    w0: np.ndarray
    eta: float


def tiny_hypergrad_instance(seed: int = 0, eta: float = 0.5) -> HypergradInstance:
    """Single task, K = 1, a corrector with 91 coordinates and a 35-parameter classifier."""
    rng = np.random.default_rng(seed)
    net = Classifier(ClassifierSpec(input_side=2, hidden_sizes=(4,)))
    lcn = LabelCorrector(LcnSpec(x_dim=4, y_dim=4, branch_hidden=4, fusion_hidden=4))
    Xp, Yp = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    Xc, yc = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
    return HypergradInstance(
        NoisyObjective(net, lcn, Xp, Yp),
        CleanObjective(net, Xc, yc),
        lcn.init_params(seed + 1, scale=0.8).values,
        net.init_params(seed + 2, scale=0.8).values,
        eta,
    )


def hypergrad_vs_oracle(inst: HypergradInstance, mode: str = "identity", delta: float = 1e-4) -> dict:
    """Compare the one-step meta-gradient with the brute-force bilevel derivative."""
    w1 = inst.w0 - inst.eta * inst.noisy.grad_w(inst.alpha, inst.w0)
    state = InnerState(w_K=w1, w_prev=inst.w0, last_batch=np.arange(len(inst.noisy.Xp)), inner_loss=float("nan"))
    cfg = TrainConfig(K=1, eta=inst.eta, hessian_mode=mode)
    got = meta_gradient([(inst.noisy, inst.clean, state)], inst.alpha, cfg)
    oracle = bilevel_fd_oracle(inst.noisy, inst.clean, inst.alpha, inst.w0, inst.eta, delta)
    mask = np.abs(oracle) > 1e-8
    rel = np.abs(got[mask] - oracle[mask]) / np.abs(oracle[mask])
    return {
        "mode": mode,
        "coords": int(inst.alpha.size),
        "cosine": cosine(got, oracle),
        "max_rel_err": float(rel.max()) if rel.size else 0.0,
        "norm_ratio": float(np.linalg.norm(got) / np.linalg.norm(oracle)),
    }


class QuadraticSurrogate:
    """``L(alpha, w) = 0.5 w^T A w + b^T w + alpha . w`` with a closed-form Hessian ``A``."""

    def __init__(self, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(dim, dim))
        self.A = m @ m.T / dim + np.eye(dim)
        self.b = rng.normal(size=dim)

    def grad_w(self, alpha, w):
        return self.A @ w + self.b + alpha

    def grad_alpha(self, alpha, w):
        return np.asarray(w, dtype=np.float64).copy()


def check_hvp_quadratic(eps_scales=(1e-1, 1e-2, 1e-3), dim: int = 12) -> list[CheckResult]:
    q = QuadraticSurrogate(dim)
    rng = np.random.default_rng(1)
    w, v, alpha = rng.normal(size=dim), rng.normal(size=dim), rng.normal(size=dim)
    exact = q.A @ v
    return [
        CheckResult(f"hvp-quadratic[eps={e:g}]", dim, float(np.max(np.abs(fd_hvp_ww(q, alpha, w, v, e) - exact))), 1e-10)
        for e in eps_scales
    ]


def run_suite(n_configs: int = 20, seed: int = 0) -> list[CheckResult]:
    rows: list[CheckResult] = []
    for i in range(n_configs):
        rows.append(check_classifier(seed + i))
    for i in range(n_configs):
        rows.append(check_lcn(seed + i))
        rows.append(check_lcn_own_loss(seed + i))
    rows.extend(check_hvp_quadratic())
    inst = tiny_hypergrad_instance(seed)
    res = hypergrad_vs_oracle(inst, "identity")
    ok = res["cosine"] >= 0.99 and res["max_rel_err"] <= 1e-2
    rows.append(
        CheckResult(
            "hypergradient-identity",
            res["coords"],
            res["max_rel_err"] if ok else float("inf"),
            1e-2,
            f"cosine {res['cosine']:.6f}",
        )
    )
    fd = hypergrad_vs_oracle(inst, "fd")
    # the fd-mode correction is a truncated recursion, so it is reported without a gate
    rows.append(CheckResult("hypergradient-fd (report)", fd["coords"], 0.0, 0.0, f"cosine {fd['cosine']:.6f} norm ratio {fd['norm_ratio']:.3f}"))
    return rows


def format_table(rows: list[CheckResult]) -> str:
    lines = [f"{'check':34s} {'params':>7s} {'error':>10s} {'tol':>8s}  status  detail"]
    for r in rows:
        lines.append(f"{r.name:34s} {r.size:7d} {r.error:10.2e} {r.tol:8.0e}  {'PASS' if r.passed else 'FAIL':6s}  {r.detail}")
    return "\n".join(lines)
