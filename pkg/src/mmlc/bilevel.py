"""Multi-task bi-level training of the label corrector with one-step unrolled hypergradients.

For each task the main model takes ``K`` SGD steps on the corrected-label loss
``L'(alpha, w)``; only the last step ``w_K = w_{K-1} - eta * grad_w L'(alpha, w_{K-1})``
is differentiated. With ``g' = grad L_clean(w_K)`` the hypergradient of the clean
loss is

    d L_clean(w_K) / d alpha  ~=  -eta * d/d alpha [ grad_w L'(alpha, w_{K-1}) . g' ]

and the mixed second derivative is taken by a central difference of
``grad_alpha L'`` along ``g'``. In ``fd`` mode a one-step correction with the
finite-difference Hessian-vector product ``H g'`` is added (see
:func:`task_meta_gradient`).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .nn import (
    EPS_NUM,
    Classifier,
    LabelCorrector,
    ParamVector,
    one_hot,
    soft_cross_entropy,
)

log = logging.getLogger(__name__)

MAX_ORACLE_COORDS = 512


@dataclass
class TaskSpec:
    """One prediction horizon. Noisy-domain hard labels are deliberately absent."""

    task_id: int
    horizon: int
    noisy_x: np.ndarray  # (M, dx) history images X'
    noisy_y: np.ndarray  # (M, dy) horizon images Y'
    clean_x: np.ndarray  # (m, dx)
    clean_labels: np.ndarray  # (m,) ints in {0, 1, 2}

    def __post_init__(self):
        self.noisy_x = np.asarray(self.noisy_x, dtype=np.float64)
        self.noisy_y = np.asarray(self.noisy_y, dtype=np.float64)
        self.clean_x = np.asarray(self.clean_x, dtype=np.float64)
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        if self.horizon < 1:
            raise ConfigError(f"task horizon must be >= 1, got {self.horizon}")
        if len(self.noisy_x) == 0 or len(self.clean_x) == 0:
            raise ConfigError(f"task {self.task_id}: noisy and clean sets must be non-empty")
        if len(self.noisy_x) != len(self.noisy_y):
            raise ConfigError(f"task {self.task_id}: X' and Y' sizes differ")
        if len(self.clean_x) != len(self.clean_labels):
            raise ConfigError(f"task {self.task_id}: clean images and labels sizes differ")
        if self.noisy_x.shape[1:] != self.clean_x.shape[1:]:
            raise ConfigError(f"task {self.task_id}: noisy and clean images differ in size")


@dataclass
class TrainConfig:
    K: int = 1
    eta: float = 3e-5
    mu: float = 3e-4
    fd_epsilon_scale: float = 0.01
    noisy_batch: int = 32
    clean_batch: int = 32
    meta_steps: int = 100
    hessian_mode: str = "identity"
    seed: int = 0
    init_scale: float = 0.05
    lcn_init_scale: float = 0.05
    reset_inner_each_meta_step: bool = False
    meta_grad_clip: float | None = None  # max norm of the summed meta-gradient; None = plain update

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not (self.eta > 0 and self.mu > 0 and self.fd_epsilon_scale > 0):
            raise ConfigError("eta, mu and fd_epsilon_scale must be positive")
        if self.hessian_mode not in ("identity", "fd"):
            raise ConfigError(f"hessian_mode must be 'identity' or 'fd', got {self.hessian_mode!r}")
        if self.noisy_batch < 1 or self.clean_batch < 1 or self.meta_steps < 0:
            raise ConfigError("batch sizes must be >= 1 and meta_steps >= 0")
        if self.meta_grad_clip is not None and not self.meta_grad_clip > 0:
            raise ConfigError("meta_grad_clip must be positive or null")

    def to_dict(self) -> dict:
        return asdict(self)


class NoisyObjective:
    """``L'(alpha, w)``: mean cross-entropy of f_w(X') against g_alpha(X', Y') on one fixed batch."""

    def __init__(self, net: Classifier, lcn: LabelCorrector, Xp: np.ndarray, Yp: np.ndarray):
        self.net, self.lcn, self.Xp, self.Yp = net, lcn, Xp, Yp

    def loss(self, alpha, w) -> float:
        return soft_cross_entropy(self.lcn.predict(alpha, self.Xp, self.Yp), self.net.predict_proba(w, self.Xp))

    def grad_w(self, alpha, w) -> np.ndarray:
        return self.net.gradient(w, self.Xp, self.lcn.predict(alpha, self.Xp, self.Yp))

    def loss_and_grad_w(self, alpha, w) -> tuple[float, np.ndarray]:
        targets = self.lcn.predict(alpha, self.Xp, self.Yp)
        probs, cache = self.net.forward(w, self.Xp)
        loss = float(np.mean(-np.sum(targets * np.log(probs + EPS_NUM), axis=1)))
        dprobs = -targets / (probs + EPS_NUM) / probs.shape[0]
        return loss, self.net.backward(w, cache, probs, dprobs)

    def grad_alpha(self, alpha, w) -> np.ndarray:
        pred = self.net.predict_proba(w, self.Xp)
        yc, cache = self.lcn.forward(alpha, self.Xp, self.Yp)
        return self.lcn.backward(alpha, cache, yc, -np.log(pred + EPS_NUM) / pred.shape[0])


class CleanObjective:
    """``L_clean(w)`` on a fixed clean batch with hard labels."""

    def __init__(self, net: Classifier, X: np.ndarray, labels):
        self.net, self.X, self.targets = net, X, one_hot(labels)

    def loss(self, w) -> float:
        return self.net.loss(w, self.X, self.targets)

    def grad(self, w) -> np.ndarray:
        return self.net.gradient(w, self.X, self.targets)


@dataclass
class InnerState:
    w_K: np.ndarray
    w_prev: np.ndarray
    last_batch: np.ndarray  # indices into the task's noisy set used at step K
    inner_loss: float


@dataclass
class TrainedState:
    alpha: ParamVector
    ws: list[ParamVector]
    history: list[dict] = field(default_factory=list)


def _sample(rng: np.random.Generator, size: int, batch: int) -> np.ndarray:
    if batch >= size:
        return np.arange(size)
    return rng.choice(size, size=batch, replace=False)


def noisy_objective(task: TaskSpec, net: Classifier, lcn: LabelCorrector, idx: np.ndarray) -> NoisyObjective:
    return NoisyObjective(net, lcn, task.noisy_x[idx], task.noisy_y[idx])


def inner_loop(
    task: TaskSpec,
    net: Classifier,
    lcn: LabelCorrector,
    alpha,
    w0,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> InnerState:
    """K steps of SGD on the corrected-label loss; the last batch is recorded for replay."""
    alpha = alpha.values if isinstance(alpha, ParamVector) else alpha
    w = np.array(w0.values if isinstance(w0, ParamVector) else w0, dtype=np.float64)
    w_prev, idx, loss = w, None, float("nan")
    for _ in range(cfg.K):
        idx = _sample(rng, len(task.noisy_x), cfg.noisy_batch)
        loss, g = noisy_objective(task, net, lcn, idx).loss_and_grad_w(alpha, w)
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            raise NumericError(f"task {task.task_id}: non-finite inner loss (eta={cfg.eta} too large?)")
        w_prev, w = w, w - cfg.eta * g
    return InnerState(w_K=w, w_prev=w_prev, last_batch=idx, inner_loss=loss)


def replay_last_step(state: InnerState, task: TaskSpec, net: Classifier, lcn: LabelCorrector, alpha, eta: float):
    obj = noisy_objective(task, net, lcn, state.last_batch)
    return state.w_prev - eta * obj.grad_w(alpha, state.w_prev)


def _fd_step(v: np.ndarray, scale: float) -> float | None:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        log.warning("finite-difference direction is the zero vector; returning zeros")
        return None
    return scale / norm


def fd_hvp_ww(objective, alpha, w, v, eps_scale: float = 0.01) -> np.ndarray:
    """Central-difference Hessian-vector product ``d^2 L'/dw^2 . v``.

    The step is ``eps_scale / ||v||`` so that the perturbation of ``w`` has norm ``eps_scale``.
    """
    v = np.asarray(v, dtype=np.float64)
    eps = _fd_step(v, eps_scale)
    if eps is None:
        return np.zeros_like(v)
    w = np.asarray(w, dtype=np.float64)
    return (objective.grad_w(alpha, w + eps * v) - objective.grad_w(alpha, w - eps * v)) / (2.0 * eps)


def fd_cross_grad_alpha(objective, alpha, w, v, eps_scale: float = 0.01) -> np.ndarray:
    """Central difference of ``grad_alpha L'(alpha, w + e v)`` at ``e = 0``.

    Equals ``d/d alpha (grad_w L'(alpha, w) . v)``; the caller multiplies by ``-eta``.
    """
    v = np.asarray(v, dtype=np.float64)
    eps = _fd_step(v, eps_scale)
    alpha_size = np.asarray(alpha.values if isinstance(alpha, ParamVector) else alpha).size
    if eps is None:
        return np.zeros(alpha_size)
    w = np.asarray(w, dtype=np.float64)
    return (objective.grad_alpha(alpha, w + eps * v) - objective.grad_alpha(alpha, w - eps * v)) / (2.0 * eps)


def task_meta_gradient(
    noisy: NoisyObjective,
    clean: CleanObjective,
    alpha,
    state: InnerState,
    cfg: TrainConfig,
    task_id: int = 0,
) -> tuple[np.ndarray, dict]:
    """Hypergradient of one task's clean loss at ``w_K`` with respect to ``alpha``.

    ``identity`` mode returns only the unrolled last-step term. ``fd`` mode adds
    ``[g'(I - eta H) g_w / ||g_w||^2] * d_base`` where ``H g'`` is the FD
    Hessian-vector product, ``g_w`` the clean gradient at ``w_{K-1}``, and the
    unknown ``d L_clean(w_{K-1}) / d alpha`` is approximated (depth-1 truncation)
    by the last-step term itself.
    """
    alpha = alpha.values if isinstance(alpha, ParamVector) else alpha
    g_next = clean.grad(state.w_K)
    direct = -cfg.eta * fd_cross_grad_alpha(noisy, alpha, state.w_prev, g_next, cfg.fd_epsilon_scale)
    info = {"clean_loss": clean.loss(state.w_K), "clean_grad_norm": float(np.linalg.norm(g_next))}
    total = direct
    if cfg.hessian_mode == "fd":
        g_prev = clean.grad(state.w_prev)
        denom = float(g_prev @ g_prev)
        if denom > 0.0:
            hv = fd_hvp_ww(noisy, alpha, state.w_prev, g_next, cfg.fd_epsilon_scale)
            coef = float((g_next - cfg.eta * hv) @ g_prev) / denom
            total = direct + coef * direct
            info["correction_coef"] = coef
    if not np.all(np.isfinite(total)):
        raise NumericError(f"task {task_id}: non-finite meta-gradient")
    return total, info


def meta_gradient(rounds: list[tuple[NoisyObjective, CleanObjective, InnerState]], alpha, cfg: TrainConfig) -> np.ndarray:
    """Sum of per-task hypergradients, reduced in task order."""
    alpha = alpha.values if isinstance(alpha, ParamVector) else alpha
    total = np.zeros(np.asarray(alpha).size)
    for i, (noisy, clean, state) in enumerate(rounds):
        total = total + task_meta_gradient(noisy, clean, alpha, state, cfg, task_id=i)[0]
    return total


def clip_norm(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    """Rescale ``g`` onto the ball of radius ``max_norm`` (no-op when ``max_norm`` is None)."""
    if max_norm is None:
        return g
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


def meta_step(alpha, meta_grad, mu: float):
    if isinstance(alpha, ParamVector):
        return alpha.replace(alpha.values - mu * np.asarray(meta_grad))
    return np.asarray(alpha) - mu * np.asarray(meta_grad)


def task_rngs(seed: int, n_tasks: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_tasks)]


def initial_weights(net: Classifier, cfg: TrainConfig, n_tasks: int) -> list[ParamVector]:
    return [net.init_params(cfg.seed * 1000 + 17 + i, cfg.init_scale) for i in range(n_tasks)]


def train_mmlc(
    tasks: list[TaskSpec],
    net: Classifier,
    lcn: LabelCorrector,
    cfg: TrainConfig,
    alpha0: ParamVector | None = None,
    w0: list[ParamVector] | None = None,
    threads: int = 1,
) -> TrainedState:
    """Alternate per-task inner SGD and one meta update of the shared corrector per meta step."""
    if not tasks:
        raise ConfigError("need at least one task")
    alpha = alpha0 if alpha0 is not None else lcn.init_params(cfg.seed * 1000 + 7, cfg.lcn_init_scale)
    inits = w0 if w0 is not None else initial_weights(net, cfg, len(tasks))
    ws = [w.values.copy() for w in inits]
    rngs = task_rngs(cfg.seed, len(tasks))
    history: list[dict] = []

    def run_task(i: int, alpha_values: np.ndarray):
        task = tasks[i]
        start = inits[i].values if cfg.reset_inner_each_meta_step else ws[i]
        state = inner_loop(task, net, lcn, alpha_values, start, cfg, rngs[i])
        cidx = _sample(rngs[i], len(task.clean_x), cfg.clean_batch)
        clean = CleanObjective(net, task.clean_x[cidx], task.clean_labels[cidx])
        noisy = noisy_objective(task, net, lcn, state.last_batch)
        g, info = task_meta_gradient(noisy, clean, alpha_values, state, cfg, task_id=task.task_id)
        return state, g, info

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(cfg.meta_steps):
            a = alpha.values
            if pool is None:
                results = [run_task(i, a) for i in range(len(tasks))]
            else:
                results = list(pool.map(lambda i: run_task(i, a), range(len(tasks))))
            total = np.zeros(a.size)
            rows = []
            for i, (task, (state, g, info)) in enumerate(zip(tasks, results)):
                total = total + g
                ws[i] = state.w_K
                rows.append(
                    {
                        "task_id": task.task_id,
                        "horizon": task.horizon,
                        "inner_loss": state.inner_loss,
                        "clean_loss": info["clean_loss"],
                        "clean_grad_norm": info["clean_grad_norm"],
                        "meta_grad_norm": float(np.linalg.norm(g)),
                    }
                )
            alpha = meta_step(alpha, clip_norm(total, cfg.meta_grad_clip), cfg.mu)
            history.append({"step": step, "tasks": rows, "meta_grad_norm": float(np.linalg.norm(total))})
            if step % 50 == 0:
                log.debug("meta step %d: clean losses %s", step, [round(r["clean_loss"], 4) for r in rows])
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainedState(alpha=alpha, ws=[ParamVector(w, net.layout) for w in ws], history=history)


def bilevel_fd_oracle(
    noisy: NoisyObjective,
    clean: CleanObjective,
    alpha,
    w0,
    eta: float,
    delta: float = 1e-4,
) -> np.ndarray:
    """Brute-force total derivative of ``L_clean(w_1(alpha))`` for a single SGD step.

    Every coordinate of ``alpha`` is perturbed by +/- delta and the inner step is
    rerun from the same ``w0`` on the same batch.
    """
    alpha = np.asarray(alpha.values if isinstance(alpha, ParamVector) else alpha, dtype=np.float64)
    if alpha.size > MAX_ORACLE_COORDS:
        raise ConfigError(f"oracle limited to {MAX_ORACLE_COORDS} coordinates, got {alpha.size}")
    w0 = np.asarray(w0.values if isinstance(w0, ParamVector) else w0, dtype=np.float64)

    def outer(a: np.ndarray) -> float:
        return clean.loss(w0 - eta * noisy.grad_w(a, w0))

    out = np.zeros(alpha.size)
    for j in range(alpha.size):
        e = np.zeros(alpha.size)
        e[j] = delta
        out[j] = (outer(alpha + e) - outer(alpha - e)) / (2.0 * delta)
    return out
