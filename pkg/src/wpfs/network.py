"""Feed-forward blocks, weighted cross-entropy, AdamW, clipping and the
linear learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Var

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchTooSmall(Exception):
    """Train-mode batch of one sample hit a batch-norm layer; skip the batch."""


@dataclass(frozen=True)
class Mode:
    train: bool
    update_stats: bool = True


TRAIN = Mode(train=True)
EVAL = Mode(train=False, update_stats=False)
# train-mode graph whose running statistics are left untouched (gradient checks)
FROZEN_TRAIN = Mode(train=True, update_stats=False)


@dataclass
class MlpConfig:
    in_dim: int
    hidden: tuple = (100, 100, 10)
    out_dim: int = 2
    batch_norm: bool = True
    dropout: float = 0.2
    activation: str = "leaky_relu"
    out_activation: str = "softmax_rows"
    prefix: str = "clf"
    # compute dtype of the forward/backward pass; parameters stay float64
    precision: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.in_dim <= 0 or self.out_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"layer widths must be positive: {self.widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    def weight_name(self, i: int) -> str:
        return f"{self.prefix}.l{i}.weight"


def init_mlp(cfg: MlpConfig, store: ParameterStore, rng: np.random.Generator,
             skip_first_weight: bool = False) -> None:
    """Add the layers of ``cfg`` to ``store``.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    With ``skip_first_weight`` the first weight matrix is left out (it is
    supplied at forward time) but its bias is still created.
    """
    w = cfg.widths
    for i in range(len(w) - 1):
        fan_in, fan_out = w[i], w[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        if not (skip_first_weight and i == 0):
            store.add(cfg.weight_name(i), rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        store.add(f"{cfg.prefix}.l{i}.bias", rng.uniform(-bound, bound, size=(1, fan_out)))
        if cfg.batch_norm and i < len(w) - 2:
            store.add(f"{cfg.prefix}.bn{i}.gamma", np.ones((1, fan_out)))
            store.add(f"{cfg.prefix}.bn{i}.beta", np.zeros((1, fan_out)))
            store.add_buffer(f"{cfg.prefix}.bn{i}.running_mean", np.zeros((1, fan_out)))
            store.add_buffer(f"{cfg.prefix}.bn{i}.running_var", np.ones((1, fan_out)))


def _param(store: ParameterStore, name: str, dtype) -> Var:
    return nx.cast(store.var(name), dtype)


def batch_norm(store: ParameterStore, name: str, h: Var, mode: Mode) -> Var:
    dt = h.value.dtype
    gamma, beta = _param(store, f"{name}.gamma", dt), _param(store, f"{name}.beta", dt)
    rm, rv = store.buffers[f"{name}.running_mean"], store.buffers[f"{name}.running_var"]
    if not mode.train:
        return nx.batch_norm_eval(h, gamma, beta, rm, rv, BN_EPS)
    n = h.value.shape[0]
    if n < 2:
        raise BatchTooSmall(f"batch of {n} sample(s) at {name}")
    out, mu, var = nx.batch_norm_train(h, gamma, beta, BN_EPS)
    if mode.update_stats:
        _update_running(store, name, mu, var, n)
    return out


def dropout(h: Var, p: float, mode: Mode, rng: np.random.Generator) -> Var:
    if not mode.train or p == 0.0:
        return h
    keep = ((rng.random(h.value.shape) >= p) * (1.0 / (1.0 - p))).astype(h.value.dtype)
    return nx.mul(h, keep)


def _fused_hidden(store: ParameterStore, name: str, h: Var, p: float, mode: Mode, rng) -> Var:
    n = h.value.shape[0]
    if n < 2:
        raise BatchTooSmall(f"batch of {n} sample(s) at {name}")
    u = rng.random(h.value.shape) if p > 0.0 else None
    dt = h.value.dtype
    out, mu, var = nx.bn_dropout_leaky_train(
        h, _param(store, f"{name}.gamma", dt), _param(store, f"{name}.beta", dt), u, p, BN_EPS)
    if mode.update_stats:
        _update_running(store, name, mu, var, n)
    return out


def _update_running(store: ParameterStore, name: str, mu, var, n: int) -> None:
    rm, rv = store.buffers[f"{name}.running_mean"], store.buffers[f"{name}.running_var"]
    rm *= 1.0 - BN_MOMENTUM
    rm += BN_MOMENTUM * mu
    rv *= 1.0 - BN_MOMENTUM
    rv += BN_MOMENTUM * var * (n / (n - 1))


def mlp_forward(cfg: MlpConfig, store: ParameterStore, x, mode: Mode,
                rng: np.random.Generator | None = None, first_weight: Var | None = None,
                fused: bool = True) -> Var:
    """Hidden layers run linear -> batch-norm -> dropout -> activation; the
    last layer applies ``cfg.out_activation``.

    In train mode the batch-norm/dropout/LeakyReLU triple runs as one fused
    primitive unless ``fused=False``; both paths draw the same dropout masks.
    """
    dt = np.dtype(cfg.precision)
    h = x if isinstance(x, Var) else Var(nx.as_matrix(x, "input"))
    h = nx.cast(h, dt)
    if h.value.shape[1] != cfg.in_dim:
        raise nx.ShapeError(f"input width {h.value.shape[1]} != expected {cfg.in_dim}")
    n_layers = len(cfg.widths) - 1
    use_fused = fused and mode.train and cfg.batch_norm and cfg.activation == "leaky_relu"
    for i in range(n_layers):
        w = first_weight if (i == 0 and first_weight is not None) else store.var(cfg.weight_name(i))
        h = nx.linear(h, nx.cast(w, dt), _param(store, f"{cfg.prefix}.l{i}.bias", dt))
        if i == n_layers - 1:
            break
        if use_fused:
            h = _fused_hidden(store, f"{cfg.prefix}.bn{i}", h, cfg.dropout, mode, rng)
            continue
        if cfg.batch_norm:
            h = batch_norm(store, f"{cfg.prefix}.bn{i}", h, mode)
        h = dropout(h, cfg.dropout, mode, rng)
        h = nx.activation(cfg.activation, h)
    return nx.activation(cfg.out_activation, h)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def class_weights(y, n_classes: int) -> np.ndarray:
    """Balanced weights ``N / (C * n_c)``."""
    y = np.asarray(y, dtype=np.int64)
    counts = np.bincount(y, minlength=n_classes)
    if len(counts) > n_classes:
        raise ValueError(f"label {int(y.max())} out of range for {n_classes} classes")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no samples")
    return len(y) / (n_classes * counts.astype(np.float64))


def weighted_cross_entropy(probs, y, weights) -> Var:
    """Sum_i w[y_i] * -log p[i, y_i] / Sum_i w[y_i], log clamped at 1e-12."""
    probs = probs if isinstance(probs, Var) else Var(nx.as_matrix(probs, "probs"))
    P = probs.value
    y = np.asarray(y, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    b, C = P.shape
    if y.shape != (b,):
        raise nx.ShapeError(f"labels shape {y.shape} does not match probs {P.shape}")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    if not np.allclose(P.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise ValueError("probability rows must sum to 1")
    rows = np.arange(b)
    wi = weights[y]
    denom = wi.sum()
    p = P[rows, y]
    live = p > nx.LOG_CLAMP
    loss = float(np.sum(wi * -np.log(np.maximum(p, nx.LOG_CLAMP))) / denom)

    def bw(g):
        gp = np.zeros_like(P)
        gp[rows, y] = np.where(live, -wi / (denom * np.where(live, p, 1.0)), 0.0) * g.item()
        return (gp,)

    return nx.record(np.array([[loss]]), (probs,), bw)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    lr: float = 3e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, store: ParameterStore, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, theta in store.values.items():
            g = store.grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            theta -= lr * update + lr * self.weight_decay * theta


def adamw_step(state: AdamW, store: ParameterStore, lr: float) -> None:
    state.step(store, lr)


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in store.grads.values()))
    # slack keeps a second clip from rescaling by a rounding-level factor
    if norm <= max_norm * (1.0 + 1e-12):
        return 1.0
    scale = max_norm / norm
    for g in store.grads.values():
        g *= scale
    return scale


@dataclass(frozen=True)
class ScheduleConfig:
    lr_start: float = 3e-3
    lr_end: float = 3e-4
    decay_epochs: int = 500

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")


def lr_at(schedule: ScheduleConfig, epoch: int) -> float:
    if epoch >= schedule.decay_epochs:
        return schedule.lr_end
    frac = epoch / schedule.decay_epochs
    return schedule.lr_start + (schedule.lr_end - schedule.lr_start) * frac
