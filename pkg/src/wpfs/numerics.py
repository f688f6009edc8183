"""Dense float64 matrices, a tape-based reverse-mode gradient engine, and a
finite-difference gradient checker.

Matrices are plain 2-D ``numpy.float64`` arrays.  Differentiable values are
wrapped in :class:`Var`; every primitive executed while a :class:`Tape` is
active is appended to it, and :func:`backward` replays the tape in reverse to
fill the gradient slots of a :class:`ParameterStore`.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Iterable

import numpy as np

LEAKY_SLOPE = 0.01
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate external input and return it as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

_STREAMS = {
    "init": 1,
    "init_wpn": 2,
    "init_spn": 3,
    "dropout": 4,
    "shuffle": 5,
    "embedding": 6,
    "folds": 7,
    "synth": 8,
    "check": 9,
}


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``stream`` selects an independent child.

    PCG64 and SeedSequence are specified bit-for-bit by numpy, so a given
    (seed, stream) pair yields the same draws on every platform.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    if stream is None:
        return np.random.Generator(np.random.PCG64(seed))
    if stream not in _STREAMS:
        raise ValueError(f"unknown stream {stream!r}; expected one of {sorted(_STREAMS)}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAMS[stream]])))


# ---------------------------------------------------------------------------
# tape and variables
# ---------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitives executed while the tape is active.

    Use as a context manager.  A tape can be consumed by exactly one
    :func:`backward` call.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Var:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "slot")

    def __init__(self, value, requires_grad: bool = False, slot=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.slot = slot

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def record(value, parents: tuple, backward_fn) -> Var:
    out = Var(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named parameter matrices with same-shape gradient accumulators.

    ``buffers`` hold non-learnable state (batch-norm running statistics) that
    travels with the parameters in snapshots and on disk.
    """

    def __init__(self):
        self.values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        v = np.array(value, dtype=np.float64)
        self.values[name] = v
        self.grads[name] = np.zeros_like(v)

    def add_buffer(self, name: str, value) -> None:
        self.buffers[name] = np.array(value, dtype=np.float64)

    def var(self, name: str) -> Var:
        return Var(self.values[name], requires_grad=True, slot=(self, name))

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name):
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.values.items() if k.startswith(prefix)))

    def snapshot(self) -> dict:
        return {
            "values": {k: v.copy() for k, v in self.values.items()},
            "buffers": {k: v.copy() for k, v in self.buffers.items()},
        }

    def restore(self, snap: dict) -> None:
        for k, v in snap["values"].items():
            self.values[k][...] = v
        for k, v in snap["buffers"].items():
            self.buffers[k][...] = v


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Var, store: ParameterStore | None = None) -> None:
    """Fill ``store.grads`` with d(loss)/d(param) by replaying ``tape``."""
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward pass")
    if loss.value.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.value.shape}")
    tape.consumed = True
    if store is not None:
        store.zero_grad()
    if not loss.requires_grad:
        return
    if not any(n is loss for n in reversed(tape.nodes)):
        raise UsageError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.slot is not None:
                st, name = parent.slot
                st.grads[name] += pg
            elif parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
        node.grad = None
        node.parents = ()
        node.backward_fn = None
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {A.shape} x {B.shape}")
    ga, gb = a.requires_grad, b.requires_grad
    return record(A @ B, (a, b), lambda g: (g @ B.T if ga else None, A.T @ g if gb else None))


def linear(x, w, b=None) -> Var:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    x, w = _wrap(x), _wrap(w)
    X, W = x.value, w.value
    if X.shape[1] != W.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {X.shape}, weight {W.shape}")
    out = X @ W.T
    gx = x.requires_grad
    if b is None:
        return record(out, (x, w), lambda g: (g @ W if gx else None, g.T @ X))
    b = _wrap(b)
    out += b.value
    return record(out, (x, w, b),
                  lambda g: (g @ W if gx else None, g.T @ X, g.sum(axis=0, keepdims=True)))


def cast(a, dtype) -> Var:
    """Change the value's dtype; gradients flow back in the source dtype."""
    a = _wrap(a)
    src = a.value.dtype
    if src == np.dtype(dtype):
        return a
    return record(a.value.astype(dtype), (a,), lambda g: (g.astype(src),))


def transpose(a) -> Var:
    a = _wrap(a)
    return record(a.value.T, (a,), lambda g: (g.T,))


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    A, B = a.value, b.value
    ga, gb = a.requires_grad, b.requires_grad
    return record(
        A * B,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape) if ga else None,
                   _unbroadcast(g * A, B.shape) if gb else None),
    )


def scale(a, c: float) -> Var:
    a = _wrap(a)
    return record(a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Var:
    a = _wrap(a)
    return record(a.value + c, (a,), lambda g: (g,))


def total(a) -> Var:
    """Sum of all entries, as a 1x1 matrix."""
    a = _wrap(a)
    shape = a.value.shape
    return record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g.item()),))


def square_sum(a) -> Var:
    a = _wrap(a)
    A = a.value
    return record(np.array([[np.sum(A * A)]]), (a,), lambda g: (2.0 * g.item() * A,))


def log_clamped(a, floor: float = LOG_CLAMP) -> Var:
    a = _wrap(a)
    A = a.value
    live = A > floor
    out = np.log(np.maximum(A, floor))
    return record(out, (a,), lambda g: (np.where(live, g / np.where(live, A, 1.0), 0.0),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Var:
    a = _wrap(a)
    x = a.value
    # np.where on float arrays is several times slower than these ufuncs
    out = np.maximum(x, slope * x) if slope <= 1.0 else np.minimum(x, slope * x)
    factor = (x > 0).astype(x.dtype)
    factor *= 1.0 - slope
    factor += slope
    return record(out, (a,), lambda g: (g * factor,))


def tanh(a) -> Var:
    a = _wrap(a)
    t = np.tanh(a.value)
    return record(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a) -> Var:
    a = _wrap(a)
    x = a.value
    # split branches keep exp() from overflowing
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax_rows(a) -> Var:
    a = _wrap(a)
    x = a.value
    if x.shape[1] < 1:
        raise ShapeError("softmax needs at least one column")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return record(p, (a,), bw)


_ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
}


def activation(kind: str, x) -> Var:
    if kind == "identity":
        return _wrap(x)
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def batch_norm_train(x, gamma, beta, eps: float):
    """Normalise each column with batch statistics.

    Returns ``(out, batch_mean, batch_var)``; the variance is the biased one
    used for normalisation.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    X, G = x.value, gamma.value
    n = X.shape[0]
    mu = X.mean(axis=0, keepdims=True)
    xc = X - mu
    var = np.mean(xc * xc, axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * G + beta.value

    def bw(g):
        gxhat = g * G
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0, keepdims=True)
                        - xhat * np.sum(gxhat * xhat, axis=0, keepdims=True))
        return gx, np.sum(g * xhat, axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return record(out, (x, gamma, beta), bw), mu, var


def batch_norm_eval(x, gamma, beta, mean, var, eps: float) -> Var:
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    dt = x.value.dtype
    mean, var = mean.astype(dt, copy=False), var.astype(dt, copy=False)
    xhat = (x.value - mean) / np.sqrt(var + eps)
    G = gamma.value
    out = xhat * G + beta.value
    return record(
        out,
        (x, gamma, beta),
        lambda g: (g * G / np.sqrt(var + eps), np.sum(g * xhat, axis=0, keepdims=True),
                   g.sum(axis=0, keepdims=True)),
    )


def bn_dropout_leaky_train(x, gamma, beta, uniforms, p: float, eps: float,
                           slope: float = LEAKY_SLOPE):
    """Fused train-mode ``leaky_relu(dropout(batch_norm(x)))``.

    Entry (i, j) survives dropout iff ``uniforms[i, j] >= p`` and is then
    scaled by 1/(1-p).  Returns ``(out, batch_mean, batch_var)``.
    """
    from . import _kernels

    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    X = np.ascontiguousarray(x.value)
    G = gamma.value.ravel()
    if p == 0.0:
        uniforms = np.empty((0, 0))
    out, xhat, factor, mu, var, inv = _kernels.bn_drop_lrelu_fwd(
        X, G, beta.value.ravel(), uniforms, float(p), eps, slope)

    def bw(g):
        gx, gg, gb = _kernels.bn_drop_lrelu_bwd(np.ascontiguousarray(g), xhat, factor, G, inv)
        return gx, gg.reshape(1, -1), gb.reshape(1, -1)

    return record(out, (x, gamma, beta), bw), mu.reshape(1, -1), var.reshape(1, -1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _value(f, store) -> float:
    out = f(store)
    return float(out.value.item() if isinstance(out, Var) else np.asarray(out).item())


def gradient_check(
    f: Callable[[ParameterStore], Var],
    store: ParameterStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop gradients of ``f`` against central differences.

    ``f`` maps the store to a scalar Var and must be deterministic (fix the
    dropout seed inside it).  Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.  With
    ``max_coords`` set, at most that many coordinates per parameter are
    sampled with ``rng``; otherwise every coordinate is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if _value(f, store) != _value(f, store):
        raise UsageError("f is not deterministic: two evaluations differ")
    with Tape() as tape:
        loss = f(store)
    backward(tape, loss, store)
    analytic = {k: g.copy() for k, g in store.grads.items()}
    if rng is None:
        rng = make_rng(0, "check")

    worst = 0.0
    for name in names if names is not None else store.names():
        p = store.values[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _value(f, store)
            flat[i] = orig - eps
            fm = _value(f, store)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = ga[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
