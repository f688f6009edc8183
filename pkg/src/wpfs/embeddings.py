"""Unsupervised per-feature embeddings computed from a training matrix.

Every function here takes only the training split; callers never pass
validation or test rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix, make_rng

METHODS = ("nmf", "svd", "dot_histogram", "feature_values")
PREPROCESSING = ("minmax", "zscore", "raw")
NMF_FLOOR = 1e-12


@dataclass(frozen=True)
class EmbeddingMatrix:
    method: str
    E: np.ndarray  # (D, M), row j embeds feature j

    @property
    def size(self) -> int:
        return self.E.shape[1]

    @property
    def n_features(self) -> int:
        return self.E.shape[0]


@dataclass(frozen=True)
class NmfFactors:
    W: np.ndarray
    H: np.ndarray
    errors: np.ndarray  # Frobenius error after each iteration

    @property
    def final_frobenius_error(self) -> float:
        return float(self.errors[-1])


def minmax_scale(X) -> np.ndarray:
    X = as_matrix(X)
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    out = np.zeros_like(X)
    live = span > 0
    out[:, live] = (X[:, live] - lo[live]) / span[live]
    return out


def zscore_scale(X) -> np.ndarray:
    X = as_matrix(X)
    sd = X.std(axis=0)
    out = np.zeros_like(X)
    live = sd > 0
    out[:, live] = (X[:, live] - X[:, live].mean(axis=0)) / sd[live]
    return out


def preprocess(X, kind: str = "minmax") -> np.ndarray:
    if kind == "minmax":
        return minmax_scale(X)
    if kind == "zscore":
        return zscore_scale(X)
    if kind == "raw":
        return as_matrix(X)
    raise ValueError(f"unknown preprocessing {kind!r}; expected one of {PREPROCESSING}")


def nmf_fit(X, k: int, iters: int = 1000, rng: np.random.Generator | None = None) -> NmfFactors:
    """Lee-Seung multiplicative updates for min ||X - WH||_F with W, H >= 0.

    Factors start uniform on (0, 1] scaled by sqrt(mean(X) / k); entries are
    floored at 1e-12 so that no coordinate gets stuck at zero.
    """
    X = as_matrix(X)
    if np.any(X < 0):
        raise ValueError("NMF requires a nonnegative matrix")
    if k < 1:
        raise ValueError("k must be at least 1")
    if rng is None:
        rng = make_rng(0, "embedding")
    n, d = X.shape
    scale = np.sqrt(max(X.mean(), NMF_FLOOR) / k)
    W = (1.0 - rng.random((n, k))) * scale
    H = (1.0 - rng.random((k, d))) * scale
    errors = np.empty(iters)
    for it in range(iters):
        WtX = W.T @ X
        H *= WtX / np.maximum(W.T @ W @ H, NMF_FLOOR)
        np.maximum(H, NMF_FLOOR, out=H)
        XHt = X @ H.T
        W *= XHt / np.maximum(W @ (H @ H.T), NMF_FLOOR)
        np.maximum(W, NMF_FLOOR, out=W)
        errors[it] = np.linalg.norm(X - W @ H)
    return NmfFactors(W=W, H=H, errors=errors)


def nmf_embed(X01, k: int, iters: int = 1000, rng: np.random.Generator | None = None) -> EmbeddingMatrix:
    f = nmf_fit(X01, k, iters, rng)
    return EmbeddingMatrix("nmf", f.H.T.copy())


def _fix_signs(U: np.ndarray, Vt: np.ndarray):
    # largest-magnitude entry of every right singular vector made positive
    idx = np.argmax(np.abs(Vt), axis=1)
    signs = np.sign(Vt[np.arange(Vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def truncated_svd(X, k: int):
    X = as_matrix(X)
    if not 1 <= k <= min(X.shape):
        raise ValueError(f"k={k} out of range [1, {min(X.shape)}]")
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    U, Vt = _fix_signs(U[:, :k], Vt[:k])
    return U, S[:k], Vt


def svd_embed(X01, k: int) -> EmbeddingMatrix:
    """Feature j is embedded by column j of diag(S_k) V_k^T."""
    _, S, Vt = truncated_svd(X01, k)
    return EmbeddingMatrix("svd", (S[:, None] * Vt).T.copy())


def dot_histogram_embed(X, bins: int) -> EmbeddingMatrix:
    """Normalised histogram heights times bin centres, per feature.

    Bins split [min_j, max_j] of each column into equal widths; a constant
    column embeds to zeros.
    """
    X = as_matrix(X)
    if bins < 1:
        raise ValueError("bins must be at least 1")
    n, d = X.shape
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    span = hi - lo
    E = np.zeros((d, bins))
    live = span > 0
    if not np.any(live):
        return EmbeddingMatrix("dot_histogram", E)
    Xl, lo_l, span_l = X[:, live], lo[live], span[live]
    idx = np.floor((Xl - lo_l) / span_l * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    m = Xl.shape[1]
    flat = (idx + bins * np.arange(m)[None, :]).ravel()
    counts = np.bincount(flat, minlength=bins * m).reshape(m, bins).T
    heights = counts / n
    centres = lo_l[None, :] + (np.arange(bins)[:, None] + 0.5) / bins * span_l[None, :]
    E[live] = (heights * centres).T
    return EmbeddingMatrix("dot_histogram", E)


def feature_values_embed(X01) -> EmbeddingMatrix:
    return EmbeddingMatrix("feature_values", as_matrix(X01).T.copy())


def compute_embedding(X_train, method: str = "nmf", size: int = 50, preprocessing: str = "minmax",
                      nmf_iters: int = 1000, rng: np.random.Generator | None = None) -> EmbeddingMatrix:
    """Preprocess the training matrix and embed every feature with ``method``.

    ``size`` is the rank for nmf/svd and the bin count for dot_histogram; it
    is ignored by feature_values (whose size is the number of training rows).
    """
    if method not in METHODS:
        raise ValueError(f"unknown embedding method {method!r}; expected one of {METHODS}")
    Xp = preprocess(X_train, preprocessing)
    if method == "nmf":
        return nmf_embed(Xp, size, nmf_iters, rng)
    if method == "svd":
        return svd_embed(Xp, size)
    if method == "dot_histogram":
        return dot_histogram_embed(Xp, size)
    return feature_values_embed(Xp)
