"""WPFS classifier: the first-layer weights come from a weight predictor
network (WPN) scaled column-wise by a sparsity network (SPN), both fed the
frozen feature embeddings.  The plain MLP baseline lives here too."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .embeddings import EmbeddingMatrix
from .network import EVAL, MlpConfig, Mode, init_mlp, mlp_forward, weighted_cross_entropy
from .numerics import ParameterStore, Var, make_rng

DEFAULT_THRESHOLD = 0.95
LAMBDA_GRID = (0.0, 3e-6, 3e-5, 3e-4, 3e-3, 1e-2)


@dataclass
class ModelConfig:
    n_features: int
    n_classes: int
    hidden: tuple = (100, 100, 10)
    # hidden widths of WPN/SPN; each adds an output head, four linear layers in total
    aux_hidden: tuple = (100, 100, 100)
    dropout: float = 0.2
    batch_norm: bool = True
    use_wpn: bool = True
    use_spn: bool = True
    # compute dtype inside WPN/SPN, which run over all D features every step
    aux_precision: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.aux_hidden = tuple(int(h) for h in self.aux_hidden)

    @property
    def first_width(self) -> int:
        return self.hidden[0]

    def classifier(self) -> MlpConfig:
        return MlpConfig(self.n_features, self.hidden, self.n_classes, self.batch_norm,
                         self.dropout, out_activation="softmax_rows", prefix="clf")

    def wpn(self, emb_dim: int) -> MlpConfig:
        return MlpConfig(emb_dim, self.aux_hidden, self.first_width, self.batch_norm,
                         self.dropout, out_activation="tanh", prefix="wpn", precision=self.aux_precision)

    def spn(self, emb_dim: int) -> MlpConfig:
        return MlpConfig(emb_dim, self.aux_hidden, 1, self.batch_norm,
                         self.dropout, out_activation="sigmoid", prefix="spn", precision=self.aux_precision)


class MlpClassifier:
    """Plain feed-forward baseline with a directly learned first layer."""

    kind = "mlp"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.clf = cfg.classifier()
        self.store = ParameterStore()
        init_mlp(self.clf, self.store, make_rng(seed, "init"))

    def forward(self, X, mode: Mode, rng=None) -> tuple[Var, Var | None]:
        return mlp_forward(self.clf, self.store, X, mode, rng), None


class WpfsModel:
    """Classifier whose first weight matrix is ``W_wpn diag(s)``.

    ``W_wpn`` (K x D) stacks the WPN outputs for the D embedding rows and
    ``s`` holds the SPN outputs.  With ``use_wpn`` off a directly learned
    K x D matrix takes the place of ``W_wpn``; with ``use_spn`` off ``s`` is
    all ones and the multiplication is skipped.
    """

    kind = "wpfs"

    def __init__(self, cfg: ModelConfig, embedding: EmbeddingMatrix | None, seed: int = 0):
        self.cfg = cfg
        self.clf = cfg.classifier()
        self.store = ParameterStore()
        needs_embedding = cfg.use_wpn or cfg.use_spn
        if needs_embedding:
            if embedding is None:
                raise ValueError("WPN/SPN need a feature embedding")
            if embedding.n_features != cfg.n_features:
                raise nx.ShapeError(
                    f"embedding has {embedding.n_features} rows for {cfg.n_features} features")
            nx.as_matrix(embedding.E, "embedding")
        self.embedding = embedding
        init_mlp(self.clf, self.store, make_rng(seed, "init"), skip_first_weight=cfg.use_wpn)
        emb_dim = embedding.size if embedding is not None else 0
        self.wpn = cfg.wpn(emb_dim) if cfg.use_wpn else None
        self.spn = cfg.spn(emb_dim) if cfg.use_spn else None
        if self.wpn is not None:
            init_mlp(self.wpn, self.store, make_rng(seed, "init_wpn"))
        if self.spn is not None:
            init_mlp(self.spn, self.store, make_rng(seed, "init_spn"))

    def _aux(self, cfg, mode: Mode, rng) -> Var:
        out = mlp_forward(cfg, self.store, self.embedding.E, mode, rng)
        return nx.transpose(nx.cast(out, np.float64))

    def first_layer(self, mode: Mode, rng=None) -> tuple[Var, Var | None]:
        """Return ``(W1, s)``; ``s`` is a 1 x D Var, or None when the SPN is off."""
        if self.wpn is not None:
            w = self._aux(self.wpn, mode, rng)
        else:
            w = self.store.var(self.clf.weight_name(0))
        if self.spn is None:
            return w, None
        s = self._aux(self.spn, mode, rng)
        return nx.mul(w, s), s

    def forward(self, X, mode: Mode, rng=None) -> tuple[Var, Var | None]:
        W1, s = self.first_layer(mode, rng)
        return mlp_forward(self.clf, self.store, X, mode, rng, first_weight=W1), s

    def wpn_matrix(self, mode: Mode = EVAL, rng=None) -> np.ndarray:
        if self.wpn is None:
            return self.store[self.clf.weight_name(0)].copy()
        return self._aux(self.wpn, mode, rng).value.copy()


def assemble_first_layer(model: WpfsModel, mode: Mode = EVAL, rng=None) -> tuple[np.ndarray, np.ndarray]:
    W1, s = model.first_layer(mode, rng)
    s_vec = np.ones(model.cfg.n_features) if s is None else s.value.ravel().copy()
    return W1.value, s_vec


def wpfs_forward(model, X, mode: Mode = EVAL, rng=None) -> np.ndarray:
    return model.forward(X, mode, rng)[0].value


def total_loss(probs, y, weights, s: Var | None, lam: float, n_features: int | None = None) -> Var:
    """Weighted cross-entropy plus ``lam * sum(s)``.

    ``s=None`` stands for an all-ones mask; the penalty is then the constant
    ``lam * n_features``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ce = weighted_cross_entropy(probs, y, weights)
    if s is None:
        return nx.add_scalar(ce, lam * (n_features or 0))
    return nx.add(ce, nx.scale(nx.total(s), lam))


@dataclass
class ImportanceVector:
    scores: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    available: bool = True

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.scores > self.threshold)

    @property
    def selected_fraction(self) -> float:
        return len(self.selected) / len(self.scores) if len(self.scores) else 0.0

    def top(self, k: int) -> np.ndarray:
        # stable: ties keep the lower index first
        return np.argsort(-self.scores, kind="stable")[:k]


def feature_importance(model, threshold: float = DEFAULT_THRESHOLD) -> ImportanceVector:
    """SPN scores over the frozen embeddings, computed in eval mode."""
    if getattr(model, "spn", None) is None:
        return ImportanceVector(np.ones(model.cfg.n_features), threshold, available=False)
    s = model._aux(model.spn, EVAL, None).value.ravel().copy()
    return ImportanceVector(s, threshold)


def parameter_counts(model) -> dict:
    """Learnable parameters of ``model`` against the same classifier with a
    directly learned K x D first layer."""
    K, D = model.cfg.first_width, model.cfg.n_features
    direct_first = K * D
    clf_params = model.store.num_params("clf.")
    if model.kind == "wpfs" and model.cfg.use_wpn:
        direct_total = clf_params + direct_first
    else:
        direct_total = clf_params
    total = model.store.num_params()
    return {
        "direct_first_layer": direct_first,
        "wpfs_total": total,
        "direct_total": direct_total,
        "reduction": 1.0 - total / direct_total,
        "first_layer_share": direct_first / direct_total,
    }


def lambda_for_ratio(ce: float, s_sum: float, ratios=(0.05, 0.1, 0.2, 0.5, 1.0)) -> dict:
    """Lambdas for which ``lam * s_sum / ce`` equals each target ratio."""
    if s_sum <= 0:
        raise ValueError("sum of scores must be positive")
    return {float(r): float(r * ce / s_sum) for r in ratios}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MAGIC = b"WPFS-MODEL\n"
FORMAT_VERSION = 1


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def save_model(model, path, feature_names=None, extra: dict | None = None) -> None:
    """Write ``model`` as: magic line, one JSON header line, then the
    little-endian float64 blocks listed in the header, in order."""
    cfg = asdict(model.cfg)
    blocks = [("param", k, v) for k, v in model.store.values.items()]
    blocks += [("buffer", k, v) for k, v in model.store.buffers.items()]
    emb = getattr(model, "embedding", None)
    if emb is not None:
        blocks.append(("embedding", emb.method, emb.E))
    header = {
        "format": "wpfs-model",
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "config": cfg,
        "config_digest": config_digest(cfg),
        "feature_names": list(feature_names) if feature_names is not None else None,
        "blocks": [{"kind": k, "name": n, "shape": list(v.shape)} for k, n, v in blocks],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, _, v in blocks:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, header)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a WPFS model file")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('version')}")
    cfg_dict = header["config"]
    if config_digest(cfg_dict) != header["config_digest"]:
        raise ValueError(f"{path}: config digest mismatch")
    offset = end + 1
    arrays = []
    for b in header["blocks"]:
        n = int(np.prod(b["shape"])) if b["shape"] else 1
        nbytes = 8 * n
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated at block {b['name']}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").astype(np.float64)
        arrays.append((b, arr.reshape(b["shape"])))
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    cfg = ModelConfig(**cfg_dict)
    emb = next((EmbeddingMatrix(b["name"], a) for b, a in arrays if b["kind"] == "embedding"), None)
    if header["kind"] == "mlp":
        model = MlpClassifier(cfg)
    else:
        model = WpfsModel(cfg, emb)
    for b, a in arrays:
        if b["kind"] == "param":
            model.store.values[b["name"]][...] = a
        elif b["kind"] == "buffer":
            model.store.buffers[b["name"]][...] = a
    return model, header
