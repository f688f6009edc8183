"""Datasets, stratified repeated cross-validation, the training loop with
early stopping, metrics and aggregation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .embeddings import EmbeddingMatrix, compute_embedding
from .model import (DEFAULT_THRESHOLD, MlpClassifier, ModelConfig, WpfsModel, feature_importance,
                    parameter_counts, total_loss)
from .network import EVAL, TRAIN, AdamW, BatchTooSmall, ScheduleConfig, class_weights, clip_gradients, lr_at
from .numerics import Tape, make_rng

log = logging.getLogger(__name__)

METHODS = ("wpfs", "mlp", "wpfs-nospn", "wpfs-nowpn")


class DataError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, curves: list):
        super().__init__(message)
        self.curves = curves


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    feature_names: list
    informative: np.ndarray | None = None
    class_names: list | None = None

    def __post_init__(self):
        self.X = nx.as_matrix(self.X, "X")
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (self.X.shape[0],):
            raise DataError(f"{len(self.y)} labels for {self.X.shape[0]} rows")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        missing = np.setdiff1d(np.arange(self.n_classes), self.y)
        if missing.size:
            raise DataError(f"class {int(missing[0])} has no samples")
        if len(self.feature_names) != self.X.shape[1]:
            raise DataError(f"{len(self.feature_names)} names for {self.X.shape[1]} features")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        h.update(json.dumps([list(self.feature_names), self.class_names]).encode())
        return h.hexdigest()


def load_csv(path, label_col: str) -> Dataset:
    """Read a header-first CSV; ``label_col`` names the label column.

    Integer labels map to class indices in sorted order, any other labels in
    order of first appearance.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_col not in header:
        raise DataError(f"{path}: label column {label_col!r} not found in header")
    li = header.index(label_col)
    feat_cols = [i for i in range(len(header)) if i != li]
    raw_labels = []
    X = np.empty((len(rows) - 1, len(feat_cols)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        raw_labels.append(row[li].strip())
        for k, c in enumerate(feat_cols):
            try:
                v = float(row[c])
            except ValueError:
                raise DataError(f"{path}: row {r}, column {header[c]!r}: not a number: {row[c]!r}")
            if not np.isfinite(v):
                raise DataError(f"{path}: row {r}, column {header[c]!r}: missing or non-finite value")
            X[r - 2, k] = v
    if not raw_labels:
        raise DataError(f"{path}: no data rows")
    try:
        ints = [int(v) for v in raw_labels]
        names = [str(v) for v in sorted(set(ints))]
        lookup = {str(v): i for i, v in enumerate(sorted(set(ints)))}
        y = np.array([lookup[str(v)] for v in ints])
    except ValueError:
        names = list(dict.fromkeys(raw_labels))
        lookup = {v: i for i, v in enumerate(names)}
        y = np.array([lookup[v] for v in raw_labels])
    return Dataset(X, y, len(names), [header[c] for c in feat_cols], class_names=names)


def write_csv(ds: Dataset, path, label_col: str = "label") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.feature_names, label_col])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


PRESETS = {
    "default": dict(n_samples=150, n_features=2000, n_informative=10, n_classes=2, sigma=1.0),
    "small": dict(n_samples=60, n_features=200, n_informative=5, n_classes=2, sigma=1.0),
}


def synth_dataset(n_samples=150, n_features=2000, n_informative=10, n_classes=2, sigma=1.0,
                  separation=2.0, seed=0) -> Dataset:
    """Gaussian classes that differ only on ``n_informative`` random columns.

    Class means on the informative columns are sign patterns scaled by
    ``separation / 2`` (two classes use opposite patterns), so any two class
    means are at least ``separation`` apart; samples add N(0, sigma^2) noise
    there.  All other columns are N(0, 1) noise.
    """
    if not 0 < n_informative <= n_features:
        raise ValueError("need 0 < n_informative <= n_features")
    if n_classes < 2 or n_samples < 2 * n_classes:
        raise ValueError("need at least two classes and two samples per class")
    if sigma < 0 or separation < 2 * sigma:
        raise ValueError("class means must be separated by at least 2 * sigma")
    if n_classes > 2 ** n_informative:
        raise ValueError("too few informative features for distinct class means")
    rng = make_rng(seed, "synth")
    informative = np.sort(rng.choice(n_features, size=n_informative, replace=False))
    if n_classes == 2:
        pattern = rng.choice([-1.0, 1.0], size=n_informative)
        means = np.stack([pattern, -pattern])
    else:
        patterns = set()
        while len(patterns) < n_classes:
            patterns.add(tuple(rng.choice([-1.0, 1.0], size=n_informative)))
        means = np.array(sorted(patterns))
    means *= separation / 2.0
    y = rng.permutation(np.arange(n_samples) % n_classes)
    X = rng.standard_normal((n_samples, n_features))
    X[:, informative] = means[y] + sigma * rng.standard_normal((n_samples, n_informative))
    names = [f"f{j}" for j in range(n_features)]
    return Dataset(X, y, n_classes, names, informative=informative,
                   class_names=[str(c) for c in range(n_classes)])


# ---------------------------------------------------------------------------
# folds and normalisation
# ---------------------------------------------------------------------------


@dataclass
class Split:
    repeat: int
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class FoldPlan:
    splits: list
    k: int
    repeats: int
    val_fraction: float
    seed: int

    def plan_id(self) -> str:
        h = hashlib.sha256()
        for s in self.splits:
            for part in (s.train, s.val, s.test):
                h.update(np.asarray(part, dtype="<i8").tobytes())
                h.update(b"|")
        return h.hexdigest()[:16]


def stratified_cv(y, k: int = 5, repeats: int = 5, val_fraction: float = 0.1, seed: int = 0) -> FoldPlan:
    """Stratified k-fold repeated ``repeats`` times, each fold's training part
    further split into stratified train/validation.

    Per class the samples are shuffled and dealt round-robin over the folds,
    starting with the folds that currently hold the fewest samples.
    """
    y = np.asarray(y, dtype=np.int64)
    if k < 2:
        raise ValueError("k must be at least 2")
    classes, counts = np.unique(y, return_counts=True)
    for c, n in zip(classes, counts):
        if n < k:
            raise ValueError(f"class {int(c)} has {n} samples, fewer than k={k}")
    rng = make_rng(seed, "folds")
    splits = []
    for r in range(repeats):
        members = [[] for _ in range(k)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(y == c))
            order = sorted(range(k), key=lambda f: (len(members[f]), f))
            for i, sample in enumerate(idx):
                members[order[i % k]].append(int(sample))
        for f in range(k):
            test = np.sort(np.array(members[f], dtype=np.int64))
            rest = np.sort(np.concatenate([members[g] for g in range(k) if g != f]).astype(np.int64))
            val = []
            for c in classes:
                pool = rng.permutation(rest[y[rest] == c])
                n_val = int(round(val_fraction * len(pool)))
                if val_fraction > 0 and len(pool) >= 2:
                    n_val = max(1, n_val)
                val.extend(pool[:n_val].tolist())
            val = np.sort(np.array(val, dtype=np.int64))
            train = np.setdiff1d(rest, val)
            splits.append(Split(r, f, train, val, test))
    return FoldPlan(splits, k, repeats, val_fraction, seed)


@dataclass
class ZscoreStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = nx.as_matrix(X)
        out = np.zeros_like(X)
        live = self.std > 0
        out[:, live] = (X[:, live] - self.mean[live]) / self.std[live]
        return out


def zscore_fit(X_train) -> ZscoreStats:
    X = nx.as_matrix(X_train, "training matrix")
    if X.shape[0] == 0:
        raise ValueError("empty training split")
    return ZscoreStats(X.mean(axis=0), X.std(axis=0))


def zscore_fit_apply(X_train, *others):
    """Fit on ``X_train`` only; return ``([train, *others] normalised, stats)``."""
    stats = zscore_fit(X_train)
    return [stats.apply(X_train)] + [stats.apply(o) for o in others], stats


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def balanced_accuracy(y, y_pred, n_classes: int) -> float:
    """Mean per-class recall over the classes present in ``y``."""
    y = np.asarray(y, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y.size == 0:
        raise ValueError("balanced accuracy of an empty set")
    if y.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_pred.shape}")
    for arr in (y, y_pred):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
    support = np.bincount(y, minlength=n_classes)
    hits = np.bincount(y[y == y_pred], minlength=n_classes)
    present = support > 0
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} absent from y; "
                      "excluded from balanced accuracy")
    return float(np.mean(hits[present] / support[present]))


def predict(model, X) -> np.ndarray:
    probs = model.forward(X, EVAL)[0].value
    return np.argmax(probs, axis=1)  # ties go to the lowest class index


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    model: str = "wpfs"  # "wpfs" or "mlp"
    use_wpn: bool = True
    use_spn: bool = True
    sparsity_lambda: float = 3e-5
    embedding: str = "nmf"
    embedding_size: int = 50
    embedding_preprocessing: str = "minmax"
    nmf_iters: int = 1000
    hidden: tuple = (100, 100, 10)
    aux_hidden: tuple = (100, 100, 100)
    dropout: float = 0.2
    batch_norm: bool = True
    batch_size: int = 8
    max_iterations: int = 10000
    patience: int = 200
    clip_norm: float = 2.5
    lr_start: float = 3e-3
    lr_end: float = 3e-4
    lr_decay_epochs: int = 500
    weight_decay: float = 1e-4
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.aux_hidden = tuple(int(h) for h in self.aux_hidden)
        if self.model not in ("wpfs", "mlp"):
            raise ValueError(f"model must be 'wpfs' or 'mlp', got {self.model!r}")
        if self.sparsity_lambda < 0:
            raise ValueError("sparsity_lambda must be non-negative")
        for name in ("batch_size", "max_iterations", "patience", "embedding_size", "nmf_iters",
                     "lr_decay_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        ScheduleConfig(self.lr_start, self.lr_end, self.lr_decay_epochs)

    @classmethod
    def for_method(cls, method: str, **kw) -> "RunConfig":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        flags = {
            "wpfs": dict(model="wpfs", use_wpn=True, use_spn=True),
            "mlp": dict(model="mlp", use_wpn=False, use_spn=False),
            "wpfs-nospn": dict(model="wpfs", use_wpn=True, use_spn=False),
            "wpfs-nowpn": dict(model="wpfs", use_wpn=False, use_spn=True),
        }[method]
        return cls(**{**kw, **flags})

    @property
    def method(self) -> str:
        if self.model == "mlp":
            return "mlp"
        return {(True, True): "wpfs", (True, False): "wpfs-nospn",
                (False, True): "wpfs-nowpn", (False, False): "wpfs-direct"}[(self.use_wpn, self.use_spn)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["aux_hidden"] = list(self.aux_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr_start, self.lr_end, self.lr_decay_epochs)


@dataclass
class RunResult:
    repeat: int
    fold: int
    seed: int
    test_balanced_accuracy: float
    val_balanced_accuracy: float
    best_val_loss: float
    best_epoch: int
    epochs: int
    iterations: int
    stop_reason: str
    curves: list  # (iteration, mean train CE over the epoch, val CE) per epoch
    step_losses: np.ndarray  # total training loss at every iteration
    importance: np.ndarray | None
    selected_fraction: float | None
    param_counts: dict
    wall_clock: float
    plan_id: str = ""
    model: object = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        """Numeric summary for manifests (no timing, no per-step arrays)."""
        return {
            "repeat": self.repeat,
            "fold": self.fold,
            "seed": self.seed,
            "test_balanced_accuracy": self.test_balanced_accuracy,
            "val_balanced_accuracy": self.val_balanced_accuracy,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "epochs": self.epochs,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "selected_fraction": self.selected_fraction,
            "param_counts": self.param_counts,
        }


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def build_model(cfg: RunConfig, n_features: int, n_classes: int, embedding: EmbeddingMatrix | None, seed: int):
    mcfg = ModelConfig(n_features, n_classes, cfg.hidden, cfg.aux_hidden, cfg.dropout, cfg.batch_norm,
                       use_wpn=cfg.model == "wpfs" and cfg.use_wpn,
                       use_spn=cfg.model == "wpfs" and cfg.use_spn)
    if cfg.model == "mlp":
        return MlpClassifier(mcfg, seed)
    return WpfsModel(mcfg, embedding, seed)


def _eval_loss(model, X, y, weights) -> float:
    from .network import weighted_cross_entropy

    probs = model.forward(X, EVAL)[0]
    return float(weighted_cross_entropy(probs, y, weights).value.item())


def fit(model, X_tr, y_tr, X_va, y_va, weights, cfg: RunConfig, seed: int) -> dict:
    """Minibatch training with per-epoch validation and early stopping.

    Leaves ``model`` holding the parameters with the lowest validation loss.
    """
    shuffle_rng = make_rng(seed, "shuffle")
    drop_rng = make_rng(seed, "dropout")
    opt = AdamW(lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    schedule = cfg.schedule()
    n = len(y_tr)
    D = X_tr.shape[1]
    lam = cfg.sparsity_lambda if cfg.model == "wpfs" else 0.0

    curves, step_losses = [], []
    best_val, best_epoch, best_snap = np.inf, -1, None
    since_best = 0
    iteration = epoch = 0
    stop_reason = "max_iterations"
    while iteration < cfg.max_iterations:
        lr = lr_at(schedule, epoch)
        perm = shuffle_rng.permutation(n)
        ce_sum, ce_count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            if iteration >= cfg.max_iterations:
                break
            idx = perm[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    probs, s = model.forward(X_tr[idx], TRAIN, drop_rng)
                    loss = total_loss(probs, y_tr[idx], weights, s, lam, D)
            except BatchTooSmall:
                continue
            value = float(loss.value.item())
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at iteration {iteration}", curves)
            nx.backward(tape, loss, model.store)
            clip_gradients(model.store, cfg.clip_norm)
            opt.step(model.store, lr)
            step_losses.append(value)
            ce = value - (lam * (s.value.sum() if s is not None else D))
            ce_sum += ce
            ce_count += 1
            iteration += 1
        val = _eval_loss(model, X_va, y_va, weights)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", curves)
        curves.append((iteration, ce_sum / max(ce_count, 1), val))
        if val < best_val:
            best_val, best_epoch, best_snap = val, epoch, model.store.snapshot()
            since_best = 0
        else:
            since_best += 1
        epoch += 1
        if since_best >= cfg.patience:
            stop_reason = "patience"
            break
    model.store.restore(best_snap)
    return dict(curves=curves, step_losses=np.array(step_losses), best_val=best_val,
                best_epoch=best_epoch, epochs=epoch, iterations=iteration, stop_reason=stop_reason)


def train_run(ds: Dataset, split: Split, cfg: RunConfig, plan_id: str = "", keep_model: bool = False) -> RunResult:
    """One (repeat, fold) run: z-score and embed on the training rows, train,
    select on validation loss, score balanced accuracy on the test rows."""
    t0 = time.perf_counter()
    seed = derive_seed(cfg.seed, split.repeat, split.fold)
    (X_tr, X_va, X_te), _ = zscore_fit_apply(ds.X[split.train], ds.X[split.val], ds.X[split.test])
    y_tr, y_va, y_te = ds.y[split.train], ds.y[split.val], ds.y[split.test]

    embedding = None
    if cfg.model == "wpfs" and (cfg.use_wpn or cfg.use_spn):
        embedding = compute_embedding(X_tr, cfg.embedding, cfg.embedding_size,
                                      cfg.embedding_preprocessing, cfg.nmf_iters,
                                      make_rng(seed, "embedding"))
    model = build_model(cfg, ds.n_features, ds.n_classes, embedding, seed)
    weights = class_weights(y_tr, ds.n_classes)
    out = fit(model, X_tr, y_tr, X_va, y_va, weights, cfg, seed)

    imp = feature_importance(model, cfg.threshold)
    return RunResult(
        repeat=split.repeat,
        fold=split.fold,
        seed=seed,
        test_balanced_accuracy=balanced_accuracy(y_te, predict(model, X_te), ds.n_classes),
        val_balanced_accuracy=balanced_accuracy(y_va, predict(model, X_va), ds.n_classes),
        best_val_loss=out["best_val"],
        best_epoch=out["best_epoch"],
        epochs=out["epochs"],
        iterations=out["iterations"],
        stop_reason=out["stop_reason"],
        curves=out["curves"],
        step_losses=out["step_losses"],
        importance=imp.scores if imp.available else None,
        selected_fraction=imp.selected_fraction if imp.available else None,
        param_counts=parameter_counts(model),
        wall_clock=time.perf_counter() - t0,
        plan_id=plan_id,
        model=model if keep_model else None,
    )


def _run_one(args):
    ds, split, cfg, plan_id, keep = args
    return train_run(ds, split, cfg, plan_id, keep)


def run_cv(ds: Dataset, cfg: RunConfig, plan: FoldPlan, jobs: int = 1, keep_models: bool = False,
           on_result=None) -> list:
    """Train every split of ``plan``; ``on_result`` sees each result in plan order."""
    pid = plan.plan_id()
    tasks = [(ds, s, cfg, pid, keep_models) for s in plan.splits]
    results = []
    if jobs <= 1:
        for t in tasks:
            res = _run_one(t)
            log.info("repeat %d fold %d: test bacc %.4f, best val %.4f (%d iterations)",
                     res.repeat, res.fold, res.test_balanced_accuracy, res.best_val_loss, res.iterations)
            results.append(res)
            if on_result:
                on_result(res)
        return results
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for res in pool.map(_run_one, tasks):
            results.append(res)
            if on_result:
                on_result(res)
    return results


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _ranks_desc(values: list) -> list:
    """Rank 1 for the largest value; tied values share their mean rank."""
    order = sorted(range(len(values)), key=lambda i: -values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def aggregate(table: dict) -> dict:
    """Summarise ``table[dataset][method] -> list[RunResult]``.

    Reports mean/std test balanced accuracy per (dataset, method), per-dataset
    ranks of the method means, and each method's average rank.
    """
    per_dataset = {}
    rank_lists: dict[str, list] = {}
    for dname, methods in table.items():
        keys = None
        stats = {}
        for mname, results in methods.items():
            k = sorted((r.plan_id, r.repeat, r.fold) for r in results)
            if keys is None:
                keys = k
            elif k != keys:
                raise nx.UsageError(f"dataset {dname!r}: method {mname!r} ran a different fold plan")
            acc = np.array([r.test_balanced_accuracy for r in results])
            stats[mname] = {
                "mean_bacc": float(acc.mean()),
                "std_bacc": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
                "runs": len(acc),
            }
        names = list(stats)
        ranks = _ranks_desc([stats[m]["mean_bacc"] for m in names])
        for m, rk in zip(names, ranks):
            stats[m]["rank"] = rk
            rank_lists.setdefault(m, []).append(rk)
        per_dataset[dname] = stats
    return {
        "datasets": per_dataset,
        "average_rank": {m: float(np.mean(v)) for m, v in rank_lists.items()},
    }


def write_curves(result: RunResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_loss", "val_loss"])
        for it, tr, va in result.curves:
            w.writerow([it, repr(float(tr)), repr(float(va))])


def write_importance(scores, feature_names, threshold: float, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_index", "feature_name", "score", "selected"])
        for j, (name, s) in enumerate(zip(feature_names, scores)):
            w.writerow([j, name, repr(float(s)), int(s > threshold)])


def score_histogram(scores, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.asarray(scores), bins=bins, range=(0.0, 1.0))
    return counts, edges
