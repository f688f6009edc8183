"""Command-line entry point: ``wpfs {cv,sweep,embed,synth,importance}``.

Exit codes: 0 success, 2 input error, 3 aborted run (non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .embeddings import METHODS as EMBED_METHODS
from .embeddings import PREPROCESSING, compute_embedding
from .harness import (METHODS, PRESETS, DataError, RunConfig, TrainingDiverged, load_csv, run_cv,
                      score_histogram, stratified_cv, synth_dataset, write_csv, write_curves,
                      write_importance)
from .model import DEFAULT_THRESHOLD, LAMBDA_GRID, feature_importance, lambda_for_ratio, load_model, save_model
from .numerics import make_rng

log = logging.getLogger("wpfs")

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 2, 3


class InputError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("WPFS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"WPFS_SEED must be an integer, got {env!r}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

# RunConfig fields set by --method/--seed rather than their own flag
_DERIVED = {"model", "use_wpn", "use_spn", "seed"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run settings (override --config)")
    defaults = RunConfig()
    for f in dataclasses.fields(RunConfig):
        if f.name in _DERIVED:
            continue
        default = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            g.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes", "on"), default=None,
                           metavar="BOOL", help=f"default {default}")
        elif isinstance(default, tuple):
            g.add_argument(flag, type=lambda s: tuple(int(v) for v in s.split(",")), default=None,
                           metavar="W1,W2,..", help=f"default {','.join(map(str, default))}")
        else:
            g.add_argument(flag, type=type(default), default=None, help=f"default {default}")


def _run_config(args, method: str, **forced) -> RunConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read config {args.config}: {e}")
        if not isinstance(values, dict):
            raise InputError("config file must hold a JSON object")
        values = {k: v for k, v in values.items() if k not in _DERIVED}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if f.name not in _DERIVED and v is not None:
            values[f.name] = v
    values.update(forced)
    values["seed"] = _seed(args)
    try:
        base = RunConfig.from_dict(values)
        return RunConfig.for_method(method, **{k: v for k, v in dataclasses.asdict(base).items()
                                               if k not in ("model", "use_wpn", "use_spn")})
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid config: {e}")


def _dataset(args):
    if args.data and args.preset:
        raise InputError("give either --data or --preset, not both")
    if args.preset:
        if args.preset not in PRESETS:
            raise InputError(f"unknown preset {args.preset!r}; expected one of {sorted(PRESETS)}")
        return synth_dataset(**PRESETS[args.preset], seed=args.data_seed), f"preset:{args.preset}"
    if not args.data:
        raise InputError("one of --data or --preset is required")
    if not Path(args.data).is_file():
        raise InputError(f"data file not found: {args.data}")
    return load_csv(args.data, args.label_col), str(args.data)


# ---------------------------------------------------------------------------
# cv / sweep
# ---------------------------------------------------------------------------


def _experiment(ds, source, cfg: RunConfig, args, out: Path) -> tuple[dict, bool]:
    """Run one CV experiment into ``out``; returns (manifest, aborted)."""
    try:
        plan = stratified_cv(ds.y, args.folds, args.repeats, args.val_fraction, cfg.seed)
    except ValueError as e:
        raise InputError(f"cannot build folds: {e}")
    started = _now()
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "importance").mkdir(exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    runs = []

    def collect(res):
        tag = f"r{res.repeat}_f{res.fold}"
        write_curves(res, out / "curves" / f"{tag}.csv")
        if res.importance is not None:
            write_importance(res.importance, ds.feature_names, cfg.threshold, out / "importance" / f"{tag}.csv")
        save_model(res.model, out / "models" / f"{tag}.wpfs", ds.feature_names,
                   extra={"repeat": res.repeat, "fold": res.fold})
        res.model = None
        runs.append(res)

    aborted, abort_msg = False, None
    try:
        run_cv(ds, cfg, plan, jobs=args.jobs, keep_models=True, on_result=collect)
    except TrainingDiverged as e:
        aborted, abort_msg = True, str(e)
        log.error("run aborted: %s", e)

    acc = np.array([r.test_balanced_accuracy for r in runs])
    frac = [r.selected_fraction for r in runs if r.selected_fraction is not None]
    manifest = {
        "tool": "wpfs",
        "tool_version": __version__,
        "method": cfg.method,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "dataset": {
            "source": source,
            "digest": ds.digest(),
            "n_samples": ds.n_samples,
            "n_features": ds.n_features,
            "n_classes": ds.n_classes,
            "label_mapping": {name: i for i, name in enumerate(ds.class_names or [])},
        },
        "seed": cfg.seed,
        "protocol": {"folds": args.folds, "repeats": args.repeats, "val_fraction": args.val_fraction,
                     "plan_id": plan.plan_id()},
        "runs": [r.to_dict() for r in runs],
        "aggregate": {
            "completed_runs": len(runs),
            "mean_bacc": float(acc.mean()) if len(acc) else None,
            "std_bacc": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
            "mean_best_val_loss": float(np.mean([r.best_val_loss for r in runs])) if runs else None,
            "mean_selected_fraction": float(np.mean(frac)) if frac else None,
        },
        "aborted": aborted,
        "abort_reason": abort_msg,
        "timestamps": {"started": started, "finished": _now()},
    }
    _write_json(manifest, out / "manifest.json")
    # wall clock kept apart so manifests stay comparable across executions
    _write_json({f"r{r.repeat}_f{r.fold}": r.wall_clock for r in runs}, out / "timings.json")
    return manifest, aborted


def cmd_cv(args) -> int:
    ds, source = _dataset(args)
    cfg = _run_config(args, args.method)
    manifest, aborted = _experiment(ds, source, cfg, args, _out_dir(args))
    agg = manifest["aggregate"]
    if agg["completed_runs"]:
        print(f"{cfg.method}: balanced accuracy {agg['mean_bacc']:.4f} +- {agg['std_bacc']:.4f} "
              f"over {agg['completed_runs']} runs")
    return EXIT_ABORT if aborted else EXIT_OK


def _parse_lambdas(text: str) -> list[float]:
    try:
        lams = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--lambdas must be a comma-separated list of numbers, got {text!r}")
    if not lams:
        raise InputError("--lambdas is empty")
    if any(not np.isfinite(v) or v < 0 for v in lams):
        raise InputError("every lambda must be a finite number >= 0")
    return lams


def cmd_sweep(args) -> int:
    lams = _parse_lambdas(args.lambdas)
    ds, source = _dataset(args)
    out = _out_dir(args)
    rows, aborted_any = [], False
    for lam in lams:
        cfg = _run_config(args, args.method, sparsity_lambda=lam)
        sub = out / f"lambda_{lam:g}"
        manifest, aborted = _experiment(ds, source, cfg, args, sub)
        aborted_any |= aborted
        agg = manifest["aggregate"]
        rows.append([lam, agg["mean_bacc"], agg["std_bacc"], agg["mean_selected_fraction"]])
        scores = [np.loadtxt(p, delimiter=",", skiprows=1, usecols=2, ndmin=1)
                  for p in sorted((sub / "importance").glob("*.csv"))]
        if scores:
            counts, edges = score_histogram(np.concatenate(scores), bins=args.hist_bins)
            with open(out / f"histogram_lambda_{lam:g}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_low", "bin_high", "count"])
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        if lam == 0 and scores and manifest["runs"]:
            # lambdas putting the penalty at given fractions of the unpenalised loss
            ce = float(np.mean([r["best_val_loss"] for r in manifest["runs"]]))
            s_sum = float(np.mean([s.sum() for s in scores]))
            _write_json(lambda_for_ratio(ce, s_sum), out / "lambda_ratio_diagnostic.json")
        if aborted:
            break
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mean_bacc", "std_bacc", "mean_selected_fraction"])
        for r in rows:
            w.writerow(["" if v is None else repr(float(v)) for v in r])
    for lam, m, s, f in rows:
        if m is not None:
            print(f"lambda={lam:g}: bacc {m:.4f} +- {s:.4f}, selected fraction {f}")
    return EXIT_ABORT if aborted_any else EXIT_OK


# ---------------------------------------------------------------------------
# embed / synth / importance
# ---------------------------------------------------------------------------


def cmd_embed(args) -> int:
    if args.method not in EMBED_METHODS:
        raise InputError(f"unknown embedding method {args.method!r}; valid methods: {', '.join(EMBED_METHODS)}")
    if args.preprocessing not in PREPROCESSING:
        raise InputError(f"unknown preprocessing {args.preprocessing!r}; valid: {', '.join(PREPROCESSING)}")
    ds, _ = _dataset(args)
    try:
        emb = compute_embedding(ds.X, args.method, args.k, args.preprocessing, args.nmf_iters,
                                make_rng(_seed(args), "embedding"))
    except ValueError as e:
        raise InputError(str(e))
    out = _out_dir(args)
    M = emb.size
    with open(out / "embedding.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature"] + [f"{args.method}_M{M}_{i}" for i in range(M)])
        for name, row in zip(ds.feature_names, emb.E):
            w.writerow([name] + [repr(float(v)) for v in row])
    print(f"wrote {emb.n_features}x{M} {args.method} embedding to {out / 'embedding.csv'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.preset not in PRESETS:
        raise InputError(f"unknown preset {args.preset!r}; expected one of {sorted(PRESETS)}")
    params = dict(PRESETS[args.preset])
    for k in ("n_samples", "n_features", "n_informative", "n_classes", "sigma"):
        if getattr(args, k) is not None:
            params[k] = getattr(args, k)
    try:
        ds = synth_dataset(**params, seed=_seed(args))
    except ValueError as e:
        raise InputError(str(e))
    out = _out_dir(args)
    write_csv(ds, out / "data.csv")
    (out / "informative.txt").write_text("\n".join(str(int(j)) for j in ds.informative) + "\n")
    print(f"wrote {ds.n_samples}x{ds.n_features} dataset with {len(ds.informative)} informative features")
    return EXIT_OK


def cmd_importance(args) -> int:
    try:
        model, header = load_model(args.model)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot load model {args.model}: {e}")
    imp = feature_importance(model, args.threshold)
    if not imp.available:
        raise InputError("model has no sparsity network, so it provides no importance scores")
    names = header.get("feature_names") or [f"f{j}" for j in range(len(imp.scores))]
    out = _out_dir(args)
    write_importance(imp.scores, names, args.threshold, out / "importance.csv")
    print(f"{len(imp.selected)} of {len(imp.scores)} features above {args.threshold}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wpfs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--data", help="CSV file with a header row")
        sp.add_argument("--label-col", default="label", help="name of the label column (default label)")
        sp.add_argument("--preset", help=f"synthetic preset instead of --data: {', '.join(PRESETS)}")
        sp.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic preset (default 0)")
        sp.add_argument("--seed", type=int, default=None, help="run seed (falls back to $WPFS_SEED, then 0)")
        sp.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")

    for name, fn in (("cv", cmd_cv), ("sweep", cmd_sweep)):
        sp = sub.add_parser(name, help="cross-validate a method" if name == "cv" else "cv over a lambda grid")
        data_flags(sp)
        sp.add_argument("--config", help="JSON object keyed by run setting names")
        sp.add_argument("--method", choices=METHODS, default="wpfs")
        sp.add_argument("--folds", type=int, default=5)
        sp.add_argument("--repeats", type=int, default=5)
        sp.add_argument("--val-fraction", type=float, default=0.1)
        sp.add_argument("--jobs", type=int, default=1, help="parallel training runs (default 1)")
        if name == "sweep":
            sp.add_argument("--lambdas", default=",".join(f"{v:g}" for v in LAMBDA_GRID))
            sp.add_argument("--hist-bins", type=int, default=20)
        _add_config_flags(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("embed", help="write the per-feature embedding of a dataset")
    data_flags(sp)
    sp.add_argument("--method", default="nmf", help=f"one of {', '.join(EMBED_METHODS)}")
    sp.add_argument("--k", type=int, default=50, help="embedding size (default 50)")
    sp.add_argument("--preprocessing", default="minmax", help=f"one of {', '.join(PREPROCESSING)}")
    sp.add_argument("--nmf-iters", type=int, default=1000)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("synth", help="write a synthetic dataset and its informative features")
    sp.add_argument("--preset", default="default")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--n-features", type=int)
    sp.add_argument("--n-informative", type=int)
    sp.add_argument("--n-classes", type=int)
    sp.add_argument("--sigma", type=float)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("importance", help="export feature importance scores of a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_importance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
