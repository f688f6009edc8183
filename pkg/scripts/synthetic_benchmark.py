"""WPFS against the plain MLP on the synthetic preset, one split per seed.

Reports test balanced accuracy, recall of the informative features among the
top SPN scores, and the best validation cross-entropy of both methods.
"""
import argparse
import json
import logging
import time

import numpy as np

from wpfs.harness import PRESETS, RunConfig, stratified_cv, synth_dataset, train_run


def run(method, lam, seed, preset, max_iterations):
    ds = synth_dataset(**PRESETS[preset], seed=seed)
    split = stratified_cv(ds.y, 5, 1, seed=seed).splits[0]
    cfg = RunConfig.for_method(method, sparsity_lambda=lam, seed=seed, max_iterations=max_iterations)
    res = train_run(ds, split, cfg)
    row = {"method": method, "lambda": lam, "seed": seed, **res.to_dict(), "wall_clock": res.wall_clock}
    if res.importance is not None:
        k = len(ds.informative)
        top = np.argsort(-res.importance, kind="stable")[:k]
        row["top_k_recall"] = len(set(top.tolist()) & set(ds.informative.tolist())) / k
    return row


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--preset", default="default", choices=sorted(PRESETS))
    p.add_argument("--lam", type=float, default=3e-5)
    p.add_argument("--max-iterations", type=int, default=10000)
    p.add_argument("--out", default="synthetic_benchmark.json")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = []
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        for method, lam in (("wpfs", args.lam), ("mlp", 0.0)):
            rows.append(run(method, lam, seed, args.preset, args.max_iterations))
            r = rows[-1]
            print(f"seed {seed} {method:5s} bacc {r['test_balanced_accuracy']:.3f} "
                  f"best val {r['best_val_loss']:.4f} recall {r.get('top_k_recall', '-')} "
                  f"({r['iterations']} it, {r['wall_clock']:.0f}s)", flush=True)
    for method in ("wpfs", "mlp"):
        sel = [r for r in rows if r["method"] == method]
        print(f"{method}: mean bacc {np.mean([r['test_balanced_accuracy'] for r in sel]):.3f}, "
              f"mean best val {np.mean([r['best_val_loss'] for r in sel]):.4f}")
    print(f"total {(time.perf_counter() - t0) / 60:.1f} min")
    with open(args.out, "w") as fh:
        json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
