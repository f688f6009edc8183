"""Compare embedding types and sizes on a synthetic preset."""
import argparse
import itertools

import numpy as np

from wpfs.embeddings import METHODS
from wpfs.harness import PRESETS, RunConfig, stratified_cv, synth_dataset, train_run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--methods", default=",".join(m for m in METHODS if m != "feature_values"))
    p.add_argument("--sizes", default="20,50,70")
    p.add_argument("--preprocessing", default="minmax", choices=["minmax", "zscore", "raw"])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--preset", default="small", choices=sorted(PRESETS))
    p.add_argument("--max-iterations", type=int, default=3000)
    args = p.parse_args()

    sizes = [int(v) for v in args.sizes.split(",")]
    for method, size in itertools.product(args.methods.split(","), sizes):
        acc = []
        for seed in range(args.seeds):
            ds = synth_dataset(**PRESETS[args.preset], seed=seed)
            split = stratified_cv(ds.y, 5, 1, seed=seed).splits[0]
            size_ok = min(size, len(split.train)) if method == "svd" else size
            cfg = RunConfig(embedding=method, embedding_size=size_ok, seed=seed,
                            embedding_preprocessing=args.preprocessing, max_iterations=args.max_iterations)
            acc.append(train_run(ds, split, cfg).test_balanced_accuracy)
        print(f"{method:14s} M={size:<3d} bacc {np.mean(acc):.3f} +- {np.std(acc):.3f}", flush=True)


if __name__ == "__main__":
    main()
