"""Print learnable-parameter counts of WPFS against a directly learned first layer."""
import argparse

import numpy as np

from wpfs.embeddings import EmbeddingMatrix
from wpfs.model import MlpClassifier, ModelConfig, WpfsModel, parameter_counts


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--features", type=int, nargs="+", default=[1000, 5000, 20000])
    p.add_argument("--embedding-size", type=int, default=50)
    p.add_argument("--classes", type=int, default=2)
    args = p.parse_args()

    print(f"{'D':>7} {'wpfs':>9} {'direct':>9} {'reduction':>9} {'first-layer share':>18}")
    for D in args.features:
        emb = EmbeddingMatrix("nmf", np.zeros((D, args.embedding_size)))
        pc = parameter_counts(WpfsModel(ModelConfig(D, args.classes), emb))
        print(f"{D:>7} {pc['wpfs_total']:>9} {pc['direct_total']:>9} {pc['reduction']:>9.4f} "
              f"{pc['first_layer_share']:>18.4f}")
    wide = parameter_counts(MlpClassifier(ModelConfig(20000, args.classes, hidden=(100,) * 5)))
    print(f"plain MLP, D=20000, five hidden layers of 100: first-layer share {wide['first_layer_share']:.4f}")


if __name__ == "__main__":
    main()
