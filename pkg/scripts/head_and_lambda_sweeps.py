"""Sweep the selected-head count R and the alignment weight lambda.

One seeded training run per value; results land in two CSV tables with
columns param,value,coverage,intensity,accuracy,L_llm,L_align.
"""

import argparse
from pathlib import Path

from attnalign.data import DataSpec, generate_dataset
from attnalign.sweeps import sweep
from attnalign.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="sweep_results")
    ap.add_argument("--train", type=int, default=400)
    ap.add_argument("--test", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = DataSpec(n_train=args.train, n_test=args.test, grid=8, d_visual=16,
                    n_concepts=4, n_segments=3, n_labels=4, seg_side_min=1,
                    seg_side_max=1, feature_noise=0.2, seed=args.seed)
    train_s, test_s, meta = generate_dataset(spec)
    base = TrainConfig(lambda_align=0.1, epochs=args.epochs, lr=3e-3,
                       batch_size=8, weak_k=1, heads_r=2, seed=0)

    for param, values, fname in (
            ("R", [0, 1, 2, 4, 8, 16], "r_sweep.csv"),
            ("lambda", [0.0, 0.02, 0.1, 0.5], "lambda_sweep.csv")):
        rows = sweep(param, values, base, 0, train_s, test_s, meta,
                     out_csv=out / fname)
        print(f"{param} sweep -> {out / fname}")
        for row in rows:
            print("  ", {k: (round(v, 4) if isinstance(v, float) else v)
                         for k, v in row.items()})


if __name__ == "__main__":
    main()
