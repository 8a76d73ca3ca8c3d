"""Adapter-module ablations: full model vs w/o Q-MoE, w/o K-MoE, w/o both.

Each variant trains from the same seed on the same dataset; the table
reports attention metrics and accuracy per variant.
"""

import argparse
from dataclasses import replace

from attnalign.adapters import AdapterConfig
from attnalign.data import DataSpec, generate_dataset
from attnalign.model import ModelConfig, VisualDecoder
from attnalign.sweeps import run_single
from attnalign.training import TrainConfig

VARIANTS = {
    "full": {},
    "no-qmoe": {"use_qmoe": False},
    "no-kmoe": {"use_kmoe": False},
    "no-a3moe": {"use_qmoe": False, "use_kmoe": False},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=400)
    ap.add_argument("--test", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    spec = DataSpec(n_train=args.train, n_test=args.test, grid=8, d_visual=16,
                    n_concepts=4, n_segments=3, n_labels=4, seg_side_min=1,
                    seg_side_max=1, feature_noise=0.2, seed=args.seed)
    train_s, test_s, meta = generate_dataset(spec)

    print(f"{'variant':>10}  {'coverage':>8}  {'intensity':>9}  "
          f"{'accuracy':>8}  {'L_llm':>7}  {'L_align':>7}")
    for name, flags in VARIANTS.items():
        model = VisualDecoder(ModelConfig(), seed=0)
        cfg = TrainConfig(lambda_align=0.1, epochs=args.epochs, lr=3e-3,
                          batch_size=8, weak_k=1, heads_r=2, seed=0,
                          adapter=replace(AdapterConfig(), **flags))
        result, report = run_single(model, train_s, test_s, meta, cfg)
        print(f"{name:>10}  {report.coverage:8.4f}  {report.intensity:9.4f}  "
              f"{report.accuracy:8.4f}  "
              f"{result.epoch_logs[-1]['train_llm']:7.4f}  "
              f"{result.epoch_logs[-1]['train_align']:7.4f}")


if __name__ == "__main__":
    main()
