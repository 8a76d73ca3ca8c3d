"""Paired training runs: alignment on (lambda=0.1) vs off (lambda=0).

Shares one seeded dataset and seed across both runs and prints the
attention-distribution metrics side by side. Defaults are a quick
desk-check; --full reproduces the acceptance-scale experiment.
"""

import argparse
import json
import time
from pathlib import Path

from attnalign.data import DataSpec, generate_dataset
from attnalign.model import ModelConfig, VisualDecoder
from attnalign.sweeps import run_single
from attnalign.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true",
                    help="2000/500 samples, 6 epochs (several minutes)")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--lam", type=float, default=0.1,
                    help="alignment weight of the treated run")
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--out", default=None, help="optional JSON results path")
    args = ap.parse_args()

    n_train, n_test = (2000, 500) if args.full else (400, 100)
    epochs = args.epochs or (6 if args.full else 3)
    spec = DataSpec(n_train=n_train, n_test=n_test, grid=8, d_visual=16,
                    n_concepts=4, n_segments=3, n_labels=4, seg_side_min=1,
                    seg_side_max=1, feature_noise=0.2, seed=args.seed)
    train_s, test_s, meta = generate_dataset(spec)

    rows = {}
    for lam in (0.0, args.lam):
        t0 = time.time()
        model = VisualDecoder(ModelConfig(), seed=0)
        cfg = TrainConfig(lambda_align=lam, epochs=epochs, lr=3e-3,
                          batch_size=8, weak_k=1, heads_r=2, seed=0)
        result, report = run_single(model, train_s, test_s, meta, cfg)
        rows[lam] = {
            "coverage": report.coverage,
            "intensity": report.intensity,
            "accuracy": report.accuracy,
            "final_llm": result.epoch_logs[-1]["train_llm"],
            "final_align": result.epoch_logs[-1]["train_align"],
            "seconds": round(time.time() - t0, 1),
        }
        print(f"lambda={lam}: " + "  ".join(f"{k}={v:.4f}" if k != "seconds"
                                            else f"{k}={v}"
                                            for k, v in rows[lam].items()))

    base, treated = rows[0.0], rows[args.lam]
    print(f"\ncoverage ratio  {treated['coverage'] / max(base['coverage'], 1e-9):6.2f}x")
    print(f"intensity ratio {treated['intensity'] / base['intensity']:6.2f}x")
    print(f"accuracy delta  {treated['accuracy'] - base['accuracy']:+.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
