"""Hyperparameter sweep and ablation drivers.

One training run per value with a shared seed, results flattened into a
CSV table (`param,value,coverage,intensity,accuracy,L_llm,L_align`).
Setting R to 0 disables the alignment term outright, so that row trains
exactly like a lambda=0 run.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .data import DatasetMeta, SyntheticSample
from .errors import ParameterError
from .metrics import MetricsReport, evaluate
from .model import VisualDecoder
from .training import TrainConfig, TrainResult, compute_weak_labels, train

SWEEP_HEADER = ["param", "value", "coverage", "intensity", "accuracy",
                "L_llm", "L_align"]

SWEEPABLE = ("K", "R", "lambda", "B")


def run_single(model: VisualDecoder, train_samples: Sequence[SyntheticSample],
               test_samples: Sequence[SyntheticSample], meta: DatasetMeta,
               cfg: TrainConfig, weak_noise: float = 0.0
               ) -> tuple[TrainResult, MetricsReport]:
    """Train once under cfg and evaluate on the held-out split."""
    labels = None
    if cfg.lambda_align > 0 and cfg.heads_r > 0:
        labels = compute_weak_labels(train_samples, meta, cfg.weak_k,
                                     noise=weak_noise, seed=cfg.seed)
    result = train(model, train_samples, cfg, weak_labels=labels)
    report = evaluate(model, result.adapters, test_samples)
    return result, report


def apply_sweep_value(cfg: TrainConfig, param: str, value) -> TrainConfig:
    if param == "K":
        return replace(cfg, weak_k=int(value))
    if param == "R":
        out = replace(cfg, heads_r=int(value))
        if int(value) == 0:
            # no heads to align means the alignment term is off entirely
            out = replace(out, lambda_align=0.0)
        return out
    if param == "lambda":
        return replace(cfg, lambda_align=float(value))
    if param == "B":
        return replace(cfg, adapter=replace(cfg.adapter, top_b=int(value)))
    raise ParameterError(f"sweepable params are {SWEEPABLE}, got {param!r}")


def sweep(param: str, values: Sequence, base_cfg: TrainConfig,
          model_seed: int, train_samples: Sequence[SyntheticSample],
          test_samples: Sequence[SyntheticSample], meta: DatasetMeta,
          model_config=None, out_csv: str | Path | None = None) -> list[dict]:
    """One run per value; rows keep the spec'd CSV column order."""
    if not values:
        raise ParameterError("sweep needs at least one value")
    from .model import ModelConfig
    rows = []
    for value in values:
        cfg = apply_sweep_value(base_cfg, param, value)
        model = VisualDecoder(model_config or ModelConfig(), seed=model_seed)
        result, report = run_single(model, train_samples, test_samples, meta, cfg)
        rows.append({
            "param": param,
            "value": value,
            "coverage": report.coverage,
            "intensity": report.intensity,
            "accuracy": report.accuracy,
            "L_llm": result.epoch_logs[-1]["train_llm"],
            "L_align": result.epoch_logs[-1]["train_align"],
        })
    if out_csv is not None:
        write_sweep_csv(out_csv, rows)
    return rows


def write_sweep_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in SWEEP_HEADER})
