"""Command-line entry points.

Verbs: gen-data, weaklabels, train, evaluate, sweep, visualize. Every
verb accepts --seed and --config; the process exits 0 only when the
whole requested operation succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import attention as attnmod
from . import metrics as metricsmod
from .adapters import AdapterConfig
from .data import DataSpec, generate_dataset, read_meta, read_samples, \
    write_meta, write_samples
from .errors import AttnAlignError
from .model import ModelConfig, VisualDecoder, VisualInput, load_checkpoint
from .sweeps import sweep
from .training import TASK_PROFILES, TrainConfig, compute_weak_labels, train
from .weaklabels import load_weak_label_cache, record_to_weak_labels, \
    save_weak_label_cache, weak_labels_to_record


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _dataclass_from(cls, doc: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise AttnAlignError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**doc)


def _build_train_config(doc: dict, args) -> tuple[ModelConfig, TrainConfig, int]:
    model_cfg = _dataclass_from(ModelConfig, doc.get("model", {}))
    adapter_cfg = _dataclass_from(AdapterConfig, doc.get("adapter", {}))
    train_doc = dict(doc.get("train", {}))
    profile = train_doc.pop("profile", None) or getattr(args, "profile", None)
    if profile:
        prof = TASK_PROFILES[profile]
        train_doc.setdefault("epochs", prof.epochs)
        train_doc.setdefault("lambda_align", prof.lambda_align)
    cfg = _dataclass_from(TrainConfig, {**train_doc, "adapter": adapter_cfg})

    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "lambda_align", None) is not None:
        cfg = replace(cfg, lambda_align=args.lambda_align)
    if getattr(args, "heads", None) is not None:
        cfg = replace(cfg, heads_r=args.heads)
    if getattr(args, "topk", None) is not None:
        cfg = replace(cfg, weak_k=args.topk)
    acfg = cfg.adapter
    if getattr(args, "no_qmoe", False):
        acfg = replace(acfg, use_qmoe=False)
    if getattr(args, "no_kmoe", False):
        acfg = replace(acfg, use_kmoe=False)
    if getattr(args, "no_a3moe", False):
        acfg = replace(acfg, use_qmoe=False, use_kmoe=False)
    cfg = replace(cfg, adapter=acfg)
    if cfg.heads_r == 0:
        cfg = replace(cfg, lambda_align=0.0)
    return model_cfg, cfg, int(doc.get("model_seed", 0))


def cmd_gen_data(args) -> int:
    doc = _load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = _dataclass_from(DataSpec, doc)
    train_samples, test_samples, meta = generate_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_samples(out / "train.jsonl", train_samples)
    write_samples(out / "test.jsonl", test_samples)
    write_meta(out / "meta.json", meta)
    print(f"wrote {len(train_samples)} train / {len(test_samples)} test samples "
          f"to {out}")
    return 0


def cmd_weaklabels(args) -> int:
    doc = _load_config(args.config)
    samples = read_samples(args.data)
    meta = read_meta(args.meta)
    k = args.topk if args.topk is not None else doc.get("topk", 4)
    noise = args.noise if args.noise is not None else doc.get("noise", 0.0)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    labels = compute_weak_labels(samples, meta, k, noise=noise, seed=seed)
    backend_id = f"synthetic-oracle(noise={float(noise)},seed={int(seed)})"
    records = [weak_labels_to_record(s.image_id, s.prompt_id, labels[s.id],
                                     backend_id)
               for s in samples]
    save_weak_label_cache(args.out, records)
    print(f"wrote {len(records)} weak-label records to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    model_cfg, cfg, model_seed = _build_train_config(doc, args)
    data_dir = Path(args.data)
    train_samples = read_samples(data_dir / "train.jsonl")
    test_samples = read_samples(data_dir / "test.jsonl")
    meta = read_meta(data_dir / "meta.json")

    model = VisualDecoder(model_cfg, seed=model_seed)
    metricsmod.check_compatibility(model, train_samples)

    weak_labels = None
    if cfg.lambda_align > 0 and cfg.heads_r > 0:
        if args.weak_cache:
            cache = load_weak_label_cache(args.weak_cache)
            weak_labels = {}
            for s in train_samples:
                match = [rec for key, rec in cache.items()
                         if key[0] == s.image_id and key[1] == s.prompt_id]
                if not match:
                    raise AttnAlignError(
                        f"weak-label cache misses sample {s.id}")
                weak_labels[s.id] = record_to_weak_labels(match[0])
        else:
            weak_labels = compute_weak_labels(train_samples, meta, cfg.weak_k,
                                              noise=args.weak_noise,
                                              seed=cfg.seed)

    def eval_fn(m, adapters):
        report = metricsmod.evaluate(m, adapters, test_samples)
        return {"coverage": report.coverage, "intensity": report.intensity,
                "accuracy": report.accuracy}

    result = train(model, train_samples, cfg, weak_labels=weak_labels,
                   eval_fn=eval_fn, out_dir=args.out)
    print(f"final metrics: {json.dumps(result.final_metrics, sort_keys=True)}")
    return 0


def cmd_evaluate(args) -> int:
    report = metricsmod.evaluate_checkpoint(args.checkpoint, args.data,
                                            tau=args.tau)
    metricsmod.save_report(args.out, report)
    print(f"coverage={report.coverage:.4f} intensity={report.intensity:.4f} "
          f"accuracy={report.accuracy:.4f} n={report.n}")
    return 0


def cmd_sweep(args) -> int:
    doc = _load_config(args.config)
    model_cfg, cfg, model_seed = _build_train_config(doc, args)
    data_dir = Path(args.data)
    train_samples = read_samples(data_dir / "train.jsonl")
    test_samples = read_samples(data_dir / "test.jsonl")
    meta = read_meta(data_dir / "meta.json")
    values = [float(v) for v in args.values.split(",") if v != ""]
    rows = sweep(args.param, values, cfg, model_seed, train_samples,
                 test_samples, meta, model_config=model_cfg, out_csv=args.out)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def cmd_visualize(args) -> int:
    model, adapters, _ = load_checkpoint(args.checkpoint)
    samples = read_samples(args.data)
    metricsmod.check_compatibility(model, samples)
    if args.ids:
        wanted = set(args.ids.split(","))
        samples = [s for s in samples if s.id in wanted]
    else:
        samples = samples[: args.first]
    if not samples:
        raise AttnAlignError("no samples selected for visualization")
    for s in samples:
        gen = model.generate_greedy(VisualInput(s.features, s.grid), s.prompt,
                                    max_len=len(s.answer), adapters=adapters)
        if args.kind == "mean":
            heat = attnmod.generated_query_mean_map(gen.stacks, gen.step_rows)
        else:
            heat = attnmod.generated_query_refined_map(gen.stacks, gen.step_rows,
                                                       args.heads)
        attnmod.export_heatmaps(args.out, s.id, args.kind, heat, s.grid)
    print(f"wrote heatmaps for {len(samples)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnalign",
        description="attention-aligned adapter tuning on a toy visual decoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("weaklabels", help="precompute the weak-label cache")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.set_defaults(fn=cmd_weaklabels)

    p = sub.add_parser("train", help="fine-tune adapters on a dataset directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lambda_align", type=float, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--profile", choices=sorted(TASK_PROFILES), default=None)
    p.add_argument("--weak-cache", default=None)
    p.add_argument("--weak-noise", type=float, default=0.0)
    p.add_argument("--no-qmoe", action="store_true")
    p.add_argument("--no-kmoe", action="store_true")
    p.add_argument("--no-a3moe", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=metricsmod.DEFAULT_TAU)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="one training run per hyperparameter value")
    common(p)
    p.add_argument("--param", choices=["K", "R", "lambda", "B"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("visualize", help="export attention heatmaps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", default=None, help="comma-separated sample ids")
    p.add_argument("--first", type=int, default=4)
    p.add_argument("--kind", choices=["mean", "refined"], default="mean")
    p.add_argument("--heads", type=int, default=2,
                   help="top-R for --kind refined")
    p.set_defaults(fn=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (AttnAlignError, OSError, KeyError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
