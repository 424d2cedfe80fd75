"""Command-line interface.

Subcommands: synth, train, eval, perturb, ablate, gradcheck,
analyze-attention, export-embeddings. Exit codes: 0 success,
2 configuration/usage error, 1 runtime error.

The train/ablate config JSON has two optional sections, both overriding
dataclass defaults field by field::

    {"model": {"text_dim": 64, ...}, "train": {"epochs": 10, ...}}
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .backbone import ModelConfig, build_model, load_checkpoint
from .data import load_dataset, load_embeddings, save_dataset
from .diffcore import gradcheck as run_gradcheck
from .errors import ConfigError, ContractError, DataFormatError, ShapeError
from .harness import PerturbSpec, Report, TrainConfig
from .synth import SynthSpec, synth_generate


def _load_configs(path):
    if path is None:
        return ModelConfig(), TrainConfig()
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    model = ModelConfig.from_dict({**ModelConfig().to_dict(), **raw.get("model", {})})
    train = TrainConfig.from_dict({**TrainConfig().to_dict(), **raw.get("train", {})})
    return model, train


def _load_run(checkpoint, data_dir, profiles_path=None):
    """Rebuild a trained model plus its frozen profiles and dataset."""
    config, state = load_checkpoint(checkpoint)
    model = build_model(config, state)
    dataset = load_dataset(data_dir, text_dim=config.text_dim)
    profiles = None
    if config.use_profile:
        path = Path(profiles_path) if profiles_path else Path(checkpoint).parent / "user_profile.f32"
        if not path.exists():
            raise ConfigError(
                f"profiles file {path} not found; pass --profiles or ablate the profile module"
            )
        profiles = load_embeddings(path, expected_rows=len(dataset.users), kind="user_profile")
    return model, profiles, dataset


def cmd_synth(args):
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec()
    ds = synth_generate(spec, args.seed)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds.users)} users, {len(ds.movies)} movies, "
          f"{len(ds.reviews)} reviews to {args.out}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg = _load_configs(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    dataset = load_dataset(args.data, text_dim=model_cfg.text_dim)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    if args.repeats > 1:
        finals = []
        for rep in range(args.repeats):
            cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": train_cfg.seed + rep})
            out_dir = Path(args.out) / f"run{rep}"
            result = harness.train(dataset, model_cfg, cfg, out_dir=out_dir, log=log)
            finals.append(result.report.best["test"])
        agg = {}
        for key in ("f1", "auc", "acc"):
            vals = [m[key] for m in finals if m[key] is not None]
            agg[key] = {
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals)) if vals else None,
            }
        summary = Report(
            config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
            seed=train_cfg.seed,
            extra={"repeats": args.repeats, "aggregate_test": agg},
        )
        Path(args.out).mkdir(parents=True, exist_ok=True)
        summary.save(Path(args.out) / "report.json")
        print(json.dumps(agg, indent=2))
    else:
        result = harness.train(dataset, model_cfg, train_cfg, out_dir=args.out, log=log)
        print(json.dumps(result.report.best, indent=2))
    return 0


def cmd_eval(args):
    model, profiles, dataset = _load_run(args.checkpoint, args.data, args.profiles)
    from .data import build_meta_vectors
    from .graph import build_graph

    labels = dataset.labels()
    ids = dataset.split_ids(args.split)
    if not ids:
        raise ContractError(f"split {args.split!r} is empty")
    meta_table = build_meta_vectors(dataset, model.config.meta_dim)
    graph = build_graph(dataset)
    source = harness.FeatureSource(dataset, meta_table, profiles)
    metrics, _, _, _ = harness.evaluate_split(
        model, graph, source, labels, ids, args.seed, args.batch_size
    )
    report = Report(
        config={"model": model.config.to_dict()},
        seed=args.seed,
        extra={"split": args.split, "metrics": metrics, "graph_stats": graph.stats()},
    )
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        report.save(Path(args.out) / "report.json")
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_perturb(args):
    model, profiles, dataset = _load_run(args.checkpoint, args.data, args.profiles)
    rates = [float(r) for r in args.rates.split(",")]
    spec = PerturbSpec(mode=args.mode, rates=rates, seed=args.seed)
    report = harness.perturb(model, profiles, dataset, spec,
                             seed=args.seed, batch_size=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    (out / "curves.csv").write_text(harness.curves_to_csv(report.curves), encoding="utf-8")
    print(harness.curves_to_csv(report.curves))
    return 0


def cmd_ablate(args):
    model_cfg, train_cfg = _load_configs(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    dataset = load_dataset(args.data, text_dim=model_cfg.text_dim)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    result = harness.ablate(dataset, model_cfg, train_cfg, args.variant,
                            out_dir=args.out, log=log)
    print(json.dumps(result.report.best, indent=2))
    return 0


def cmd_gradcheck(args):
    report = run_gradcheck(tol=args.tol)
    print("\n".join(report.lines()))
    if not report.passed:
        print(f"FAILED: {len(report.failing())} primitive(s) above tolerance {args.tol}")
        return 1
    print(f"all primitives within tolerance {args.tol}")
    return 0


def cmd_analyze_attention(args):
    model, profiles, dataset = _load_run(args.checkpoint, args.data, args.profiles)
    result = harness.analyze_attention(model, profiles, dataset, seed=args.seed,
                                       batch_size=args.batch_size, split=args.split)
    report = Report(
        config={"model": model.config.to_dict()},
        seed=args.seed,
        fusion_attention=result["fusion_attention"],
        gat_attention_by_edge_type=result["gat_attention_by_edge_type"],
    )
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        report.save(Path(args.out) / "report.json")
    print(report.to_json())
    return 0


def cmd_export_embeddings(args):
    model, profiles, dataset = _load_run(args.checkpoint, args.data, args.profiles)
    written = harness.export_embeddings(model, profiles, dataset, args.out,
                                        seed=args.seed, batch_size=args.batch_size)
    print("\n".join(written))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="spoilermoe",
                                description="Multi-modal MoE spoiler detection")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a planted-signal dataset")
    s.add_argument("--spec", help="SynthSpec JSON (defaults used when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(fn=cmd_synth)

    def add_common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--batch-size", type=int, default=64)
        sp.add_argument("--profiles", help="user_profile.f32 (defaults next to checkpoint)")

    s = sub.add_parser("train", help="pretext + backbone training")
    s.add_argument("--config", help="JSON with model/train sections")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--out")
    add_common(s)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("perturb", help="robustness curves for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", required=True, choices=["edges", "text", "meta"])
    s.add_argument("--rates", default="0,0.25,0.5,0.75,1.0")
    s.add_argument("--out", required=True)
    add_common(s)
    s.set_defaults(fn=cmd_perturb)

    s = sub.add_parser("ablate", help="train one ablation variant")
    s.add_argument("--variant", required=True,
                   choices=sorted(harness.ABLATION_VARIANTS))
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of all primitives")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("analyze-attention", help="fusion + GAT attention averages")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--out")
    add_common(s)
    s.set_defaults(fn=cmd_analyze_attention)

    s = sub.add_parser("export-embeddings", help="expert outputs for external T-SNE")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    add_common(s)
    s.set_defaults(fn=cmd_export_embeddings)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ShapeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, DataFormatError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
