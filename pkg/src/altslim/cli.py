"""Command line entry point: ``altslim <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate_synthetic_dataset, load_dataset
from .errors import AltSlimError
from .pipeline import (PipelineConfig, ensure_dataset, evaluate, prepare_assets, pretrain_teacher,
                       run_alternate_slimming, run_onestep_baseline, score_encoder)

NORM_CHOICES = ("sum", "mean", "max", "std", "gaussian")
CRITERIA = ("random", "magnitude", "taylor", "hessian_surrogate", "disturbed_taylor")


def _add_pipeline_flags(p):
    p.add_argument("--config", type=Path, help="JSON file mirroring PipelineConfig")
    p.add_argument("--out", type=Path, help="output root (overrides config output_dir)")
    p.add_argument("--ratio", type=float)
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--sigma", type=float)
    p.add_argument("--bottleneck-mode", choices=("local", "global"))
    p.add_argument("--norm", choices=NORM_CHOICES)
    p.add_argument("--alpha-mode", choices=("dynamic", "constant"))
    p.add_argument("--no-intermediate-align", action="store_true",
                   help="force the intermediate-feature weight to 0 in both aligning phases")
    p.add_argument("--epochs", type=int, help="total aligning epochs across both phases")
    p.add_argument("--N", type=int, dest="N")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--data-n", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--seed", type=int)


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    mapping = {
        "out": "output_dir", "ratio": "ratio", "criterion": "criterion", "sigma": "sigma",
        "bottleneck_mode": "bottleneck_mode", "norm": "norm", "epochs": "epochs", "N": "N",
        "lr": "lr0", "batch_size": "batch_size", "data_n": "data_n",
        "pretrain_epochs": "pretrain_epochs",
    }
    changes = {}
    for arg, key in mapping.items():
        value = getattr(args, arg, None)
        if value is not None:
            changes[key] = str(value) if key == "output_dir" else value
    if changes.get("norm") == "std":
        changes["norm"] = "standardization"
    if getattr(args, "alpha_mode", None):
        changes["alpha_mode"] = "constant_half" if args.alpha_mode == "constant" else "dynamic"
    if getattr(args, "no_intermediate_align", False):
        changes["intermediate_align"] = False
    cfg = cfg.replace(**changes)
    cfg.validate()
    return cfg


def _print_report(result):
    print(json.dumps({"method": result.method, "run_dir": str(result.run_dir),
                      "checkpoint": str(result.checkpoint),
                      "report": dataclasses.asdict(result.report)}, indent=1))


def cmd_gen_data(args):
    ds = generate_synthetic_dataset(args.out, args.seed, args.n, args.image_size, args.channels)
    print(json.dumps({"out": str(args.out), "n": ds.n, "digest": ds.digest}))


def cmd_pretrain(args):
    cfg = config_from_args(args)
    dataset = load_dataset(args.data) if args.data else ensure_dataset(cfg)
    teacher, losses = pretrain_teacher(cfg, dataset)
    save_checkpoint(teacher, args.output, phase="v0")
    print(json.dumps({"checkpoint": str(args.output), "proxy_loss": losses}))


def cmd_slim(args):
    _print_report(run_alternate_slimming(config_from_args(args)))


def cmd_onestep(args):
    _print_report(run_onestep_baseline(config_from_args(args)))


def cmd_importance(args):
    cfg = config_from_args(args)
    encoder = load_checkpoint(args.checkpoint)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    dataset = load_dataset(args.data)
    report = score_encoder(encoder, dataset, cfg, teacher)
    text = report.to_json(cfg.norm)
    if args.output:
        Path(args.output).write_text(text)
        print(json.dumps({"groups": len(report.group_scores), "out": str(args.output)}))
    else:
        print(text)


def cmd_eval(args):
    student = load_checkpoint(args.student)
    teacher = load_checkpoint(args.teacher)
    report = evaluate(student, teacher, load_dataset(args.data))
    print(json.dumps(dataclasses.asdict(report), indent=1))


def cmd_compare(args):
    base = config_from_args(args)
    out = Path(base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        cfg = base.with_seed(seed)
        assets = prepare_assets(cfg)
        for method, fn in (("alternate", run_alternate_slimming), ("onestep", run_onestep_baseline)):
            res = fn(cfg, assets)
            rows.append({"seed": seed, "method": method, **dataclasses.asdict(res.report)})
            print(f"seed={seed} method={method} fidelity_mse={res.report.fidelity_mse:.6g} "
                  f"probe_iou={res.report.probe_iou:.4f}", flush=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    (out / "compare.json").write_text(json.dumps(rows, indent=1))
    from .plots import plot_comparison

    plot_comparison(rows, out / "compare.png")
    wins = sum(
        1 for s in args.seeds
        if min((r for r in rows if r["seed"] == s), key=lambda r: r["fidelity_mse"])["method"] == "alternate")
    print(f"alternate wins {wins}/{len(args.seeds)} paired runs on fidelity_mse")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="altslim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the dense teacher v0 on the denoising proxy")
    _add_pipeline_flags(p)
    p.add_argument("--data", type=Path, help="dataset directory (default: derived from config)")
    p.add_argument("--output", type=Path, required=True, help="checkpoint path to write")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("slim", help="run the four-phase alternate slimming pipeline")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_slim)

    p = sub.add_parser("onestep", help="run the one-step prune-then-distil baseline")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_onestep)

    p = sub.add_parser("importance", help="dump per-group importance scores as JSON")
    _add_pipeline_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--teacher", type=Path, help="reference for disturbed Taylor targets (default: the checkpoint)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("eval", help="compare a student checkpoint against a teacher")
    p.add_argument("--student", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired alternate vs one-step runs over several seeds")
    _add_pipeline_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AltSlimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
