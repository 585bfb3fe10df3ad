"""Command-line front end.

Subcommands: synth (emit a synthetic dataset), train (one fold), loso (full
protocol), eval (frozen checkpoint on held-out data), report (re-render a
results.json). Errors exit with a per-category code (see errors.py).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .data import SyntheticConfig, load_dataset, save_synthetic_dataset, split_loso
from .errors import ConfigurationError, DsnormError
from .harness import (
    ExperimentConfig,
    emit_report,
    evaluate_fold,
    load_checkpoint,
    render_table,
    run_loso,
    save_checkpoint,
    train_fold,
)

MODEL_CHOICES = ("resnet1d8", "resnet1d18")
NORM_CHOICES = ("bn", "in", "ibn", "dsbn", "dsin", "dson")


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=MODEL_CHOICES, default=None)
    parser.add_argument("--norm", choices=NORM_CHOICES, default=None)
    parser.add_argument("--agg", default=None,
                        help="comma list: max_logit,max_prob,avg_logit,avg_prob,"
                             "select_wasserstein,select_euclidean")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None, help="JSON experiment config")
    parser.add_argument("--out", default=None, help="output directory")


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--domains", type=int, default=None)
    parser.add_argument("--samples-per-class", type=int, default=None)
    parser.add_argument("--channels", type=int, default=None)
    parser.add_argument("--timesteps", type=int, default=None)
    parser.add_argument("--class-offset", type=float, default=None)
    parser.add_argument("--tone-freq", type=float, default=None)
    parser.add_argument("--tone-amp", type=float, default=None)
    parser.add_argument("--gain-range", type=float, nargs=2, default=None,
                        metavar=("LO", "HI"))
    parser.add_argument("--offset-range", type=float, nargs=2, default=None,
                        metavar=("LO", "HI"))
    parser.add_argument("--noise-std", type=float, default=None)


def _synthetic_config(args, seed: int | None) -> SyntheticConfig:
    overrides = {
        "num_domains": args.domains,
        "samples_per_domain_per_class": args.samples_per_class,
        "channels": args.channels,
        "timesteps": args.timesteps,
        "class_mean_offset": args.class_offset,
        "tone_frequency_hz": args.tone_freq,
        "tone_amplitude": args.tone_amp,
        "domain_gain_range": tuple(args.gain_range) if args.gain_range else None,
        "domain_offset_range": tuple(args.offset_range) if args.offset_range else None,
        "noise_std": args.noise_std,
        "seed": seed,
    }
    return SyntheticConfig(**{k: v for k, v in overrides.items() if v is not None})


def _experiment_config(args, need_data: bool = True) -> ExperimentConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = ExperimentConfig.from_dict(json.load(fh))
    else:
        config = ExperimentConfig()
    overrides = {
        "model": args.model,
        "norm": args.norm,
        "methods": tuple(args.agg.split(",")) if args.agg else None,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "out_dir": args.out,
        "manifest": getattr(args, "data", None),
    }
    config = dataclasses.replace(
        config, **{k: v for k, v in overrides.items() if v is not None}
    )
    if getattr(args, "synthetic", False):
        config = dataclasses.replace(
            config, manifest=None, synthetic=_synthetic_config(args, args.seed)
        )
    if need_data and not config.manifest and config.synthetic is None:
        raise ConfigurationError("provide --data MANIFEST or --synthetic")
    return config


def cmd_synth(args) -> int:
    config = _synthetic_config(args, args.seed)
    manifest_path, truth = save_synthetic_dataset(args.out, config)
    truth_path = Path(args.out) / "groundtruth.json"
    truth_path.write_text(
        json.dumps(
            {
                "domain_gain": truth.domain_gain,
                "domain_offset": truth.domain_offset,
                "config": dataclasses.asdict(truth.config),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"wrote {manifest_path}")
    return 0


def cmd_loso(args) -> int:
    config = _experiment_config(args)
    if not config.out_dir:
        raise ConfigurationError("loso needs --out for its reports")
    run_loso(config)  # persists results.json and report.txt into out_dir
    out = Path(config.out_dir)
    print(f"wrote {out / 'report.txt'} and {out / 'results.json'}")
    return 0


def cmd_train(args) -> int:
    config = _experiment_config(args)
    if not config.out_dir:
        raise ConfigurationError("train needs --out for the checkpoint")
    samples = _load_samples(config)
    folds = split_loso(samples)
    fold = next((f for f in folds if f.held_out == args.fold), None)
    if fold is None:
        raise ConfigurationError(
            f"subject {args.fold!r} not in dataset; have {[f.held_out for f in folds]}"
        )
    model, loss_curve = train_fold(fold.train, config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"model_{args.fold}.ckpt"
    save_checkpoint(model, ckpt)
    (out / f"train_{args.fold}.json").write_text(
        json.dumps(
            {"held_out": args.fold, "loss_curve": loss_curve,
             "config": config.to_dict()},
            indent=2, sort_keys=True,
        ) + "\n",
        encoding="utf-8",
    )
    print(f"wrote {ckpt}")
    return 0


def _load_samples(config: ExperimentConfig):
    from .harness import load_experiment_samples

    return load_experiment_samples(config)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, samples = load_dataset(args.data)
    subject_samples = [s for s in samples if s.subject == args.subject]
    if not subject_samples:
        raise ConfigurationError(f"subject {args.subject!r} not in dataset")
    methods = tuple(args.agg.split(",")) if args.agg else ("avg_prob",)
    result = evaluate_fold(model, subject_samples, methods)
    payload = json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.subject}.json").write_text(payload, encoding="utf-8")
        print(f"wrote {out / f'eval_{args.subject}.json'}")
    else:
        print(payload, end="")
    return 0


def cmd_report(args) -> int:
    with open(args.results, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    if args.out:
        paths = emit_report(report, args.out)
        print(f"wrote {paths['table']} and {paths['json']}")
    else:
        print(render_table(report), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsnorm",
        description="domain-specific normalization experiments for "
                    "cross-subject 1D-CNN classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="emit a synthetic dataset + manifest")
    _add_synth_flags(p_synth)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(fn=cmd_synth)

    p_loso = sub.add_parser("loso", help="full leave-one-subject-out protocol")
    p_loso.add_argument("--data", default=None, help="dataset manifest path")
    p_loso.add_argument("--synthetic", action="store_true",
                        help="generate the synthetic dataset in memory")
    _add_synth_flags(p_loso)
    _add_experiment_flags(p_loso)
    p_loso.set_defaults(fn=cmd_loso)

    p_train = sub.add_parser("train", help="train a single fold")
    p_train.add_argument("--data", default=None, help="dataset manifest path")
    p_train.add_argument("--synthetic", action="store_true")
    p_train.add_argument("--fold", required=True, help="held-out subject id")
    _add_synth_flags(p_train)
    _add_experiment_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one subject")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--subject", required=True)
    p_eval.add_argument("--agg", default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(fn=cmd_eval)

    p_report = sub.add_parser("report", help="re-render a results.json")
    p_report.add_argument("--results", required=True)
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DsnormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 12


if __name__ == "__main__":
    sys.exit(main())
