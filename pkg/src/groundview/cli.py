"""Command-line entry points.

Exit codes: 0 success, 1 usage or validation error, 2 runtime fault.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data_io, evaluation, scene_synth, training
from . import discriminator as disc
from . import generator as gen
from .core_types import CLASSES, OVERHEAD_SIDE, denormalize, stack_samples

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2

TRAIN_KEYS = {f.name for f in fields(training.TrainConfig)}
GEN_KEYS = {"variant", "width_multiplier", "kernel_size", "crop_size", "noise_channels"}
PATH_KEYS = {"data", "out"}
CONFIG_KEYS = TRAIN_KEYS | GEN_KEYS | PATH_KEYS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- config -------------------------------------------------------------------

def load_run_config(config_path, overrides):
    """Merge a JSON config file with flag overrides (flags win); unknown keys are rejected."""
    cfg = {}
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = json.loads(p.read_text())
        if not isinstance(cfg, dict):
            raise ValueError(f"{p}: config must be a JSON object")
        unknown = sorted(set(cfg) - CONFIG_KEYS)
        if unknown:
            raise ValueError(f"{p}: unknown config keys {unknown}")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    train_cfg = training.TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    gen_kwargs = {k: cfg[k] for k in GEN_KEYS if k in cfg}
    gen_kwargs.setdefault("width_multiplier", training.PROFILES[train_cfg.profile])
    if gen_kwargs["width_multiplier"] != training.PROFILES[train_cfg.profile]:
        raise ValueError(f"width_multiplier {gen_kwargs['width_multiplier']} contradicts "
                         f"profile {train_cfg.profile!r}")
    gen_cfg = gen.GeneratorConfig(**gen_kwargs)
    return train_cfg, gen_cfg, {k: cfg.get(k) for k in PATH_KEYS}


def _prepare_out(path, force=False):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValueError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ValueError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands --------------------------------------------------------------------

def cmd_synth_data(args):
    out = _prepare_out(args.out, args.force)
    samples = scene_synth.make_dataset(args.seed, args.n, args.balance)
    manifest = data_io.save_dataset(samples, out)
    print(manifest)
    return EXIT_OK


def cmd_train(args):
    overrides = {
        "variant": args.variant, "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.learning_rate, "seed": args.seed, "profile": args.profile,
        "gen_loss_form": args.gen_loss_form, "checkpoint_every": args.checkpoint_every,
        "data": args.data, "out": args.out,
    }
    train_cfg, gen_cfg, paths = load_run_config(args.config, overrides)
    if not paths["data"] or not paths["out"]:
        raise UsageError("train needs --data and --out (flag or config)")
    samples = data_io.load_dataset(paths["data"])
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        training.train(train_cfg, samples, out, gen_config=gen_cfg)
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"diagnostic snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_FAULT
    print(out / "final.ckpt")
    return EXIT_OK


def _load_checkpoint_for(args):
    state = data_io.load_checkpoint(args.checkpoint)
    variant = getattr(args, "variant", None)
    if variant and variant != state.gen_config.variant:
        raise ValueError(f"--variant {variant} does not match checkpoint variant "
                         f"{state.gen_config.variant}")
    return state


def _upscale(img, side):
    f = side // img.shape[0]
    return np.repeat(np.repeat(img, f, axis=0), f, axis=1)


def render_grid(overheads, generated, real):
    """One row per sample: overhead | generated | real ground, each on a 128px tile."""
    rows = []
    for o, g, r in zip(overheads, generated, real):
        rows.append(np.concatenate([denormalize(o), denormalize(_upscale(g, OVERHEAD_SIDE)),
                                    denormalize(_upscale(r, OVERHEAD_SIDE))], axis=1))
    return np.concatenate(rows, axis=0)


def cmd_generate(args):
    state = _load_checkpoint_for(args)
    samples = data_io.load_dataset(args.data)
    if not 1 <= args.grid <= len(samples):
        raise ValueError(f"--grid {args.grid} outside 1..{len(samples)} (manifest size)")
    o, g, _ = stack_samples(samples[: args.grid])
    fake = gen.generate_batches(state.gen_params, state.gen_config, o)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "grid.png"
    data_io.write_png(path, render_grid(o, fake, g))
    print(path)
    return EXIT_OK


def cmd_train_classifier(args):
    samples = data_io.load_dataset(args.data)
    if any(s.label is None for s in samples):
        raise ValueError("train-classifier needs a fully labeled manifest")
    clf = evaluation.train_scene_classifier(samples, seed=args.seed)
    path = data_io.save_classifier(clf, args.out)
    print(f"{path} holdout_accuracy {clf.holdout_accuracy:.4f}")
    return EXIT_OK


def cmd_score(args):
    state = _load_checkpoint_for(args)
    samples = data_io.load_dataset(args.data)
    clf = data_io.load_classifier(args.classifier)
    o, _, _ = stack_samples(samples)
    fake = gen.generate_batches(state.gen_params, state.gen_config, o)
    report = evaluation.inception_score(fake, clf, n_splits=args.splits, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_io.write_report(report, out / "score_report.json")
    print(f"{'variant':<8} {'n_images':>8} {'splits':>6} {'is_mean':>9} {'is_std':>9}")
    print(f"{state.gen_config.variant:<8} {report.n_images:>8} {report.n_splits:>6} "
          f"{report.inception_score_mean:>9.4f} {report.inception_score_std:>9.4f}")
    return EXIT_OK


def cmd_classify(args):
    samples = data_io.load_dataset(args.data)
    if any(s.label is None for s in samples):
        raise ValueError("classify needs a labeled manifest; some entries have no label")
    o, _, labels = stack_samples(samples)
    if args.baseline == "grayscale":
        feats = evaluation.grayscale_patch_features(o)
        source, variant = "grayscale_patch", "-"
    else:
        if not args.checkpoint:
            raise UsageError("classify needs --checkpoint unless --baseline grayscale is given")
        state = _load_checkpoint_for(args)
        feats = disc.extract_features(state.gen_params, state.gen_config, state.disc_params, o,
                                      ground_slot=args.ground_slot)
        source, variant = "cgan_features", state.gen_config.variant
    report = evaluation.classify_land_cover(feats, labels, args.n_train, seed=args.seed,
                                            feature_source=source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_io.write_report(report, out / "classification_report.json")
    print(f"{'features':<16} {'variant':<8} {'n_train':>7} {'n_test':>6} {'accuracy':>9}")
    print(f"{source:<16} {variant:<8} {report.n_train:>7} {report.n_test:>6} {report.accuracy:>9.4f}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="groundview", description="Overhead-to-ground cGAN toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic paired dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--balance", type=float, default=0.5)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train the cGAN")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--variant", choices=gen.VARIANTS)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--profile", choices=tuple(training.PROFILES))
    s.add_argument("--gen-loss-form", choices=training.GEN_LOSS_FORMS)
    s.add_argument("--checkpoint-every", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="write an overhead | generated | real grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=int, default=8)
    s.add_argument("--variant", choices=gen.VARIANTS)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train-classifier", help="fit the scene classifier used for scoring")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="classifier file to write")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("score", help="inception score of generated views")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--splits", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=gen.VARIANTS)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("classify", help="rural/urban classification from extracted features")
    s.add_argument("--checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--n-train", type=int, required=True)
    s.add_argument("--baseline", choices=("grayscale",))
    s.add_argument("--ground-slot", choices=("generated", "zeros"), default="generated")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=gen.VARIANTS)
    s.set_defaults(func=cmd_classify)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime fault
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
