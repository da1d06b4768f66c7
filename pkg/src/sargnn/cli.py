"""Command-line entry point: ``sargnn {train,eval,classify,explain}``.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dataset import SyntheticConfig, generate_synthetic, load_dataset, manifest_of, split
from .errors import DivergedError, InvalidInputError, SarGnnError
from .explain import MODES, build_report, explain, render_overlay
from .graph import build_grid_graph
from .image_io import read_image, write_rgb
from .model import UPDATE_RULES, forward, init_model, softmax_probs
from .modelfile import load_model, save_model
from .training import (
    OPTIMIZERS,
    TrainConfig,
    evaluate,
    metrics_document,
    pruning_mask,
    prune_weights,
    train,
    write_metrics_json,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4



class ConfigError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _data_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data source")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--data-root", type=Path, help="directory with one sub-directory of PGM/PNG images per class")
    src.add_argument("--synthetic", action="store_true", help="use the generated desk-scale dataset")
    g.add_argument("--classes", type=int, default=3, help="synthetic class count")
    g.add_argument("--size", type=int, default=32, help="synthetic image size")
    g.add_argument("--samples-per-class", type=int, default=87)
    g.add_argument("--noise", type=float, default=0.2, help="synthetic speckle level")
    g.add_argument("--shadow-offset", type=int, default=3)
    g.add_argument("--test-fraction", type=float, default=0.23, help="stratified test share; 0 uses every sample")


def _common_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=Path, default=Path("out/model.sgnn"), help="model file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sargnn", description="Explainable grid-graph GNN for image target recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model")
    _data_options(tr)
    _common_options(tr)
    tr.add_argument("--channels", type=_int_list, default=[16, 32, 64])
    tr.add_argument("--pools", type=_int_list, default=[2])
    tr.add_argument("--head-hidden", type=_int_list, default=[128])
    tr.add_argument("--reduction", type=int, default=4)
    tr.add_argument("--update-rule", choices=UPDATE_RULES, default="product")
    tr.add_argument("--precision", type=int, choices=(32, 64), default=64)
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--lam", type=float, default=1e-4, help="lasso coefficient")
    tr.add_argument("--optimizer", choices=OPTIMIZERS, default="adam")
    tr.add_argument("--accumulate", type=int, default=8)
    tr.add_argument("--prune", type=float, default=1e-3, help="post-training magnitude threshold (0 disables)")
    tr.add_argument("--retrain-epochs", type=int, default=0)

    ev = sub.add_parser("eval", help="evaluate a model")
    _data_options(ev)
    _common_options(ev)

    for name, help_text in (("classify", "top-N class probabilities for one image"), ("explain", "classify and write saliency overlays")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("image", type=Path)
        _common_options(p)
        p.add_argument("--top", type=int, default=4)
        if name == "explain":
            p.add_argument("--mode", choices=MODES, default="gradcam")
            p.add_argument("--threshold", type=float, default=0.5)
            p.add_argument("--per-layer", action="store_true", help="also write one overlay per GNN layer")
            p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    return parser


def _seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("data", "split", "init", "train")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _load_data(args, seeds):
    if args.synthetic:
        cfg = SyntheticConfig(
            size=args.size,
            num_classes=args.classes,
            samples_per_class=args.samples_per_class,
            noise=args.noise,
            shadow_offset=args.shadow_offset,
            seed=seeds["data"],
        )
        samples = generate_synthetic(cfg)
        return samples, manifest_of(samples, cfg.class_names)
    if not args.data_root.is_dir():
        raise FileNotFoundError(f"data root not found: {args.data_root}")
    return load_dataset(args.data_root)


def _split(args, samples, seeds):
    if args.test_fraction == 0:
        return samples, samples
    return split(samples, args.test_fraction, seeds["split"])


def _check_data_args(args) -> None:
    if not args.synthetic and args.data_root is None:
        raise ConfigError("select a data source with --data-root or --synthetic")
    if not 0 <= args.test_fraction < 1:
        raise ConfigError("--test-fraction must lie in [0, 1)")
    if args.synthetic:
        try:
            SyntheticConfig(args.size, args.classes, args.samples_per_class, args.noise, args.shadow_offset)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None


def _ensure_out(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory not writable: {path}")


def cmd_train(args) -> int:
    _check_data_args(args)
    if not args.lr > 0:
        raise ConfigError(f"--lr must be positive, got {args.lr}")
    if not args.channels:
        raise ConfigError("--channels needs at least one layer width")
    pools = args.pools * len(args.channels) if len(args.pools) == 1 else args.pools
    if len(pools) != len(args.channels):
        raise ConfigError("--pools needs one value or one per layer")
    seeds = _seeds(args.seed)
    try:
        cfg = TrainConfig(
            lr=args.lr,
            lam=args.lam,
            epochs=args.epochs,
            optimizer=args.optimizer,
            seed=seeds["train"],
            prune_threshold=args.prune,
            retrain_epochs=args.retrain_epochs,
            update_rule=args.update_rule,
            accumulate=args.accumulate,
            threads=max(1, args.threads),
        )
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None

    samples, manifest = _load_data(args, seeds)
    train_set, test_set = _split(args, samples, seeds)
    try:
        model = init_model(
            manifest.dims,
            manifest.class_names,
            channels=args.channels,
            pools=pools,
            head_hidden=args.head_hidden,
            update_rule=args.update_rule,
            reduction=args.reduction,
            seed=seeds["init"],
            dtype=np.float32 if args.precision == 32 else np.float64,
        )
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None

    _ensure_out(args.out)
    model, history = train(model, train_set, cfg)
    extra = {"manifest": manifest.to_dict()}
    if cfg.prune_threshold > 0:
        model, report = prune_weights(model, cfg.prune_threshold)
        extra["sparsity"] = report.to_dict()
        if cfg.retrain_epochs:
            retrain_cfg = TrainConfig(**{**cfg.__dict__, "epochs": cfg.retrain_epochs})
            model, more = train(model, train_set, retrain_cfg, mask=pruning_mask(model))
            history += more
    test_metrics = evaluate(model, test_set, cfg.threads)
    extra["test"] = test_metrics.to_dict()
    args.model.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.model)
    write_metrics_json(args.out / "metrics.json", metrics_document(history, history[-1], **extra))
    print(f"accuracy={test_metrics.accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _check_data_args(args)
    seeds = _seeds(args.seed)
    model = load_model(args.model)
    samples, manifest = _load_data(args, seeds)
    if tuple(manifest.dims) != tuple(model.input_shape):
        raise InvalidInputError(
            f"model expects {model.input_shape[0]}x{model.input_shape[1]} images, data is {manifest.dims[0]}x{manifest.dims[1]}"
        )
    if manifest.num_classes != model.num_classes:
        raise InvalidInputError(f"model has {model.num_classes} classes, data has {manifest.num_classes}")
    _, test_set = _split(args, samples, seeds)
    metrics = evaluate(model, test_set, max(1, args.threads))
    _ensure_out(args.out)
    write_metrics_json(args.out / "eval_metrics.json", {"final": metrics.to_dict(), "class_names": model.class_names})
    print(f"accuracy={metrics.accuracy:.4f}")
    width = max(len(n) for n in model.class_names)
    for name, row in zip(model.class_names, metrics.confusion):
        print(f"{name:>{width}} " + " ".join(f"{v:5d}" for v in row))
    return EXIT_OK


def _load_image_for(model, path: Path):
    image = read_image(path)
    if (image.height, image.width) != tuple(model.input_shape):
        raise InvalidInputError(
            f"model expects {model.input_shape[0]}x{model.input_shape[1]} images, {path} is {image.height}x{image.width}"
        )
    return image


def cmd_classify(args) -> int:
    if args.top < 1:
        raise ConfigError("--top must be >= 1")
    model = load_model(args.model)
    image = _load_image_for(model, args.image)
    probs = softmax_probs(forward(model, build_grid_graph(image))[0])
    report = build_report(probs, model.class_names, min(args.top, model.num_classes))
    print(report.text())
    _ensure_out(args.out)
    (args.out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_explain(args) -> int:
    if args.top < 1:
        raise ConfigError("--top must be >= 1")
    if not 0 <= args.threshold <= 1:
        raise ConfigError("--threshold must lie in [0, 1]")
    model = load_model(args.model)
    image = _load_image_for(model, args.image)
    result = explain(model, build_grid_graph(image), mode=args.mode, n=args.top)
    _ensure_out(args.out)
    overlay = args.out / f"overlay.{args.format}"
    write_rgb(overlay, render_overlay(image, result.report.saliency, args.threshold))
    if args.per_layer:
        for k, smap in enumerate(result.layer_maps):
            write_rgb(args.out / f"overlay_layer{k}.{args.format}", render_overlay(image, smap, args.threshold))
    print(result.report.text())
    (args.out / "report.json").write_text(result.report.to_json(overlay.name) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "classify": cmd_classify, "explain": cmd_explain}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("sargnn")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        # non-finite values are detected explicitly, so numpy's warnings would only add noise
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sargnn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"sargnn: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SarGnnError, OSError) as exc:
        print(f"sargnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        root.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
