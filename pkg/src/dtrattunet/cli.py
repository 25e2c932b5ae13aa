"""Operator-facing command surface: train, evaluate, predict, overlay, summarize.

Run configuration files are YAML documents with flat dotted keys, e.g.::

    task: binary
    model.image_size: 224
    model.variant: d-trattunet
    train.epochs: 60
    data.root: /corpora/ct
    output.dir: runs/baseline
    seeds: [0, 1, 2, 3, 4]

Unknown keys are rejected. Precedence: file < --set overrides < dedicated
flags (--variant, --seeds). Exit codes: 0 success, 1 runtime failure,
2 configuration or input error. The environment variable
``DTRATTUNET_OUTPUT_ROOT`` re-roots the output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image

from .config import (
    TASKS,
    ConfigError,
    ModelConfig,
    SplitSpec,
    TrainConfig,
    config_hash,
    infection_classes_for_task,
)
from .data import DatasetError, SliceSample, file_stem, load_dataset, preprocess, read_image_slices, split
from .evaluation import (
    aggregate_reports,
    discretize,
    evaluate,
    render_overlay,
    write_report_csv,
    write_report_json,
)
from .model import (
    VARIANT_FLAGS,
    build_variant,
    config_for_variant,
    layer_manifest,
    manifest_json,
    manifest_text,
    variant_name,
)
from .training import load_checkpoint, repeat_runs, restore_model

OUTPUT_ROOT_ENV = "DTRATTUNET_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

_INT = ("int", int)
_FLOAT = ("float", float)
_BOOL = ("bool", bool)
_STR = ("str", str)
_INTS = ("list of ints", lambda v: tuple(int(x) for x in v))
_FLOATS = ("list of floats", lambda v: tuple(float(x) for x in v))

_SCHEMA: dict[str, tuple[str, object]] = {
    "task": _STR,
    "model.input_channels": _INT,
    "model.image_size": _INT,
    "model.patch_size": _INT,
    "model.embed_dim": _INT,
    "model.depth": _INT,
    "model.heads": _INT,
    "model.mlp_dim": _INT,
    "model.tap_layers": _INTS,
    "model.encoder_channels": _INTS,
    "model.variant": _STR,
    "model.use_attention_gates": _BOOL,
    "model.use_dual_decoder": _BOOL,
    "model.use_transformer_encoder": _BOOL,
    "model.pretrained_transformer": _STR,
    "train.epochs": _INT,
    "train.base_lr": _FLOAT,
    "train.decay_epochs": _INTS,
    "train.decay_factor": _FLOAT,
    "train.batch_size": _INT,
    "train.betas": _FLOATS,
    "train.eps": _FLOAT,
    "train.weight_decay": _FLOAT,
    "train.infection_loss_weight": _FLOAT,
    "train.lung_loss_weight": _FLOAT,
    "train.runs": _INT,
    "train.validation_fraction": _FLOAT,
    "train.augment": _BOOL,
    "data.root": _STR,
    "data.train_fraction": _FLOAT,
    "data.split_seed": _INT,
    "data.granularity": _STR,
    "data.hu_window": _FLOATS,
    "output.dir": _STR,
    "seeds": _INTS,
}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    split: SplitSpec
    data_root: str | None
    hu_window: tuple[float, float] | None
    output_dir: Path
    document: dict


def _coerce(doc: dict) -> dict:
    unknown = sorted(set(doc) - set(_SCHEMA))
    if unknown:
        raise ConfigError("unknown configuration keys: " + ", ".join(unknown))
    out = {}
    for key, value in doc.items():
        label, caster = _SCHEMA[key]
        if value is None:
            out[key] = None
            continue
        try:
            out[key] = caster(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected {label}, got {value!r}") from exc
    return out


def _section(doc: dict, prefix: str) -> dict:
    return {k.split(".", 1)[1]: v for k, v in doc.items() if k.startswith(prefix + ".") and v is not None}


def build_run_config(doc: dict) -> RunConfig:
    """Resolve a flat dotted-key document into validated configuration objects."""
    doc = _coerce(doc)
    task = doc.get("task", "binary")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")

    model_kwargs = _section(doc, "model")
    variant = model_kwargs.pop("variant", None)
    model_kwargs["num_infection_classes"] = infection_classes_for_task(task)
    model = ModelConfig(**{k: v for k, v in model_kwargs.items()})
    if variant is not None:
        explicit = {
            k: model_kwargs[k]
            for k in ("use_attention_gates", "use_dual_decoder", "use_transformer_encoder")
            if k in model_kwargs
        }
        model = replace(config_for_variant(variant, model), **explicit)

    train_kwargs = _section(doc, "train")
    seeds = doc.get("seeds")
    runs = train_kwargs.pop("runs", None)
    if seeds is None:
        seeds = tuple(range(runs)) if runs is not None else TrainConfig.seeds
    if runs is None:
        runs = len(seeds)
    train = TrainConfig(task=task, runs=runs, seeds=tuple(seeds), **train_kwargs)

    split_spec = SplitSpec(
        train_fraction=doc.get("data.train_fraction", 0.7),
        seed=doc.get("data.split_seed", 0),
        granularity=doc.get("data.granularity", "slice"),
    )
    hu_window = doc.get("data.hu_window")
    if hu_window is not None and len(hu_window) != 2:
        raise ConfigError("data.hu_window must hold exactly two values")

    output_dir = _resolve_output_dir(doc.get("output.dir", "runs"))
    return RunConfig(
        model=model,
        train=train,
        split=split_spec,
        data_root=doc.get("data.root"),
        hu_window=hu_window,
        output_dir=output_dir,
        document=doc,
    )


def _resolve_output_dir(configured: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    path = Path(configured)
    if root:
        return Path(root) / (path.name if path.is_absolute() else path)
    return path


def _load_document(args) -> dict:
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file does not exist: {path}")
        loaded = yaml.safe_load(path.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
        doc.update(loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        doc[key.strip()] = yaml.safe_load(raw)
    if getattr(args, "variant", None):
        doc["model.variant"] = args.variant
    if getattr(args, "seeds", None):
        doc["seeds"] = [int(s) for s in args.seeds.split(",")]
    return doc


def _apply_determinism(args) -> None:
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)


def _print_hash(value: str) -> None:
    print(f"config-hash {value}")


def cmd_train(args) -> int:
    rc = build_run_config(_load_document(args))
    _apply_determinism(args)
    _print_hash(config_hash(rc.model, rc.train.task))

    if args.dry_run:
        model = build_variant(rc.model, seed=args.seed)
        print(f"variant {variant_name(rc.model)}")
        print(manifest_text(layer_manifest(model)))
        return EXIT_OK

    if not rc.data_root:
        raise ConfigError("data.root is required to train")
    samples = load_dataset(rc.data_root)
    if not samples:
        raise DatasetError(f"no samples found under {rc.data_root}")
    train_samples, test_samples = split(samples, rc.split)

    rc.output_dir.mkdir(parents=True, exist_ok=True)
    run_manifest = {
        "config_hash": config_hash(rc.model, rc.train.task),
        "variant": variant_name(rc.model),
        "document": {k: list(v) if isinstance(v, tuple) else v for k, v in rc.document.items()},
        "overrides": list(args.set or []),
        "train_samples": len(train_samples),
        "test_samples": len(test_samples),
    }
    (rc.output_dir / "run_manifest.json").write_text(json.dumps(run_manifest, indent=2))

    states, reports = repeat_runs(
        rc.model,
        rc.train,
        train_samples,
        rc.output_dir,
        test_samples=test_samples,
        hu_window=rc.hu_window,
    )
    for seed, state in zip(rc.train.seeds, states):
        print(f"run seed={seed}: best val F1 {state.best_val_f1:.2f} ({state.global_step} steps)")

    if reports:
        for seed, report in zip(rc.train.seeds, reports):
            write_report_json(rc.output_dir / f"run-{seed}" / "test_report.json", report)
        final = aggregate_reports(reports) if len(reports) > 1 else reports[0]
        write_report_csv(rc.output_dir / "report.csv", final)
        write_report_json(rc.output_dir / "report.json", final)
        print(f"aggregate report written to {rc.output_dir / 'report.csv'}")
    return EXIT_OK


def _carve(samples: list[SliceSample], args) -> list[SliceSample]:
    if args.split == "all":
        return samples
    spec = SplitSpec(args.train_fraction, seed=args.split_seed, granularity=args.granularity)
    train_side, test_side = split(samples, spec)
    return train_side if args.split == "train" else test_side


def cmd_evaluate(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    manifest = payload["manifest"]
    if args.task and args.task != manifest["task"]:
        raise ConfigError(
            f"checkpoint was trained for task {manifest['task']!r}, not {args.task!r}"
        )
    _apply_determinism(args)
    _print_hash(manifest["config_hash"])
    model = restore_model(payload)

    samples = _carve(load_dataset(args.data), args)
    report = evaluate(
        model,
        samples,
        payload["model_config"],
        per_image=args.per_image,
        include_lung=args.include_lung,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "report.csv", report)
    write_report_json(out / "report.json", report)
    if args.per_image:
        with open(out / "per_image.csv", "w") as fh:
            fh.write("source_id,class,dice\n")
            for entry in report.classes:
                for source_id, dice in entry.per_image_dice or []:
                    fh.write(f"{source_id},{entry.label},{dice:.4f}\n")
    for entry in report.classes:
        print(f"{entry.label}: F1 {entry.f1:.2f}  Dice {entry.dice:.2f}  IoU {entry.iou:.2f}")
    return EXIT_OK


def _gather_inputs(paths: list[str]) -> list[Path]:
    files: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            files.extend(
                sorted(q for q in p.iterdir() if q.name.endswith((".png", ".nii", ".nii.gz")))
            )
        else:
            files.append(p)
    return files


def _predictions(model, model_config: ModelConfig, path: Path):
    """Yield (name, original image, label map at original size, lung map or None)."""
    slices = read_image_slices(path)
    multi = len(slices) > 1
    for k, image in enumerate(slices):
        name = f"{file_stem(path)}_{k:03d}" if multi else file_stem(path)
        sample = SliceSample(
            image=np.asarray(image, dtype=np.float32),
            source_id=name,
            scan_id=file_stem(path),
        )
        inputs, _ = preprocess(sample, model_config)
        with torch.no_grad():
            out = model(inputs[None])
        labels = _labels_at(out.infection, model_config.task, image.shape)
        lung = None
        if out.lung is not None:
            lung = _labels_at(out.lung, "binary", image.shape)
        yield name, sample.image, labels, lung


def _labels_at(logits: torch.Tensor, task: str, shape) -> np.ndarray:
    labels = discretize(logits, task)[0]
    resized = F.interpolate(
        torch.from_numpy(labels)[None, None].float(), size=tuple(shape), mode="nearest-exact"
    )
    return resized[0, 0].long().numpy()


def _run_on_images(args, writer) -> int:
    payload = load_checkpoint(args.checkpoint)
    _apply_determinism(args)
    _print_hash(payload["manifest"]["config_hash"])
    model = restore_model(payload)
    model_config = payload["model_config"]

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = _gather_inputs(args.images)
    if not files:
        raise ConfigError("no input images given")
    written = 0
    for path in files:
        try:
            for name, image, labels, lung in _predictions(model, model_config, path):
                writer(outdir, name, image, labels, lung)
                written += 1
        except (DatasetError, FileNotFoundError, OSError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
    if written == 0:
        print("error: no inputs could be processed", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {written} file(s) to {outdir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    def writer(outdir: Path, name: str, image, labels, lung) -> None:
        Image.fromarray(labels.astype(np.uint8), mode="L").save(outdir / f"{name}_mask.png")

    return _run_on_images(args, writer)


def cmd_overlay(args) -> int:
    def writer(outdir: Path, name: str, image, labels, lung) -> None:
        contour = lung if args.lung_contour else None
        rgb = render_overlay(image, labels, lung_mask=contour)
        Image.fromarray(rgb, mode="RGB").save(outdir / f"{name}_overlay.png")

    return _run_on_images(args, writer)


def cmd_summarize(args) -> int:
    if args.checkpoint:
        payload = load_checkpoint(args.checkpoint)
        model_config = payload["model_config"]
        model = restore_model(payload)
        _print_hash(payload["manifest"]["config_hash"])
    else:
        rc = build_run_config(_load_document(args))
        model_config = rc.model
        model = build_variant(model_config, seed=args.seed)
        _print_hash(config_hash(model_config, rc.train.task))
    entries = layer_manifest(model)
    text = manifest_json(entries) if args.json else manifest_text(entries)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"manifest written to {args.out}")
    else:
        print(f"variant {variant_name(model_config)}")
        print(text)
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="seed for any stochastic step")
    parser.add_argument(
        "--deterministic", action="store_true", help="force deterministic torch kernels"
    )


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration (flat dotted keys)")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config key"
    )
    parser.add_argument("--variant", help=f"architecture variant: {', '.join(sorted(VARIANT_FLAGS))}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtrattunet",
        description="Dual-decoder hybrid transformer segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training protocol for each seed")
    _add_config_options(p)
    p.add_argument("--seeds", help="comma-separated run seeds, e.g. 0,1,2")
    p.add_argument("--dry-run", action="store_true", help="validate config, print the layer manifest, write nothing")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labeled corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus root in the documented layout")
    p.add_argument("--task", choices=TASKS, help="refuse the checkpoint unless it matches")
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--granularity", choices=("slice", "scan"), default="slice")
    p.add_argument("--per-image", action="store_true", help="also write per-image Dice rows")
    p.add_argument("--include-lung", action="store_true", help="add a lung row (dual models)")
    p.add_argument("--out", default="evaluation", help="report output directory")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write label-map PNGs for input slices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("images", nargs="+", help="image files or directories")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay", help="write color overlays (green GGO, red consolidation)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--lung-contour", action="store_true", help="draw the predicted lung contour")
    p.add_argument("images", nargs="+", help="image files or directories")
    _add_common(p)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("summarize", help="print the per-layer parameter manifest")
    _add_config_options(p)
    p.add_argument("--checkpoint", help="summarize a checkpoint instead of a config")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p.add_argument("--out", help="write the manifest to a file")
    _add_common(p)
    p.set_defaults(func=cmd_summarize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
