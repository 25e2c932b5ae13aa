"""Optimization protocol: weighted dual-task loss, step schedule, epoch loop,
repeated-run orchestration, checkpointing, and seeding.

One training run owns its model exclusively (parameters and norm statistics
mutate). The repeated-run protocol executes runs sequentially here; they are
independent given disjoint output directories and may be parallelized as
separate processes.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError, ModelConfig, SplitSpec, TrainConfig, config_hash
from .data import DatasetError, SliceSample, augment, preprocess, split
from .evaluation import MetricsReport, evaluate
from .model import DTrAttUnet, build_variant

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainState:
    """Progress tracker for one run; epoch and step only ever advance."""

    epoch: int = 0
    global_step: int = 0
    best_val_f1: float = float("-inf")
    best_checkpoint: str | None = None
    last_checkpoint: str | None = None
    checkpoints: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    epoch_records: list[dict] = field(default_factory=list)


def combine_task_losses(infection_loss, lung_loss, weights: tuple[float, float]):
    """Weighted sum of the two task losses; exactly w0*infection + w1*lung."""
    return weights[0] * infection_loss + weights[1] * lung_loss


def joint_loss(
    infection_logits: torch.Tensor,
    lung_logits: torch.Tensor | None,
    infection_target: torch.Tensor,
    lung_target: torch.Tensor | None,
    config: TrainConfig,
) -> torch.Tensor:
    """Weighted dual-task training objective.

    Binary task: sigmoid BCE on the 1-channel infection logits. Multi-class:
    softmax cross-entropy on 3 channels. The lung branch is always 1-channel
    sigmoid BCE. Losses are pixel-and-batch means combined with the configured
    weights; without a lung decoder the infection loss carries weight 1.
    """
    expected = 1 if config.task == "binary" else 3
    if infection_logits.ndim != 4 or infection_logits.shape[1] != expected:
        raise ValueError(
            f"{config.task} task expects (B,{expected},H,W) infection logits, "
            f"got {tuple(infection_logits.shape)}"
        )
    if infection_target.shape != (
        infection_logits.shape[0],
        infection_logits.shape[2],
        infection_logits.shape[3],
    ):
        raise ValueError(
            f"infection target shape {tuple(infection_target.shape)} does not match "
            f"logits {tuple(infection_logits.shape)}"
        )
    if config.task == "binary":
        infection = F.binary_cross_entropy_with_logits(
            infection_logits, infection_target.to(infection_logits.dtype).unsqueeze(1)
        )
    else:
        if int(infection_target.max()) >= 3:
            raise ValueError("multiclass targets must hold labels in {0, 1, 2}")
        infection = F.cross_entropy(infection_logits, infection_target.long())

    if lung_logits is None:
        return infection

    if lung_logits.shape[1] != 1:
        raise ValueError(f"lung logits must have 1 channel, got {lung_logits.shape[1]}")
    if lung_target is None:
        raise ValueError("lung logits provided but lung target is missing")
    if lung_target.shape != (lung_logits.shape[0], lung_logits.shape[2], lung_logits.shape[3]):
        raise ValueError(
            f"lung target shape {tuple(lung_target.shape)} does not match "
            f"logits {tuple(lung_logits.shape)}"
        )
    lung = F.binary_cross_entropy_with_logits(
        lung_logits, lung_target.to(lung_logits.dtype).unsqueeze(1)
    )
    return combine_task_losses(infection, lung, config.loss_weights)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule: the base rate decays by the configured
    factor at each decay epoch (0-based boundary, see README)."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside schedule range 0..{config.epochs - 1}")
    lr = config.base_lr
    for boundary in config.decay_epochs:
        if epoch >= boundary:
            lr *= config.decay_factor
    return lr


def save_checkpoint(
    path,
    model: DTrAttUnet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    state: TrainState,
    optimizer: torch.optim.Optimizer | None = None,
    metrics: dict | None = None,
) -> None:
    """Single-file container: parameter blobs plus a JSON-shaped manifest."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash(model_config, train_config.task),
        "epoch": state.epoch,
        "task": train_config.task,
        "metrics": metrics or {},
        "loss_weights": list(train_config.loss_weights),
    }
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "manifest": manifest,
        "model_config": asdict(model_config),
        "train_config": asdict(train_config),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "train_state": {
            "epoch": state.epoch,
            "global_step": state.global_step,
            "best_val_f1": state.best_val_f1,
            "best_checkpoint": state.best_checkpoint,
            "checkpoints": list(state.checkpoints),
        },
    }
    torch.save(payload, path)


def load_checkpoint(
    path,
    expect_model_config: ModelConfig | None = None,
    expect_task: str | None = None,
    override_config_check: bool = False,
) -> dict:
    """Load a checkpoint payload, refusing config or task mismatches.

    The stored manifest hash is verified against the stored config; when
    ``expect_model_config``/``expect_task`` are given they must produce the
    same hash unless ``override_config_check`` is set.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint does not exist: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"{path}: unsupported checkpoint format {payload.get('format_version')!r}"
        )
    stored_config = ModelConfig(**payload["model_config"])
    stored_task = payload["manifest"]["task"]
    stored_hash = payload["manifest"]["config_hash"]
    if config_hash(stored_config, stored_task) != stored_hash:
        raise ConfigError(f"{path}: manifest hash does not match stored configuration")
    if not override_config_check:
        expected_config = expect_model_config or stored_config
        expected_task = expect_task or stored_task
        if config_hash(expected_config, expected_task) != stored_hash:
            raise ConfigError(
                f"{path}: checkpoint was trained for task {stored_task!r} with a different "
                "configuration; pass override_config_check=True to load anyway"
            )
    payload["model_config"] = stored_config
    payload["train_config"] = TrainConfig(**payload["train_config"])
    return payload


def restore_model(payload: dict) -> DTrAttUnet:
    """Rebuild the model a checkpoint payload describes and load its weights."""
    model = build_variant(payload["model_config"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


def _require_targets(samples: list[SliceSample], dual: bool, purpose: str) -> None:
    missing = [s.source_id for s in samples if s.infection_mask is None]
    if dual:
        missing += [s.source_id for s in samples if s.lung_mask is None]
    if missing:
        raise DatasetError(
            f"{purpose} samples lack required masks: " + ", ".join(sorted(set(missing)))
        )


def _make_batch(pairs, idxs, dual: bool, do_augment: bool, seed: int, epoch: int):
    inputs, infection, lung = [], [], []
    for i in idxs:
        image, targets = pairs[i]
        if do_augment:
            rng = np.random.default_rng((seed, epoch, int(i)))
            image, targets = augment(image, targets, rng)
        inputs.append(image)
        infection.append(targets["infection"])
        if dual:
            lung.append(targets["lung"])
    return (
        torch.stack(inputs),
        torch.stack(infection),
        torch.stack(lung) if dual else None,
    )


def _validation_summary(report: MetricsReport) -> dict[str, float]:
    return {
        "val_f1": float(np.mean([c.f1 for c in report.classes])),
        "val_dice": float(np.mean([c.dice for c in report.classes])),
        "val_iou": float(np.mean([c.iou for c in report.classes])),
    }


def train(
    model: DTrAttUnet,
    train_samples: list[SliceSample],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir,
    seed: int = 0,
    val_samples: list[SliceSample] | None = None,
    hu_window: tuple[float, float] | None = None,
    resume_from=None,
    log_name: str = "log.jsonl",
) -> TrainState:
    """Run the epoch loop with augmentation, the step schedule, and per-epoch
    validation; keeps the best-by-validation-F1 and the last checkpoints.

    When no validation samples are given, a seeded fraction of the training
    samples is carved off (``config.validation_fraction``); with the fraction
    at 0 validation falls back to the training samples themselves. A
    non-finite loss aborts the run with a diagnostic snapshot on disk.
    """
    if model_config.task != config.task:
        raise ConfigError(
            f"model is configured for {model_config.task!r} but training for {config.task!r}"
        )
    if not train_samples:
        raise DatasetError("no training samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if val_samples is None:
        if config.validation_fraction > 0:
            train_samples, val_samples = split(
                train_samples,
                SplitSpec(1.0 - config.validation_fraction, seed=seed, granularity="slice"),
            )
        else:
            val_samples = train_samples

    dual = model.lung_decoder is not None
    _require_targets(train_samples, dual, "training")
    _require_targets(val_samples, False, "validation")

    pairs = [preprocess(s, model_config, hu_window=hu_window) for s in train_samples]

    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=lr_at(0, config),
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )

    state = TrainState()
    start_epoch = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expect_model_config=model_config, expect_task=config.task)
        model.load_state_dict(payload["model_state"])
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        saved = payload["train_state"]
        state.epoch = saved["epoch"]
        state.global_step = saved["global_step"]
        state.best_val_f1 = saved["best_val_f1"]
        state.best_checkpoint = saved["best_checkpoint"]
        state.checkpoints = list(saved["checkpoints"])
        start_epoch = saved["epoch"] + 1

    log_path = out_dir / log_name
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"

    with open(log_path, "a") as log:
        for epoch in range(start_epoch, config.epochs):
            started = time.time()
            lr = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            model.train()
            order = np.random.default_rng((seed, epoch)).permutation(len(pairs))
            epoch_losses = []
            for batch_start in range(0, len(pairs), config.batch_size):
                idxs = order[batch_start : batch_start + config.batch_size]
                inputs, infection_t, lung_t = _make_batch(
                    pairs, idxs, dual, config.augment, seed, epoch
                )
                out = model(inputs)
                loss = joint_loss(out.infection, out.lung, infection_t, lung_t, config)
                if not torch.isfinite(loss):
                    snapshot = {
                        "step": state.global_step,
                        "epoch": epoch,
                        "lr": lr,
                        "batch_sha256": hashlib.sha256(inputs.numpy().tobytes()).hexdigest(),
                    }
                    (out_dir / "divergence.json").write_text(json.dumps(snapshot, indent=2))
                    raise TrainingDiverged(
                        f"non-finite loss at step {state.global_step} (epoch {epoch}, lr {lr})",
                        snapshot,
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                value = float(loss.detach())
                epoch_losses.append(value)
                state.step_losses.append(value)
                state.global_step += 1

            state.epoch = epoch
            summary = _validation_summary(
                evaluate(model, val_samples, model_config, hu_window=hu_window)
            )
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                **summary,
                "seconds": time.time() - started,
            }
            state.epoch_records.append(record)
            log.write(json.dumps(record) + "\n")
            log.flush()

            if summary["val_f1"] > state.best_val_f1:
                state.best_val_f1 = summary["val_f1"]
                state.best_checkpoint = str(best_path)
                save_checkpoint(
                    best_path, model, model_config, config, state, optimizer, metrics=summary
                )
                state.checkpoints.append(
                    {"path": str(best_path), "epoch": epoch, "val_f1": summary["val_f1"]}
                )
            save_checkpoint(
                last_path, model, model_config, config, state, optimizer, metrics=summary
            )
            state.last_checkpoint = str(last_path)

    return state


def repeat_runs(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_samples: list[SliceSample],
    out_root,
    val_samples: list[SliceSample] | None = None,
    test_samples: list[SliceSample] | None = None,
    hu_window: tuple[float, float] | None = None,
) -> tuple[list[TrainState], list[MetricsReport]]:
    """Run the protocol once per configured seed.

    Each run builds a freshly seeded model and trains in its own directory;
    when test samples are given the best checkpoint of every run is evaluated
    on them. Different seeds produce different rng streams throughout.
    """
    out_root = Path(out_root)
    states, reports = [], []
    for run_seed in train_config.seeds:
        model = build_variant(model_config, seed=run_seed)
        state = train(
            model,
            train_samples,
            model_config,
            train_config,
            out_root / f"run-{run_seed}",
            seed=run_seed,
            val_samples=val_samples,
            hu_window=hu_window,
        )
        states.append(state)
        if test_samples is not None:
            payload = load_checkpoint(state.best_checkpoint)
            best_model = restore_model(payload)
            reports.append(
                evaluate(best_model, test_samples, model_config, hu_window=hu_window)
            )
    return states, reports
