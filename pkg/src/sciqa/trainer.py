"""Two-stage patch training: pretrain on every patch, score the training
set with the pretrained model, keep the patches it already predicts well,
and fine-tune on those.

A patch whose prediction error |pred - dmos| is small carries a label its
content can actually explain; patches whose local quality deviates far from
the image-level score mostly inject label noise, so each image keeps only
the max(1, floor(ratio * N)) patches with the smallest error. Optimization
is Adam under a step-decay learning rate clamped at a floor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import PatchBatch
from .network import (Model, ModelConfig, NumericalError, backward, build_model,
                      forward, objective, score_in_chunks, trainable_names)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

DEFAULT_SELECT_RATIO = 0.7

PRETRAIN_STAGE = 1
FINETUNE_STAGE = 2


class DivergenceError(RuntimeError):
    """Training hit non-finite numbers. Carries the last finite model."""

    def __init__(self, message: str, model: Model, history: list[dict]):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 1e-4
    lr_decay: float = 0.1
    decay_interval_epochs: int = 10
    min_lr: float = 1e-13
    total_epochs: int = 200
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if not self.base_lr >= self.min_lr > 0:
            raise ValueError(
                f"need base_lr >= min_lr > 0, got {self.base_lr} and {self.min_lr}")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if self.decay_interval_epochs < 1:
            raise ValueError("decay_interval_epochs must be >= 1")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON


def init_adam(model: Model) -> AdamState:
    names = trainable_names(model)
    return AdamState(
        m={n: np.zeros_like(model.tensors[n]) for n in names},
        v={n: np.zeros_like(model.tensors[n]) for n in names},
    )


def adam_step(state: AdamState, tensors: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float) -> None:
    """One in-place Adam update with bias correction over grads' tensors."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for {name}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        tensors[name] -= (lr * update).astype(tensors[name].dtype, copy=False)


def lr_at(schedule: TrainSchedule, epoch: int) -> float:
    """Step-decayed learning rate for an epoch, clamped at the floor."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside 0..{schedule.total_epochs - 1}")
    steps = epoch // schedule.decay_interval_epochs
    return max(schedule.min_lr, schedule.base_lr * schedule.lr_decay ** steps)


@dataclass
class StageResult:
    model: Model
    history: list[dict]  # per epoch: {"epoch", "stage", "lr", "loss"}
    checkpoint_id: str | None = None


def _epoch_order(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, stage, epoch]).permutation(n)


def _run_stage(model: Model, batch: PatchBatch, schedule: TrainSchedule,
               stage: int, stage_name: str,
               ref_patches: np.ndarray | None = None) -> StageResult:
    schedule.validate()
    n = len(batch)
    if n == 0:
        raise ValueError("empty training set")
    if model.config.mode == "FR":
        if ref_patches is None:
            raise ValueError("full-reference training needs reference patches")
        if len(ref_patches) != n:
            raise ValueError("reference patches not aligned with training patches")
    state = init_adam(model)
    history: list[dict] = []
    last_good = model.copy()
    for epoch in range(schedule.total_epochs):
        lr = lr_at(schedule, epoch)
        order = _epoch_order(schedule.seed, stage, epoch, n)
        losses = []
        try:
            for start in range(0, n, schedule.batch_size):
                idx = order[start:start + schedule.batch_size]
                x = batch.patches[idx]
                y = batch.labels[idx].astype(np.float64)
                xr = None if ref_patches is None else ref_patches[idx]
                fwd = forward(model, x, ref_patches=xr, mode="train")
                loss = objective(model, fwd.scores, y)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite objective {loss!r}")
                grads = backward(model, fwd, y)
                adam_step(state, model.tensors, grads, lr)
                losses.append(loss)
        except NumericalError as exc:
            raise DivergenceError(
                f"{stage_name} diverged in epoch {epoch}: {exc}",
                model=last_good, history=history) from exc
        history.append({"epoch": epoch, "stage": stage_name, "lr": lr,
                        "loss": float(np.mean(losses))})
        last_good = model.copy()
    return StageResult(model=model, history=history)


def pretrain(model: Model, batch: PatchBatch, schedule: TrainSchedule,
             ref_patches: np.ndarray | None = None) -> StageResult:
    """Stage 1: train on every patch of the training images."""
    return _run_stage(model, batch, schedule, PRETRAIN_STAGE, "pretrain",
                      ref_patches)


def finetune(model: Model, batch: PatchBatch, schedule: TrainSchedule,
             ref_patches: np.ndarray | None = None) -> StageResult:
    """Stage 2: continue from pretrained weights with a fresh optimizer."""
    return _run_stage(model, batch, schedule, FINETUNE_STAGE, "finetune",
                      ref_patches)


def effectiveness(pred: float, dmos: float) -> float:
    """How well a patch's predicted score matches its image label."""
    if not (math.isfinite(pred) and math.isfinite(dmos)):
        raise ValueError(f"non-finite effectiveness inputs: {pred}, {dmos}")
    return abs(pred - dmos)


def kept_count(ratio: float, n: int) -> int:
    """max(1, floor(ratio * n)); the epsilon keeps products like 0.29 * 100
    from landing a hair under their intended integer."""
    return max(1, math.floor(ratio * n + 1e-9))


@dataclass
class ImageSelection:
    kept: np.ndarray  # global indices of kept patches, ascending
    discarded: np.ndarray  # global indices of discarded patches, ascending
    threshold: float  # effectiveness of the last kept patch
    total: int


@dataclass
class SelectionResult:
    per_image: dict[str, ImageSelection]
    ratio_target: float
    ratio_achieved: float
    effectiveness: np.ndarray = field(repr=False)

    def kept_indices(self) -> np.ndarray:
        """All kept global indices in stable input order."""
        if not self.per_image:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([s.kept for s in self.per_image.values()]))


def select_patches(scores: np.ndarray, labels: np.ndarray,
                   source_ids: np.ndarray, ratio: float) -> SelectionResult:
    """Keep each image's lowest-effectiveness patches at the given ratio.

    Ties at the threshold break by input order (stable sort), so the result
    is deterministic for a fixed input ordering.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    source_ids = np.asarray(source_ids)
    if not (scores.shape == labels.shape == source_ids.shape) or scores.ndim != 1:
        raise ValueError("scores, labels, and source_ids must be equal-length 1-D")
    if scores.size == 0:
        raise ValueError("empty selection input")
    if not np.all(np.isfinite(scores)) or not np.all(np.isfinite(labels)):
        raise ValueError("non-finite selection inputs")

    errors = np.abs(scores - labels)
    per_image: dict[str, ImageSelection] = {}
    order_seen: dict[str, None] = {}
    for sid in source_ids:
        order_seen.setdefault(str(sid), None)
    kept_total = 0
    for sid in order_seen:
        image_idx = np.flatnonzero(source_ids == sid)
        n = image_idx.size
        k = kept_count(ratio, n)
        local_order = np.argsort(errors[image_idx], kind="stable")
        kept = np.sort(image_idx[local_order[:k]])
        discarded = np.sort(image_idx[local_order[k:]])
        per_image[sid] = ImageSelection(
            kept=kept,
            discarded=discarded,
            threshold=float(errors[image_idx[local_order[k - 1]]]),
            total=n,
        )
        kept_total += k
    return SelectionResult(
        per_image=per_image,
        ratio_target=ratio,
        ratio_achieved=kept_total / scores.size,
        effectiveness=errors,
    )


def export_selection_csv(selection: SelectionResult, batch: PatchBatch,
                         path: str | Path) -> None:
    """One row per training patch: source, grid cell, effectiveness, kept
    flag, and the image's selection threshold."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["source_id", "grid_row", "grid_col", "effectiveness",
                         "kept", "threshold"])
        for sid, sel in selection.per_image.items():
            kept_set = set(sel.kept.tolist())
            for i in sorted(kept_set | set(sel.discarded.tolist())):
                writer.writerow([
                    sid,
                    int(batch.grid_positions[i, 0]),
                    int(batch.grid_positions[i, 1]),
                    repr(float(selection.effectiveness[i])),
                    int(i in kept_set),
                    repr(sel.threshold),
                ])


@dataclass
class TwoStageResult:
    stage1: StageResult
    stage2: StageResult
    selection: SelectionResult


def train_two_stage(config: ModelConfig, batch: PatchBatch,
                    schedule: TrainSchedule,
                    select_ratio: float = DEFAULT_SELECT_RATIO,
                    ref_patches: np.ndarray | None = None,
                    init_seed: int = 0,
                    out_dir: str | Path | None = None) -> TwoStageResult:
    """Full pipeline: pretrain, score, select, fine-tune.

    Stage 2 starts from a copy of the stage-1 weights, so both models stay
    available for comparison. When ``out_dir`` is given, both checkpoints,
    the selection CSV, and a JSON training log are written there.
    """
    model = build_model(config, seed=init_seed)
    stage1 = pretrain(model, batch, schedule, ref_patches)

    scores = score_in_chunks(stage1.model, batch, ref_patches=ref_patches)
    selection = select_patches(scores, batch.labels, batch.source_ids,
                               select_ratio)
    kept = selection.kept_indices()
    selected = batch.take(kept)
    selected_refs = None if ref_patches is None else ref_patches[kept]

    stage2 = finetune(stage1.model.copy(), selected, schedule, selected_refs)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stage1.checkpoint_id = save_checkpoint(
            stage1.model, out_dir / "stage1.ckpt",
            meta={"stage": "pretrain", "epochs": schedule.total_epochs})
        stage2.checkpoint_id = save_checkpoint(
            stage2.model, out_dir / "stage2.ckpt",
            meta={"stage": "finetune", "epochs": schedule.total_epochs,
                  "parent_id": stage1.checkpoint_id,
                  "selection_ratio_target": selection.ratio_target,
                  "selection_ratio_achieved": selection.ratio_achieved})
        export_selection_csv(selection, batch, out_dir / "selection.csv")
        write_training_log(out_dir / "training_log.json", stage1, stage2,
                           selection)
    return TwoStageResult(stage1=stage1, stage2=stage2, selection=selection)


def write_training_log(path: str | Path, stage1: StageResult,
                       stage2: StageResult,
                       selection: SelectionResult) -> None:
    log = {
        "stages": [
            {"name": "pretrain", "checkpoint_id": stage1.checkpoint_id,
             "epochs": stage1.history},
            {"name": "finetune", "checkpoint_id": stage2.checkpoint_id,
             "parent_id": stage1.checkpoint_id,
             "selection_ratio_target": selection.ratio_target,
             "selection_ratio_achieved": selection.ratio_achieved,
             "epochs": stage2.history},
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(log, handle, indent=2, sort_keys=True)
        handle.write("\n")
