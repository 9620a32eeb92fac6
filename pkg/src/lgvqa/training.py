"""Fine-tuning loop: softmax cross-entropy over answer choices.

One training thread owns the parameters; evaluation during training reads a
snapshot.  Every run is deterministic given the config seed.  Metrics history
writes to CSV with columns epoch, step, mean_loss, train_acc, val_acc.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .core import ChoiceScores, GuidanceBundle, GuidanceKind, LossRecord, MultiChoiceInstance
from .backends import FusionBackend, parameter_hash
from .errors import EmptyDatasetError, MaskedGoldError, MissingGuidanceError
from .scoring import (
    GUIDED_MODES,
    ScoringMode,
    raw_score_tensors,
    resolve_guidance_text,
)

logger = logging.getLogger(__name__)

# lr grid used with pretrained adapters; the toy backends train from scratch
# and need much larger step sizes
ADAPTER_LR_GRID = (1e-6, 3e-6, 5e-6)
DEFAULT_ADAPTER_LR = 3e-6
DEFAULT_TOY_DUAL_LR = 5e-2
DEFAULT_TOY_FUSION_LR = 1e-2


def default_learning_rate(backend) -> float:
    """Documented lr defaults: per-family rates for toy backends, grid middle otherwise."""
    from .backends import ToyDualEncoder, ToyFusionBackend
    if isinstance(backend, ToyDualEncoder):
        return DEFAULT_TOY_DUAL_LR
    if isinstance(backend, ToyFusionBackend):
        return DEFAULT_TOY_FUSION_LR
    return DEFAULT_ADAPTER_LR


@dataclass
class TrainConfig:
    """Training recipe; defaults follow the reference recipe (batch 8, 8 epochs)."""

    batch_size: int = 8
    epochs: int = 8
    learning_rate: float = DEFAULT_ADAPTER_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    mode: ScoringMode = ScoringMode.UNGUIDED
    guidance_kinds: tuple[GuidanceKind, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.mode = ScoringMode(self.mode)
        if self.guidance_kinds is not None:
            self.guidance_kinds = tuple(GuidanceKind(k) for k in self.guidance_kinds)


@dataclass
class TrainState:
    """Loop state, serializable for resume."""

    step: int = 0
    epoch: int = 0
    running_loss: float = 0.0
    parameter_ref: str = ""
    rng_state: tuple = ()

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "running_loss": self.running_loss,
            "parameter_ref": self.parameter_ref,
            "rng_state": [self.rng_state[0], list(self.rng_state[1]),
                          self.rng_state[2]],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainState":
        version, internal, gauss = data["rng_state"]
        return cls(step=data["step"], epoch=data["epoch"],
                   running_loss=data["running_loss"],
                   parameter_ref=data["parameter_ref"],
                   rng_state=(version, tuple(internal), gauss))


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    step: int
    mean_loss: float
    train_acc: float
    val_acc: float | None


@dataclass
class TrainResult:
    backend: nn.Module
    history: list[EpochMetrics]
    best_epoch: int
    state: TrainState


def choice_cross_entropy(scores: ChoiceScores, gold_index: int) -> LossRecord:
    """Cross-entropy of the normalized scores against the gold choice."""
    if not 0 <= gold_index < len(scores.mask) or not scores.mask[gold_index]:
        raise MaskedGoldError(f"gold index {gold_index} is masked or out of range")
    value = -math.log(scores.normalized[gold_index])
    labels = tuple(1.0 if i == gold_index else 0.0
                   for i in range(len(scores.normalized)))
    return LossRecord(value=value, gold_index=gold_index, class_labels=labels)


def cross_entropy_gradient(scores: ChoiceScores, gold_index: int) -> np.ndarray:
    """d(loss)/d(raw scores) = normalized - one_hot(gold); exactly 0 when masked."""
    if not 0 <= gold_index < len(scores.mask) or not scores.mask[gold_index]:
        raise MaskedGoldError(f"gold index {gold_index} is masked or out of range")
    grad = np.asarray(scores.normalized, dtype=np.float64).copy()
    grad[gold_index] -= 1.0
    return grad


def freeze_policy(backend: nn.Module, mode: ScoringMode | str | None = None,
                  freeze: Sequence[str] = ()) -> dict[str, nn.Parameter]:
    """Named trainable parameters for a backend.

    Fusion backends keep their visual encoder frozen; dual encoders train
    everything by default.  Extra component names in ``freeze`` are excluded
    by prefix.
    """
    excluded = list(freeze)
    if isinstance(backend, FusionBackend):
        excluded.append("image_encoder")

    def is_frozen(name: str) -> bool:
        return any(name == p or name.startswith(p + ".") for p in excluded)

    return {name: param for name, param in backend.named_parameters()
            if not is_frozen(name)}


def _resolve_guides(instances: Sequence[MultiChoiceInstance],
                    bundle_store: Mapping[str, GuidanceBundle] | None,
                    mode: ScoringMode,
                    kinds: Sequence[GuidanceKind] | None) -> dict[str, str | None]:
    guides: dict[str, str | None] = {}
    for instance in instances:
        if mode not in GUIDED_MODES:
            guides[instance.id] = None
            continue
        bundle = bundle_store.get(instance.id)
        if bundle is None:
            logger.warning("no guidance for instance %s; training on unguided text",
                           instance.id)
            guides[instance.id] = None
        else:
            guides[instance.id] = resolve_guidance_text(bundle, kinds)
    return guides


def _accuracy_percent(backend, instances, guides, mode) -> float:
    """Train-loop accuracy over a read-only parameter snapshot."""
    correct = 0
    with torch.no_grad():
        for instance in instances:
            raw = raw_score_tensors(backend, instance, guides[instance.id], mode)
            correct += int(torch.argmax(raw)) == instance.gold_index
    return 100.0 * correct / len(instances)


def train(backend: nn.Module, dataset: Sequence[MultiChoiceInstance],
          config: TrainConfig,
          bundle_store: Mapping[str, GuidanceBundle] | None = None,
          val_dataset: Sequence[MultiChoiceInstance] | None = None,
          freeze: Sequence[str] = ()) -> TrainResult:
    """Run the cross-entropy fine-tuning loop.

    Each epoch visits every instance exactly once in a seed-determined order.
    When a validation set is given, the returned backend carries the
    parameters of the best-validation-accuracy epoch; otherwise the final
    parameters are kept.
    """
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    mode = ScoringMode(config.mode)
    if mode in GUIDED_MODES and bundle_store is None:
        raise MissingGuidanceError(f"mode {mode.value} requires a guidance store")

    guides = _resolve_guides(dataset, bundle_store, mode, config.guidance_kinds)
    val_guides = _resolve_guides(val_dataset, bundle_store, mode,
                                 config.guidance_kinds) if val_dataset else {}
    trainable = freeze_policy(backend, mode, freeze)
    optimizer = torch.optim.AdamW(
        trainable.values(), lr=config.learning_rate,
        betas=(config.beta1, config.beta2), eps=config.eps,
        weight_decay=config.weight_decay)

    rng = random.Random(config.seed)
    history: list[EpochMetrics] = []
    step = 0
    best_epoch = 0
    best_acc = -1.0
    best_state: dict | None = None

    for epoch in range(1, config.epochs + 1):
        order = rng.sample(range(len(dataset)), len(dataset))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            losses = []
            for index in batch:
                instance = dataset[index]
                raw = raw_score_tensors(backend, instance, guides[instance.id], mode)
                losses.append(-torch.log_softmax(raw, dim=0)[instance.gold_index])
            loss = torch.stack(losses).mean()
            loss.backward()
            optimizer.step()
            step += 1
            batch_losses.append(loss.item())

        train_acc = _accuracy_percent(backend, dataset, guides, mode)
        val_acc = None
        if val_dataset:
            val_acc = _accuracy_percent(backend, val_dataset, val_guides, mode)
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_state = copy.deepcopy(backend.state_dict())
        else:
            best_epoch = epoch
        history.append(EpochMetrics(epoch=epoch, step=step,
                                    mean_loss=float(np.mean(batch_losses)),
                                    train_acc=train_acc, val_acc=val_acc))

    if best_state is not None:
        backend.load_state_dict(best_state)

    state = TrainState(step=step, epoch=config.epochs,
                       running_loss=history[-1].mean_loss,
                       parameter_ref=parameter_hash(backend),
                       rng_state=rng.getstate())
    return TrainResult(backend=backend, history=history, best_epoch=best_epoch,
                       state=state)


METRICS_COLUMNS = ("epoch", "step", "mean_loss", "train_acc", "val_acc")


def write_metrics_csv(path: str | Path, history: Sequence[EpochMetrics]) -> None:
    """Metrics history as CSV; floats keep full precision for reproducibility."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in history:
            writer.writerow([
                row.epoch, row.step, repr(row.mean_loss), repr(row.train_acc),
                "" if row.val_acc is None else repr(row.val_acc),
            ])
