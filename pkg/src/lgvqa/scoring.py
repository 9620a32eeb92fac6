"""Prompt assembly and per-instance choice scoring.

Scoring is pure given backend parameters: the same inputs give bit-identical
outputs, and instances can be scored in parallel.  Predictions dump to JSONL
records {id, mode, raw, normalized, predicted_index, gold_index}.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .backends import DualEncoderBackend, FusionBackend, match, merge_features
from .core import ChoiceScores, GuidanceBundle, GuidanceKind, MultiChoiceInstance
from .errors import (
    AllMaskedError,
    EmptyFieldError,
    MissingGuidanceError,
    ModeBackendMismatchError,
    NoGuidanceAvailableError,
)
from .guidance import FULL_GUIDANCE_ORDER, combine

logger = logging.getLogger(__name__)


class ScoringMode(str, Enum):
    ZERO_SHOT = "zero_shot"
    UNGUIDED = "unguided"
    GUIDED_CONCAT = "guided_concat"
    GUIDED_MERGE = "guided_merge"


GUIDED_MODES = (ScoringMode.GUIDED_CONCAT, ScoringMode.GUIDED_MERGE)


@dataclass(frozen=True)
class PromptAssembly:
    """A rendered question/choice(/guidance) concatenation."""

    question: str
    choice: str
    guidance: str | None
    rendered: str


def assemble_prompt(question: str, choice: str,
                    guidance: str | None = None) -> PromptAssembly:
    """Single-space concatenation of question, choice and optional guidance.

    Empty guidance is treated as absent, so the rendering equals the
    unguided one.
    """
    question = question.strip()
    choice = choice.strip()
    if not question:
        raise EmptyFieldError("question is empty")
    if not choice:
        raise EmptyFieldError("choice is empty")
    guidance = guidance.strip() if guidance else None
    if not guidance:
        guidance = None
    parts = [question, choice] + ([guidance] if guidance else [])
    return PromptAssembly(question=question, choice=choice, guidance=guidance,
                          rendered=" ".join(parts))


def masked_softmax(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over valid slots; masked slots get exactly 0."""
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if raw.shape != mask.shape:
        raise ValueError("raw and mask must have equal shape")
    if not mask.any():
        raise AllMaskedError("all choice slots are masked")
    logits = np.where(mask, raw, -np.inf)
    logits = logits - logits[mask].max()
    exp = np.where(mask, np.exp(logits), 0.0)
    return exp / exp.sum()


def make_choice_scores(raw: Sequence[float],
                       mask: Sequence[bool] | None = None) -> ChoiceScores:
    """Bundle raw scores with their masked softmax."""
    raw = np.asarray(raw, dtype=np.float64)
    if mask is None:
        mask = np.ones(raw.shape, dtype=bool)
    normalized = masked_softmax(raw, mask)
    return ChoiceScores(raw=tuple(raw.tolist()),
                        normalized=tuple(normalized.tolist()),
                        mask=tuple(bool(m) for m in np.asarray(mask)))


def resolve_guidance_text(bundle: GuidanceBundle | None,
                          kinds: Sequence[GuidanceKind] | None = None) -> str | None:
    """Combined guidance string for a bundle, or None when nothing is present.

    With kinds=None every present kind is used in the canonical order;
    explicitly requested kinds go through combine, which warns about
    missing ones.
    """
    if bundle is None:
        return None
    if kinds is None:
        kinds = [k for k in FULL_GUIDANCE_ORDER if k in bundle.entries]
        if not kinds:
            return None
    try:
        return combine(bundle, kinds)
    except NoGuidanceAvailableError:
        return None


def _check_mode_backend(backend, mode: ScoringMode) -> None:
    if mode == ScoringMode.GUIDED_MERGE:
        if not isinstance(backend, FusionBackend):
            raise ModeBackendMismatchError(
                "guided_merge requires a fusion backend")
        if backend.guided_head is None:
            raise ModeBackendMismatchError(
                "guided_merge requires a guided projection head")
    elif not isinstance(backend, (DualEncoderBackend, FusionBackend)):
        raise ModeBackendMismatchError(
            f"not a matching backend: {type(backend).__name__}")


def raw_score_tensors(backend, instance: MultiChoiceInstance,
                      guide_text: str | None,
                      mode: ScoringMode) -> torch.Tensor:
    """Per-choice raw scores as a (n,) tensor, keeping the autograd graph.

    guide_text must already be resolved (see resolve_guidance_text); it is
    ignored by the unguided modes.
    """
    mode = ScoringMode(mode)
    _check_mode_backend(backend, mode)
    scores = []
    for choice in instance.choices:
        plain = assemble_prompt(instance.question, choice)
        if mode in (ScoringMode.ZERO_SHOT, ScoringMode.UNGUIDED):
            scores.append(match(backend, instance.image_ref, plain.rendered))
        elif mode == ScoringMode.GUIDED_CONCAT:
            guided = assemble_prompt(instance.question, choice, guide_text)
            scores.append(match(backend, instance.image_ref, guided.rendered))
        else:  # guided_merge
            guided = assemble_prompt(instance.question, choice, guide_text)
            x1 = backend.features(instance.image_ref, plain.rendered)
            x2 = backend.features(instance.image_ref, guided.rendered)
            scores.append(backend.project_guided(merge_features(x1, x2)))
    return torch.stack(scores)


def score_instance(backend, instance: MultiChoiceInstance,
                   bundle: GuidanceBundle | None = None,
                   mode: ScoringMode = ScoringMode.ZERO_SHOT,
                   guidance_kinds: Sequence[GuidanceKind] | None = None,
                   ) -> ChoiceScores:
    """Score one instance's choices under the given mode.

    Guided modes require a bundle; a bundle without any requested entries
    degrades to the unguided rendering (empty-guidance degeneracy).
    """
    mode = ScoringMode(mode)
    if mode in GUIDED_MODES and bundle is None:
        raise MissingGuidanceError(
            f"mode {mode.value} requires a guidance bundle "
            f"(instance {instance.id!r})")
    guide_text = resolve_guidance_text(bundle, guidance_kinds) \
        if mode in GUIDED_MODES else None
    with torch.no_grad():
        raw = raw_score_tensors(backend, instance, guide_text, mode)
    return make_choice_scores(raw.detach().cpu().numpy())


def predict(scores: ChoiceScores) -> int:
    """Index of the best-scoring valid choice; ties break to the lowest index."""
    raw = np.asarray(scores.raw, dtype=np.float64)
    mask = np.asarray(scores.mask, dtype=bool)
    if not mask.any():
        raise AllMaskedError("all choice slots are masked")
    return int(np.argmax(np.where(mask, raw, -np.inf)))


@dataclass(frozen=True)
class PredictionRecord:
    """One scored instance, as dumped to the predictions JSONL."""

    id: str
    mode: str
    raw: tuple[float, ...]
    normalized: tuple[float, ...]
    predicted_index: int
    gold_index: int

    @property
    def correct(self) -> bool:
        return self.predicted_index == self.gold_index

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "mode": self.mode,
            "raw": list(self.raw),
            "normalized": list(self.normalized),
            "predicted_index": self.predicted_index,
            "gold_index": self.gold_index,
        }


def evaluate_instances(backend, instances: Sequence[MultiChoiceInstance],
                       bundle_store: Mapping[str, GuidanceBundle] | None = None,
                       mode: ScoringMode = ScoringMode.ZERO_SHOT,
                       guidance_kinds: Sequence[GuidanceKind] | None = None,
                       ) -> list[PredictionRecord]:
    """Score and predict every instance; guided modes consult the bundle store."""
    mode = ScoringMode(mode)
    records = []
    for instance in instances:
        bundle = None
        if mode in GUIDED_MODES:
            if bundle_store is None:
                raise MissingGuidanceError(
                    f"mode {mode.value} requires a guidance bundle store")
            bundle = bundle_store.get(instance.id)
            if bundle is None:
                logger.warning("no guidance for instance %s; scoring unguided text",
                               instance.id)
                bundle = GuidanceBundle(instance_id=instance.id)
        scores = score_instance(backend, instance, bundle=bundle, mode=mode,
                                guidance_kinds=guidance_kinds)
        records.append(PredictionRecord(
            id=instance.id,
            mode=mode.value,
            raw=scores.raw,
            normalized=scores.normalized,
            predicted_index=predict(scores),
            gold_index=instance.gold_index,
        ))
    return records


def write_predictions(path: str | Path,
                      records: Iterable[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_record(), ensure_ascii=False) + "\n")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            data = json.loads(line)
            records.append(PredictionRecord(
                id=str(data["id"]),
                mode=data["mode"],
                raw=tuple(float(x) for x in data["raw"]),
                normalized=tuple(float(x) for x in data["normalized"]),
                predicted_index=int(data["predicted_index"]),
                gold_index=int(data["gold_index"]),
            ))
    return records
