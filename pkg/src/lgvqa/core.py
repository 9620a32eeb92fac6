"""Domain types shared by every module.

All types here are immutable after construction and safe to share across
threads.  The canonical on-disk encoding for instances is JSONL with keys
exactly: id, image_ref, question, choices, gold_index, difficulty, dataset.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import (
    ChoiceCountError,
    DuplicateChoiceError,
    GoldIndexError,
    GuidanceConflictError,
    SchemaError,
)

MIN_CHOICES = 2
MAX_CHOICES = 5

CANONICAL_KEYS = ("id", "image_ref", "question", "choices", "gold_index",
                  "difficulty", "dataset")


class Difficulty(str, Enum):
    EASY = "easy"
    HARD = "hard"
    UNSPECIFIED = "unspecified"


class DatasetName(str, Enum):
    AOKVQA = "aokvqa"
    SCIENCEQA = "scienceqa"
    VSR = "vsr"
    ICONQA = "iconqa"
    SYNTHETIC = "synthetic"


class GuidanceKind(str, Enum):
    RATIONALE = "rationale"
    EXPLANATION = "explanation"
    CAPTION = "caption"
    SCENE_GRAPH = "scene_graph"
    OBJECTS = "objects"
    LECTURE = "lecture"


def normalize_whitespace(text: str) -> str:
    """Collapse internal whitespace runs to single spaces and strip ends."""
    return re.sub(r"\s+", " ", text).strip()


@dataclass(frozen=True)
class MultiChoiceInstance:
    """One multi-choice question about one image."""

    id: str
    image_ref: str
    question: str
    choices: tuple[str, ...]
    gold_index: int
    difficulty: Difficulty = Difficulty.UNSPECIFIED
    dataset: DatasetName = DatasetName.SYNTHETIC

    def __post_init__(self) -> None:
        n = len(self.choices)
        if not MIN_CHOICES <= n <= MAX_CHOICES:
            raise ChoiceCountError(
                f"instance {self.id!r}: got {n} choices, expected "
                f"{MIN_CHOICES}..{MAX_CHOICES}")
        if not 0 <= self.gold_index < n:
            raise GoldIndexError(
                f"instance {self.id!r}: gold_index {self.gold_index} out of "
                f"range for {n} choices")
        normalized = [normalize_whitespace(c) for c in self.choices]
        if len(set(normalized)) != n:
            raise DuplicateChoiceError(
                f"instance {self.id!r}: choices not distinct after "
                f"whitespace normalization")

    @property
    def gold_choice(self) -> str:
        return self.choices[self.gold_index]

    def to_record(self) -> dict:
        """Canonical JSON-ready dict with keys in canonical order."""
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "question": self.question,
            "choices": list(self.choices),
            "gold_index": self.gold_index,
            "difficulty": self.difficulty.value,
            "dataset": self.dataset.value,
        }


def validate_instance(raw: Mapping) -> MultiChoiceInstance:
    """Build a validated instance from an untyped record.

    Raises SchemaError for missing or mistyped fields and the specific
    ChoiceCountError / GoldIndexError / DuplicateChoiceError for invariant
    violations.
    """
    def need(key: str, types) -> object:
        if key not in raw:
            raise SchemaError(f"missing field: {key}")
        value = raw[key]
        if not isinstance(value, types):
            raise SchemaError(
                f"field {key}: expected {types}, got {type(value).__name__}")
        return value

    instance_id = str(need("id", (str, int)))
    image_ref = str(need("image_ref", (str, int)))
    question = need("question", str)
    choices = need("choices", (list, tuple))
    if not all(isinstance(c, str) for c in choices):
        raise SchemaError("field choices: every choice must be a string")
    gold_index = need("gold_index", int)
    if isinstance(gold_index, bool):
        raise SchemaError("field gold_index: expected int, got bool")

    difficulty = raw.get("difficulty", Difficulty.UNSPECIFIED.value)
    try:
        difficulty = Difficulty(difficulty)
    except ValueError:
        raise SchemaError(f"field difficulty: unknown value {difficulty!r}")
    dataset = raw.get("dataset", DatasetName.SYNTHETIC.value)
    try:
        dataset = DatasetName(dataset)
    except ValueError:
        raise SchemaError(f"field dataset: unknown value {dataset!r}")

    return MultiChoiceInstance(
        id=instance_id,
        image_ref=image_ref,
        question=question,
        choices=tuple(choices),
        gold_index=gold_index,
        difficulty=difficulty,
        dataset=dataset,
    )


def instance_to_json(instance: MultiChoiceInstance) -> str:
    return json.dumps(instance.to_record(), ensure_ascii=False)


def instance_from_json(line: str) -> MultiChoiceInstance:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON line: {exc}") from exc
    return validate_instance(record)


def write_instances(path: str | Path, instances: Iterable[MultiChoiceInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(instance_to_json(instance) + "\n")


def read_instances(path: str | Path) -> list[MultiChoiceInstance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(instance_from_json(line))
    return out


def _has_control_chars(text: str) -> bool:
    return any(unicodedata.category(ch) == "Cc" for ch in text)


@dataclass(frozen=True)
class GuidanceBundle:
    """Per-instance guidance strings keyed by kind.

    Entries must be non-empty and contain no control characters so they
    round-trip bit-exactly through the JSONL cache format.
    """

    instance_id: str
    entries: Mapping[GuidanceKind, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        clean: dict[GuidanceKind, str] = {}
        for kind, text in dict(self.entries).items():
            kind = GuidanceKind(kind)
            if not isinstance(text, str) or not text:
                raise SchemaError(
                    f"bundle {self.instance_id!r}: entry {kind.value} is empty")
            if _has_control_chars(text):
                raise SchemaError(
                    f"bundle {self.instance_id!r}: entry {kind.value} contains "
                    f"control characters")
            clean[kind] = text
        object.__setattr__(self, "entries", clean)

    def get(self, kind: GuidanceKind) -> str | None:
        return self.entries.get(GuidanceKind(kind))

    def kinds(self) -> tuple[GuidanceKind, ...]:
        return tuple(self.entries.keys())

    def merge(self, other: "GuidanceBundle") -> "GuidanceBundle":
        """Union of two bundles; overlapping kinds are a conflict."""
        if other.instance_id != self.instance_id:
            raise GuidanceConflictError(
                f"cannot merge bundles for different instances "
                f"({self.instance_id!r} vs {other.instance_id!r})")
        overlap = set(self.entries) & set(other.entries)
        if overlap:
            names = ", ".join(sorted(k.value for k in overlap))
            raise GuidanceConflictError(
                f"bundle {self.instance_id!r}: overlapping kinds: {names}")
        merged = dict(self.entries)
        merged.update(other.entries)
        return GuidanceBundle(instance_id=self.instance_id, entries=merged)


@dataclass(frozen=True)
class ChoiceScores:
    """Raw matching scores and their masked softmax over one instance's choices.

    normalized[i] is exactly 0 where mask[i] is False and the valid entries
    sum to 1.
    """

    raw: tuple[float, ...]
    normalized: tuple[float, ...]
    mask: tuple[bool, ...]

    def __post_init__(self) -> None:
        if not (len(self.raw) == len(self.normalized) == len(self.mask)):
            raise ValueError("raw, normalized and mask must have equal length")

    @property
    def n_valid(self) -> int:
        return sum(self.mask)


@dataclass(frozen=True)
class LossRecord:
    """Cross-entropy loss for one instance: value = -log(normalized[gold])."""

    value: float
    gold_index: int
    class_labels: tuple[float, ...]
