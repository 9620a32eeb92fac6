"""Dataset adapters producing validated multi-choice instances.

Each loader takes the dataset's native JSON layout (documented per function),
never silently drops a record (skips are counted and logged) and returns
instances that pass validation.  The synthetic generator plants a learnable
image/answer correlation so toy backends can overfit at desk scale.
"""

from __future__ import annotations

import json
import logging
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import DEFAULT_TEXT_BUCKETS, stable_seed, token_bucket, tokenize
from .core import (
    DatasetName,
    Difficulty,
    GuidanceKind,
    MultiChoiceInstance,
    validate_instance,
)
from .errors import SchemaError

logger = logging.getLogger(__name__)

QUESTION_TYPES = ("what", "which", "why", "how", "where", "other")

_FIRST_TOKEN_RE = re.compile(r"[a-zA-Z]+")


def question_type(question: str) -> str:
    """Question category from the lowercased first token.

    Only a leading wh-word counts: "At what time..." is "other".
    """
    match = _FIRST_TOKEN_RE.search(question.strip())
    first = match.group(0).lower() if match else ""
    return first if first in QUESTION_TYPES[:-1] else "other"


def _record_skips(skipped: list | None, record_id: str, reason: str) -> None:
    logger.warning("skipping record %s: %s", record_id, reason)
    if skipped is not None:
        skipped.append((record_id, reason))


def load_aokvqa(path: str | Path, rationale_store=None,
                skipped: list | None = None) -> list[MultiChoiceInstance]:
    """Load an A-OKVQA-shaped JSON array.

    Expected record fields: question_id, image_id, question, choices (exactly
    four), correct_choice_idx, difficult_direct_answer, optional rationales.
    The hard flag maps to difficulty; gold rationales go to the store (an
    object with put(instance_id, kind, text, source=...)) when one is given.
    """
    with open(path, "r", encoding="utf-8") as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise SchemaError(f"{path}: expected a JSON array of records")
    instances = []
    for i, record in enumerate(records):
        record_id = str(record.get("question_id", f"record-{i}"))
        try:
            choices = record["choices"]
        except (KeyError, TypeError):
            raise SchemaError(f"{path}: record {record_id}: missing field choices")
        if not isinstance(choices, list) or len(choices) != 4:
            from .errors import ChoiceCountError
            raise ChoiceCountError(
                f"{path}: record {record_id}: expected exactly 4 choices, "
                f"got {len(choices) if isinstance(choices, list) else choices!r}")
        for field in ("image_id", "question", "correct_choice_idx"):
            if field not in record:
                raise SchemaError(f"{path}: record {record_id}: missing field {field}")
        hard = bool(record.get("difficult_direct_answer", False))
        instance = validate_instance({
            "id": record_id,
            "image_ref": str(record["image_id"]),
            "question": record["question"],
            "choices": choices,
            "gold_index": record["correct_choice_idx"],
            "difficulty": (Difficulty.HARD if hard else Difficulty.EASY).value,
            "dataset": DatasetName.AOKVQA.value,
        })
        rationales = record.get("rationales") or []
        if rationale_store is not None and rationales:
            rationale_store.put(record_id, GuidanceKind.RATIONALE,
                                " ".join(rationales), source="plugin:dataset")
        instances.append(instance)
    return instances


VSR_QUESTION_TEMPLATE = "true or false: {caption}"
VSR_CHOICES = ("true", "false")


def load_vsr(path: str | Path, skipped: list | None = None,
             ) -> list[MultiChoiceInstance]:
    """Load a VSR-shaped JSONL of {image, caption, label}.

    The caption is framed by VSR_QUESTION_TEMPLATE; choices are fixed
    ["true", "false"], so a true label maps to gold index 0.
    """
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            record = json.loads(line)
            record_id = str(record.get("id", f"vsr-{i:06d}"))
            for field in ("image", "caption", "label"):
                if field not in record:
                    raise SchemaError(f"{path}: record {record_id}: missing field {field}")
            label = record["label"]
            if not isinstance(label, (bool, int)) or label not in (0, 1):
                raise SchemaError(
                    f"{path}: record {record_id}: label must be boolean or 0/1")
            instances.append(validate_instance({
                "id": record_id,
                "image_ref": str(record["image"]),
                "question": VSR_QUESTION_TEMPLATE.format(caption=record["caption"]),
                "choices": list(VSR_CHOICES),
                "gold_index": 0 if label else 1,
                "dataset": DatasetName.VSR.value,
            }))
    return instances


def load_scienceqa(path: str | Path, lecture_store=None,
                   skipped: list | None = None) -> list[MultiChoiceInstance]:
    """Load a ScienceQA-shaped JSON object mapping id -> problem.

    Expected problem fields: question, choices (2..5), answer, image (file
    name or null), optional lecture.  Problems without an image are skipped
    (this is a vision benchmark) and counted; lectures go to the store when
    one is given.
    """
    with open(path, "r", encoding="utf-8") as fh:
        problems = json.load(fh)
    if not isinstance(problems, dict):
        raise SchemaError(f"{path}: expected a JSON object of id -> problem")
    instances = []
    n_skipped_no_image = 0
    for qid, record in problems.items():
        for field in ("question", "choices", "answer"):
            if field not in record:
                raise SchemaError(f"{path}: problem {qid}: missing field {field}")
        if not record.get("image"):
            n_skipped_no_image += 1
            _record_skips(skipped, qid, "no image context")
            continue
        instance = validate_instance({
            "id": str(qid),
            "image_ref": f"{qid}/{record['image']}",
            "question": record["question"],
            "choices": record["choices"],
            "gold_index": record["answer"],
            "dataset": DatasetName.SCIENCEQA.value,
        })
        lecture = record.get("lecture")
        if lecture_store is not None and lecture and lecture.strip():
            lecture_store.put(str(qid), GuidanceKind.LECTURE, lecture.strip(),
                              source="plugin:dataset")
        instances.append(instance)
    if n_skipped_no_image:
        logger.info("scienceqa: skipped %d problems without image context",
                    n_skipped_no_image)
    return instances


def load_iconqa(path: str | Path, skipped: list | None = None,
                ) -> list[MultiChoiceInstance]:
    """Load an IconQA text-choice JSONL of {id?, image, question, choices, answer}."""
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            record = json.loads(line)
            record_id = str(record.get("id", f"iconqa-{i:06d}"))
            for field in ("image", "question", "choices", "answer"):
                if field not in record:
                    raise SchemaError(f"{path}: record {record_id}: missing field {field}")
            instances.append(validate_instance({
                "id": record_id,
                "image_ref": str(record["image"]),
                "question": record["question"],
                "choices": record["choices"],
                "gold_index": record["answer"],
                "dataset": DatasetName.ICONQA.value,
            }))
    return instances


_SYNTH_QUESTION_TEMPLATES = (
    "What object is planted in scene {tag}?",
    "Which item belongs to picture {tag}?",
    "Why does frame {tag} look this way?",
    "How is the marked thing in view {tag} named?",
    "Where would you file the content of shot {tag}?",
)


def synth_dataset(seed: int, n: int, n_choices: int = 4,
                  n_buckets: int = DEFAULT_TEXT_BUCKETS,
                  ) -> list[MultiChoiceInstance]:
    """Deterministic synthetic instances with a planted image/answer signal.

    Every image gets a unique marker word as its gold choice; distractors are
    markers of other images.  Marker words are chosen so their hash buckets
    collide neither with each other nor with the question template words,
    which makes the dataset separable (hence overfittable) for the toy
    backends by construction.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= n_choices <= 5:
        raise ValueError("n_choices must be in 2..5")
    if n < n_choices:
        raise ValueError("need at least n_choices instances to draw distractors")

    reserved = {token_bucket(tok, n_buckets)
                for template in _SYNTH_QUESTION_TEMPLATES
                for tok in tokenize(template.format(tag="t0"))}
    reserved.update(token_bucket(f"t{k}", n_buckets) for k in range(n))
    markers: list[str] = []
    candidate = 0
    while len(markers) < n:
        name = f"marker{seed}x{candidate}"
        candidate += 1
        bucket = token_bucket(name, n_buckets)
        if bucket in reserved:
            continue
        reserved.add(bucket)
        markers.append(name)

    rng = np.random.default_rng(stable_seed("synth", seed, n, n_choices))
    instances = []
    for k in range(n):
        others = [m for m in markers if m != markers[k]]
        picks = rng.choice(len(others), size=n_choices - 1, replace=False)
        choices = [others[int(p)] for p in picks]
        gold_index = int(rng.integers(n_choices))
        choices.insert(gold_index, markers[k])
        template = _SYNTH_QUESTION_TEMPLATES[k % len(_SYNTH_QUESTION_TEMPLATES)]
        instances.append(MultiChoiceInstance(
            id=f"synth-{seed}-{k:04d}",
            image_ref=f"toy://synth/{seed}/{k}",
            question=template.format(tag=f"t{k}"),
            choices=tuple(choices),
            gold_index=gold_index,
            difficulty=Difficulty.EASY if k % 2 == 0 else Difficulty.HARD,
            dataset=DatasetName.SYNTHETIC,
        ))
    return instances
