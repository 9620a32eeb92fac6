"""Guidance construction, combination and caching.

Guidance strings are plain backend-agnostic text.  Scene graphs serialize
triplets joined by a literal "[SEP]" token; detections aggregate to counted
noun phrases ("two dogs, one girl, three toys").  Generated kinds (rationale,
explanation, caption) come from a provider behind :class:`GeneratorContract`;
the package ships a deterministic stub so training never needs a live
generator.  All guidance is materialized into a JSONL cache keyed by
(instance_id, kind).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .backends import stable_seed, tokenize
from .core import GuidanceBundle, GuidanceKind
from .errors import (
    CacheIOError,
    EmptyDetectionError,
    GenerationInputError,
    GuidanceConflictError,
    NoGuidanceAvailableError,
    SchemaError,
)

logger = logging.getLogger(__name__)

SEP_TOKEN = "[SEP]"

# canonical combination orders
ALL_GUIDANCE_ORDER = (
    GuidanceKind.RATIONALE,
    GuidanceKind.EXPLANATION,
    GuidanceKind.CAPTION,
    GuidanceKind.SCENE_GRAPH,
    GuidanceKind.OBJECTS,
)
CSO_ORDER = (GuidanceKind.CAPTION, GuidanceKind.SCENE_GRAPH, GuidanceKind.OBJECTS)
CSOL_ORDER = CSO_ORDER + (GuidanceKind.LECTURE,)
FULL_GUIDANCE_ORDER = ALL_GUIDANCE_ORDER + (GuidanceKind.LECTURE,)

_KIND_PRESETS = {
    "all": ALL_GUIDANCE_ORDER,
    "cso": CSO_ORDER,
    "csol": CSOL_ORDER,
}


def parse_kinds(spec: str | Sequence[GuidanceKind]) -> tuple[GuidanceKind, ...]:
    """Parse a preset name ("all", "cso", "csol") or comma list of kinds."""
    if not isinstance(spec, str):
        return tuple(GuidanceKind(k) for k in spec)
    preset = _KIND_PRESETS.get(spec.strip().lower())
    if preset is not None:
        return preset
    try:
        return tuple(GuidanceKind(part.strip()) for part in spec.split(",") if part.strip())
    except ValueError as exc:
        raise SchemaError(f"unknown guidance kind in {spec!r}: {exc}") from exc


@dataclass(frozen=True)
class SceneTriplet:
    """(subject, predicate, object) visual relation."""

    subject: str
    predicate: str
    object: str

    def __post_init__(self) -> None:
        for name in ("subject", "predicate", "object"):
            if not getattr(self, name).strip():
                raise SchemaError(f"scene triplet has empty {name}")


@dataclass(frozen=True)
class DetectionSet:
    """Detected object labels, order of first appearance preserved."""

    labels: tuple[str, ...]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for label in self.labels:
            out[label] = out.get(label, 0) + 1
        return out


def serialize_scene_graph(triplets: Sequence[SceneTriplet]) -> str | None:
    """Join triplets as "subj pred obj [SEP] subj pred obj ...".

    An empty list means no guidance entry and returns None.
    """
    if not triplets:
        return None
    parts = [f"{t.subject} {t.predicate} {t.object}" for t in triplets]
    return f" {SEP_TOKEN} ".join(parts)


_COUNT_WORDS = (
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen", "nineteen", "twenty",
)
_WORD_TO_COUNT = {word: i + 1 for i, word in enumerate(_COUNT_WORDS)}

_IRREGULAR_PLURALS = {
    "person": "people",
    "child": "children",
    "man": "men",
    "woman": "women",
}
_ES_SUFFIXES = ("s", "x", "z", "sh", "ch")


def count_word(count: int) -> str:
    """English word for 1..20, digits otherwise."""
    if 1 <= count <= 20:
        return _COUNT_WORDS[count - 1]
    return str(count)


def pluralize(label: str) -> str:
    if label in _IRREGULAR_PLURALS:
        return _IRREGULAR_PLURALS[label]
    if label.endswith(_ES_SUFFIXES):
        return label + "es"
    return label + "s"


def serialize_objects(det: DetectionSet) -> str:
    """Counted noun phrases, comma-joined in first-appearance order."""
    counts = det.counts()
    if not counts:
        raise EmptyDetectionError("no detected objects to serialize")
    terms = []
    for label, count in counts.items():
        name = pluralize(label) if count > 1 else label
        terms.append(f"{count_word(count)} {name}")
    return ", ".join(terms)


def parse_object_description(text: str) -> list[tuple[str, int]]:
    """Inverse of serialize_objects: (surface label, count) per term.

    Labels are returned as written (possibly pluralized); counts written as
    words are recovered exactly for 1..20, digits otherwise.
    """
    out = []
    for term in text.split(", "):
        head, _, label = term.partition(" ")
        if not label:
            raise SchemaError(f"malformed object term {term!r}")
        count = _WORD_TO_COUNT.get(head)
        if count is None:
            try:
                count = int(head)
            except ValueError:
                raise SchemaError(f"malformed count {head!r} in {term!r}")
        out.append((label, count))
    return out


def combine(bundle: GuidanceBundle, kinds: Sequence[GuidanceKind]) -> str:
    """Single-space concatenation of the present entries in the given order.

    Missing kinds are skipped with a warning; nothing present at all raises
    NoGuidanceAvailableError.
    """
    parts = []
    for kind in kinds:
        kind = GuidanceKind(kind)
        text = bundle.get(kind)
        if text is None:
            logger.warning("bundle %s: guidance kind %s missing, skipped",
                           bundle.instance_id, kind.value)
            continue
        parts.append(text)
    if not parts:
        raise NoGuidanceAvailableError(
            f"bundle {bundle.instance_id!r} has none of the requested kinds")
    return " ".join(parts)


# --- generated guidance -----------------------------------------------------

@dataclass(frozen=True)
class GeneratorContract:
    """Provider interface for generated guidance.

    generate(image_ref, question, prefix) must return non-empty text and be
    deterministic under a fixed decode seed.  Real generator plugins (frozen
    language model conditioned on visual prompts) implement this same
    callable; decode settings live in the adapter, determinism is the only
    requirement pinned here.
    """

    kind: GuidanceKind
    generate: Callable[[str, str, str | None], str]


_STOPWORDS = frozenset(
    "a an the is are was were be been being do does did what which why how "
    "where when who whom whose this that these those of in on at to for "
    "with and or it its from by as".split())

_STUB_TEMPLATES: dict[GuidanceKind, tuple[str, ...]] = {
    GuidanceKind.RATIONALE: (
        "rationale: the image shows {}",
        "rationale: judging by the {} in view",
    ),
    GuidanceKind.EXPLANATION: (
        "explanation: the answer follows from the {}",
        "explanation: this is supported by the {}",
    ),
    GuidanceKind.CAPTION: (
        "a photo of {}",
        "an image of {}",
    ),
    GuidanceKind.SCENE_GRAPH: (
        "{} " + SEP_TOKEN + " scene",
    ),
    GuidanceKind.OBJECTS: (
        "one {}",
    ),
    GuidanceKind.LECTURE: (
        "lecture: background facts about {}",
    ),
}


def _salient_tokens(question: str, limit: int = 4) -> list[str]:
    tokens = tokenize(question)
    if not tokens:
        raise GenerationInputError(f"question has no tokens: {question!r}")
    seen = []
    for token in tokens:
        if token not in _STOPWORDS and token not in seen:
            seen.append(token)
    if not seen:
        seen = tokens
    return seen[:limit]


def stub_generator(kind: GuidanceKind, seed: int = 0) -> GeneratorContract:
    """Deterministic templated stand-in for a real guidance generator."""
    kind = GuidanceKind(kind)
    templates = _STUB_TEMPLATES[kind]

    def generate(image_ref: str, question: str, prefix: str | None = None) -> str:
        if not question or not question.strip():
            raise GenerationInputError("empty question")
        tokens = _salient_tokens(question)
        pick = stable_seed("stub", seed, kind.value, image_ref, question,
                           prefix or "") % len(templates)
        text = templates[pick].format(" ".join(tokens))
        if prefix and prefix.strip():
            text = f"{prefix.strip()} {text}"
        return text

    return GeneratorContract(kind=kind, generate=generate)


# --- cache -------------------------------------------------------------------

class GuidanceCache:
    """Guidance text store keyed by (instance_id, kind).

    File format: one JSON object per line with keys instance_id, kind, text,
    source.  Round-trips are bit-exact (UTF-8, no ASCII escaping).  Re-putting
    a key with different text is a conflict unless overwrite is requested.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[tuple[str, GuidanceKind], tuple[str, str]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[str, GuidanceKind]) -> bool:
        instance_id, kind = key
        return (instance_id, GuidanceKind(kind)) in self._entries

    def put(self, instance_id: str, kind: GuidanceKind, text: str,
            source: str = "stub", overwrite: bool = False) -> None:
        kind = GuidanceKind(kind)
        if not isinstance(text, str) or not text:
            raise SchemaError(
                f"cache put for ({instance_id}, {kind.value}): empty text")
        key = (instance_id, kind)
        existing = self._entries.get(key)
        if existing is not None and existing[0] != text and not overwrite:
            raise GuidanceConflictError(
                f"cache already holds different text for "
                f"({instance_id}, {kind.value}); pass overwrite to replace")
        self._entries[key] = (text, source)

    def get(self, instance_id: str, kind: GuidanceKind) -> str | None:
        entry = self._entries.get((instance_id, GuidanceKind(kind)))
        return entry[0] if entry else None

    def instance_ids(self) -> list[str]:
        seen = []
        for instance_id, _ in self._entries:
            if instance_id not in seen:
                seen.append(instance_id)
        return seen

    def bundle_for(self, instance_id: str) -> GuidanceBundle:
        entries = {kind: text for (iid, kind), (text, _) in self._entries.items()
                   if iid == instance_id}
        return GuidanceBundle(instance_id=instance_id, entries=entries)

    def bundle_store(self) -> dict[str, GuidanceBundle]:
        """Mapping instance_id -> bundle, as consumed by scoring."""
        return {iid: self.bundle_for(iid) for iid in self.instance_ids()}

    def save(self, path: str | Path | None = None) -> None:
        path = Path(path) if path is not None else self.path
        if path is None:
            raise CacheIOError("no cache path given")
        try:
            with open(path, "w", encoding="utf-8") as fh:
                for (instance_id, kind), (text, source) in self._entries.items():
                    fh.write(json.dumps(
                        {"instance_id": instance_id, "kind": kind.value,
                         "text": text, "source": source},
                        ensure_ascii=False) + "\n")
        except OSError as exc:
            raise CacheIOError(f"cannot write cache {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "GuidanceCache":
        cache = cls(path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        cache.put(str(record["instance_id"]),
                                  GuidanceKind(record["kind"]),
                                  record["text"],
                                  source=record.get("source", "stub"))
                    except (KeyError, ValueError, TypeError) as exc:
                        raise CacheIOError(
                            f"{path}:{lineno}: bad cache line: {exc}") from exc
        except OSError as exc:
            raise CacheIOError(f"cannot read cache {path}: {exc}") from exc
        return cache


# --- ingestion of detector/scene-graph outputs -------------------------------

def ingest_scene_graph_file(path: str | Path) -> dict[str, list[SceneTriplet]]:
    """Read a JSONL of {image_ref, triplets: [[s, p, o], ...]}."""
    out: dict[str, list[SceneTriplet]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                triplets = [SceneTriplet(subject=str(s), predicate=str(p),
                                         object=str(o))
                            for s, p, o in record["triplets"]]
                out[str(record["image_ref"])] = triplets
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad triplet line: {exc}") from exc
    return out


def ingest_detection_file(path: str | Path) -> dict[str, DetectionSet]:
    """Read a JSONL of {image_ref, labels: [...]}."""
    out: dict[str, DetectionSet] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                labels = tuple(str(label) for label in record["labels"])
                out[str(record["image_ref"])] = DetectionSet(labels=labels)
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad detection line: {exc}") from exc
    return out
