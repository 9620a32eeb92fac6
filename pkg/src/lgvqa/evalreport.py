"""Accuracy aggregation, mode comparison and report rendering.

Reports break accuracy down overall, by difficulty and by question type.
Slices with no members are absent rather than zero.  Percentages render with
two decimals; machine output is JSON, human output an aligned text table.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .core import Difficulty, MultiChoiceInstance
from .data import QUESTION_TYPES, question_type
from .errors import (
    EmptyPredictionsError,
    IdSetMismatchError,
    SliceMismatchError,
)
from .scoring import PredictionRecord

_DIFFICULTY_ORDER = (Difficulty.EASY.value, Difficulty.HARD.value,
                     Difficulty.UNSPECIFIED.value)


def slice_order_key(key: str) -> tuple:
    kind, _, value = key.partition(":")
    if kind == "difficulty":
        return (0, _DIFFICULTY_ORDER.index(value))
    if kind == "qtype":
        return (1, QUESTION_TYPES.index(value))
    return (2, key)


@dataclass(frozen=True)
class PredictionEntry:
    """One prediction joined with the instance metadata used for slicing."""

    id: str
    predicted_index: int
    gold_index: int
    difficulty: Difficulty = Difficulty.UNSPECIFIED
    question_type: str = "other"

    @property
    def correct(self) -> bool:
        return self.predicted_index == self.gold_index


def join_with_instances(records: Sequence[PredictionRecord],
                        instances: Sequence[MultiChoiceInstance],
                        ) -> list[PredictionEntry]:
    """Attach difficulty and question type to prediction records by id."""
    by_id = {instance.id: instance for instance in instances}
    entries = []
    for record in records:
        instance = by_id.get(record.id)
        if instance is None:
            raise IdSetMismatchError(
                f"prediction id {record.id!r} not found in the dataset")
        entries.append(PredictionEntry(
            id=record.id,
            predicted_index=record.predicted_index,
            gold_index=record.gold_index,
            difficulty=instance.difficulty,
            question_type=question_type(instance.question),
        ))
    return entries


@dataclass(frozen=True)
class SliceStat:
    accuracy: float
    n: int
    correct: int | None = None
    minimum: float | None = None
    maximum: float | None = None

    def to_dict(self) -> dict:
        out = {"accuracy": self.accuracy, "n": self.n}
        if self.correct is not None:
            out["correct"] = self.correct
        if self.minimum is not None:
            out["min"] = self.minimum
            out["max"] = self.maximum
        return out


@dataclass(frozen=True)
class EvalReport:
    overall: SliceStat
    slices: dict[str, SliceStat]
    per_id_correct: dict[str, bool] | None = None
    n_runs: int = 1

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "slices": {key: self.slices[key].to_dict()
                       for key in sorted(self.slices, key=slice_order_key)},
            "n_runs": self.n_runs,
        }


def _stat(entries: Sequence[PredictionEntry]) -> SliceStat:
    correct = sum(e.correct for e in entries)
    return SliceStat(accuracy=100.0 * correct / len(entries),
                     n=len(entries), correct=correct)


def accuracy(entries: Sequence[PredictionEntry]) -> EvalReport:
    """Aggregate predictions into an accuracy report with slices."""
    if not entries:
        raise EmptyPredictionsError("no predictions to aggregate")
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise IdSetMismatchError("duplicate prediction ids")
    slices: dict[str, SliceStat] = {}
    for difficulty in Difficulty:
        members = [e for e in entries if e.difficulty == difficulty]
        if members:
            slices[f"difficulty:{difficulty.value}"] = _stat(members)
    for qtype in QUESTION_TYPES:
        members = [e for e in entries if e.question_type == qtype]
        if members:
            slices[f"qtype:{qtype}"] = _stat(members)
    return EvalReport(
        overall=_stat(entries),
        slices=slices,
        per_id_correct={e.id: e.correct for e in entries},
    )


def mean_of_runs(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean per slice across runs, min/max retained."""
    if not reports:
        raise EmptyPredictionsError("no reports to average")
    if len(reports) == 1:
        return reports[0]
    keys = set(reports[0].slices)
    for report in reports[1:]:
        if set(report.slices) != keys:
            raise SliceMismatchError(
                "reports cover different slices and cannot be averaged")

    def averaged(stats: Sequence[SliceStat]) -> SliceStat:
        values = [s.accuracy for s in stats]
        return SliceStat(accuracy=sum(values) / len(values), n=stats[0].n,
                         minimum=min(values), maximum=max(values))

    return EvalReport(
        overall=averaged([r.overall for r in reports]),
        slices={key: averaged([r.slices[key] for r in reports]) for key in keys},
        per_id_correct=None,
        n_runs=sum(r.n_runs for r in reports),
    )


@dataclass(frozen=True)
class ModeDelta:
    mode: str
    overall_delta: float
    slice_deltas: dict[str, float]
    gained: tuple[str, ...]
    lost: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "overall_delta": self.overall_delta,
            "slice_deltas": {key: self.slice_deltas[key]
                             for key in sorted(self.slice_deltas, key=slice_order_key)},
            "gained": list(self.gained),
            "lost": list(self.lost),
        }


@dataclass(frozen=True)
class ModeComparison:
    baseline: str
    baseline_overall: float
    deltas: tuple[ModeDelta, ...]

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "baseline_overall": self.baseline_overall,
            "deltas": [d.to_dict() for d in self.deltas],
        }


def compare_modes(reports: Mapping[str, EvalReport],
                  baseline: str = "unguided") -> ModeComparison:
    """Per-slice deltas against the no-guidance baseline plus flipped instances."""
    if len(reports) < 2:
        raise IdSetMismatchError("need at least two reports to compare")
    if baseline not in reports:
        raise IdSetMismatchError(f"baseline mode {baseline!r} not among reports")
    base = reports[baseline]
    if base.per_id_correct is None:
        raise IdSetMismatchError("baseline report carries no per-instance results")
    base_ids = set(base.per_id_correct)

    deltas = []
    for mode in reports:
        if mode == baseline:
            continue
        report = reports[mode]
        if report.per_id_correct is None:
            raise IdSetMismatchError(f"report {mode!r} carries no per-instance results")
        if set(report.per_id_correct) != base_ids:
            raise IdSetMismatchError(
                f"report {mode!r} covers a different instance id set than "
                f"the baseline")
        shared = set(base.slices) & set(report.slices)
        gained = tuple(sorted(
            i for i in base_ids
            if report.per_id_correct[i] and not base.per_id_correct[i]))
        lost = tuple(sorted(
            i for i in base_ids
            if not report.per_id_correct[i] and base.per_id_correct[i]))
        deltas.append(ModeDelta(
            mode=mode,
            overall_delta=report.overall.accuracy - base.overall.accuracy,
            slice_deltas={key: report.slices[key].accuracy - base.slices[key].accuracy
                          for key in shared},
            gained=gained,
            lost=lost,
        ))
    return ModeComparison(baseline=baseline,
                          baseline_overall=base.overall.accuracy,
                          deltas=tuple(deltas))


# --- rendering ----------------------------------------------------------------

def render_report(report: EvalReport) -> str:
    """Aligned text table; slice order is stable across runs."""
    show_range = report.n_runs > 1
    header = f"{'slice':<24} {'acc':>8} {'n':>7}"
    if show_range:
        header += f" {'min':>8} {'max':>8}"
    lines = [header]

    def line(name: str, stat: SliceStat) -> str:
        text = f"{name:<24} {stat.accuracy:>8.2f} {stat.n:>7}"
        if show_range:
            text += f" {stat.minimum:>8.2f} {stat.maximum:>8.2f}"
        return text

    lines.append(line("overall", report.overall))
    for key in sorted(report.slices, key=slice_order_key):
        lines.append(line(key, report.slices[key]))
    return "\n".join(lines)


def render_comparison(comparison: ModeComparison) -> str:
    lines = [f"baseline: {comparison.baseline} "
             f"(overall {comparison.baseline_overall:.2f})"]
    for delta in comparison.deltas:
        lines.append(f"{delta.mode:<24} overall {delta.overall_delta:+8.2f}   "
                     f"flips +{len(delta.gained)}/-{len(delta.lost)}")
        for key in sorted(delta.slice_deltas, key=slice_order_key):
            lines.append(f"  {key:<22} {delta.slice_deltas[key]:+8.2f}")
    return "\n".join(lines)


# --- published reference constants ---------------------------------------------

def load_reference(dataset: str) -> dict:
    """Published reference accuracies for one benchmark (reported, not computed)."""
    payload = importlib.resources.files("lgvqa").joinpath(
        "reference_results.json").read_text(encoding="utf-8")
    tables = json.loads(payload)
    if dataset not in tables or dataset.startswith("_"):
        known = ", ".join(k for k in tables if not k.startswith("_"))
        raise KeyError(f"no reference table for {dataset!r}; known: {known}")
    return tables[dataset]


def render_reference_rows(dataset: str) -> str:
    """Text block of the published reference rows for one benchmark."""
    table = load_reference(dataset)
    slices = table["slices"]
    lines = [f"reference (published results, not computed here): {dataset}",
             f"{'backend':<10} {'mode':<14} " + " ".join(f"{s:>8}" for s in slices)]
    for backend, modes in table["backends"].items():
        for mode, values in modes.items():
            cells = " ".join(f"{values[s]:>8.2f}" for s in slices)
            lines.append(f"{backend:<10} {mode:<14} {cells}")
    qtypes = table.get("question_types")
    if qtypes:
        columns = ("what", "which", "why", "how", "where")
        lines.append("")
        lines.append(f"{'backend':<10} {'mode':<14} "
                     + " ".join(f"{c:>8}" for c in columns))
        for backend, modes in qtypes.items():
            for mode, values in modes.items():
                cells = " ".join(f"{values[c]:>8.2f}" for c in columns)
                lines.append(f"{backend:<10} {mode:<14} {cells}")
    return "\n".join(lines)
