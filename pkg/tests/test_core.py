import json

import pytest

from lgvqa.core import (
    ChoiceScores,
    DatasetName,
    Difficulty,
    GuidanceBundle,
    GuidanceKind,
    MultiChoiceInstance,
    instance_from_json,
    instance_to_json,
    normalize_whitespace,
    read_instances,
    validate_instance,
    write_instances,
)
from lgvqa.errors import (
    ChoiceCountError,
    DuplicateChoiceError,
    GoldIndexError,
    GuidanceConflictError,
    SchemaError,
)


def make_record(**overrides):
    record = {
        "id": "x",
        "image_ref": "img-1",
        "question": "What is it?",
        "choices": ["a", "b", "c", "d"],
        "gold_index": 1,
        "difficulty": "easy",
        "dataset": "synthetic",
    }
    record.update(overrides)
    return record


class TestValidateInstance:
    def test_valid_record(self):
        instance = validate_instance(make_record())
        assert instance.id == "x"
        assert instance.gold_index == 1
        assert instance.choices == ("a", "b", "c", "d")
        assert instance.difficulty is Difficulty.EASY

    def test_single_choice_rejected(self):
        with pytest.raises(ChoiceCountError):
            validate_instance(make_record(choices=["a"], gold_index=0))

    def test_six_choices_rejected(self):
        with pytest.raises(ChoiceCountError):
            validate_instance(make_record(choices=list("abcdef"), gold_index=0))

    def test_gold_index_out_of_range(self):
        with pytest.raises(GoldIndexError):
            validate_instance(make_record(choices=["a", "b"], gold_index=2))

    def test_duplicates_after_whitespace_normalization(self):
        with pytest.raises(DuplicateChoiceError):
            validate_instance(make_record(choices=["a  b", "a b", "c", "d"]))

    def test_missing_field(self):
        record = make_record()
        del record["question"]
        with pytest.raises(SchemaError, match="question"):
            validate_instance(record)

    def test_defaults(self):
        record = make_record()
        del record["difficulty"]
        del record["dataset"]
        instance = validate_instance(record)
        assert instance.difficulty is Difficulty.UNSPECIFIED
        assert instance.dataset is DatasetName.SYNTHETIC

    def test_unknown_difficulty(self):
        with pytest.raises(SchemaError):
            validate_instance(make_record(difficulty="brutal"))


class TestCanonicalEncoding:
    def test_round_trip_field_equality(self):
        instance = validate_instance(make_record())
        again = instance_from_json(instance_to_json(instance))
        assert again == instance

    def test_key_order_is_canonical(self):
        instance = validate_instance(make_record())
        keys = list(json.loads(instance_to_json(instance)))
        assert keys == ["id", "image_ref", "question", "choices", "gold_index",
                        "difficulty", "dataset"]

    def test_file_round_trip(self, tmp_path):
        instances = [validate_instance(make_record(id=f"i{k}")) for k in range(5)]
        path = tmp_path / "data.jsonl"
        write_instances(path, instances)
        assert read_instances(path) == instances

    def test_unicode_survives(self, tmp_path):
        instance = validate_instance(make_record(question="Qu'est-ce que c'est 🦜?"))
        path = tmp_path / "data.jsonl"
        write_instances(path, [instance])
        assert read_instances(path)[0].question == "Qu'est-ce que c'est 🦜?"


class TestNormalizeWhitespace:
    def test_collapses_runs(self):
        assert normalize_whitespace("  a \t b\n c ") == "a b c"


class TestGuidanceBundle:
    def test_merge_disjoint_is_union(self):
        a = GuidanceBundle("i", {GuidanceKind.CAPTION: "c"})
        b = GuidanceBundle("i", {GuidanceKind.OBJECTS: "o"})
        merged = a.merge(b)
        assert merged.get(GuidanceKind.CAPTION) == "c"
        assert merged.get(GuidanceKind.OBJECTS) == "o"

    def test_merge_overlap_conflicts(self):
        a = GuidanceBundle("i", {GuidanceKind.CAPTION: "c1"})
        b = GuidanceBundle("i", {GuidanceKind.CAPTION: "c2"})
        with pytest.raises(GuidanceConflictError):
            a.merge(b)

    def test_merge_different_instances_conflicts(self):
        a = GuidanceBundle("i", {GuidanceKind.CAPTION: "c"})
        b = GuidanceBundle("j", {GuidanceKind.OBJECTS: "o"})
        with pytest.raises(GuidanceConflictError):
            a.merge(b)

    def test_empty_entry_rejected(self):
        with pytest.raises(SchemaError):
            GuidanceBundle("i", {GuidanceKind.CAPTION: ""})

    def test_control_characters_rejected(self):
        with pytest.raises(SchemaError):
            GuidanceBundle("i", {GuidanceKind.CAPTION: "line\nbreak"})

    def test_kind_coercion_from_string(self):
        bundle = GuidanceBundle("i", {"caption": "c"})
        assert bundle.get(GuidanceKind.CAPTION) == "c"


class TestChoiceScores:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ChoiceScores(raw=(0.0,), normalized=(1.0,), mask=(True, True))

    def test_n_valid(self):
        scores = ChoiceScores(raw=(0.0, 1.0, 2.0), normalized=(0.2, 0.8, 0.0),
                              mask=(True, True, False))
        assert scores.n_valid == 2


class TestInstanceImmutability:
    def test_frozen(self):
        instance = validate_instance(make_record())
        with pytest.raises(AttributeError):
            instance.question = "other"
