import json

import pytest
from hypothesis import given, strategies as st

from gerea.data_io import (Sample, build_manifest, canonical_answer, load_dataset, read_artifact, read_json,
                           write_artifact, write_json)
from gerea.exceptions import ArtifactError, ConcurrentWriteError, DatasetError


def _okvqa(root, questions, annotations, coco="val2014"):
    root.mkdir(parents=True, exist_ok=True)
    (root / f"OpenEnded_mscoco_{coco}_questions.json").write_text(json.dumps({"questions": questions}))
    (root / f"mscoco_{coco}_annotations.json").write_text(json.dumps({"annotations": annotations}))


def _ann(qid, answers, qtype="one"):
    return {"question_id": qid, "question_type": qtype, "answers": [{"raw_answer": a, "answer": a.lower()} for a in answers]}


def test_okvqa_loads_and_sorts(tmp_path):
    _okvqa(tmp_path, [{"question_id": 20, "image_id": 7, "question": "What  is this?"},
                      {"question_id": 3, "image_id": 9, "question": "Why?"}],
           [_ann(20, ["Tea"] * 10, "Cooking and Food"), _ann(3, ["art"] * 10)])
    samples = load_dataset("okvqa", "val", tmp_path)
    assert [s.sample_id for s in samples] == ["20", "3"]
    s = samples[0]
    assert s.question == "What is this?"
    assert s.category == "CF"
    assert s.image_ref.endswith("val2014/COCO_val2014_000000000007.jpg")
    assert s.image_missing
    assert load_dataset("okvqa", "val", tmp_path, answer_field="processed")[0].human_answers[0] == "tea"
    assert load_dataset("okvqa", "test", tmp_path)[0].sample_id == "20"


def test_okvqa_errors_name_the_record(tmp_path):
    _okvqa(tmp_path, [{"question_id": 1, "image_id": 1, "question": "a?"}], [_ann(1, [])])
    with pytest.raises(DatasetError, match="question_id=1"):
        load_dataset("okvqa", "val", tmp_path)
    with pytest.raises(DatasetError, match="not found"):
        load_dataset("okvqa", "train", tmp_path)
    _okvqa(tmp_path, [{"question_id": 1, "question": "a?"}], [_ann(1, ["x"])])
    with pytest.raises(DatasetError, match="index 0"):
        load_dataset("okvqa", "val", tmp_path)


def test_empty_files_give_empty_split(tmp_path):
    (tmp_path / "OpenEnded_mscoco_val2014_questions.json").write_text("")
    (tmp_path / "mscoco_val2014_annotations.json").write_text("")
    assert load_dataset("okvqa", "val", tmp_path) == []


def test_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        load_dataset("okvqa", "dev2", tmp_path)
    with pytest.raises(ValueError):
        load_dataset("vqa", "val", tmp_path)
    with pytest.raises(ValueError):
        load_dataset("okvqa", "val", tmp_path, answer_field="other")


def test_aokvqa_choice_arity(tmp_path):
    rec = {"question_id": "q1", "image_id": 5, "question": "What?", "direct_answers": ["a"] * 10,
           "choices": ["a", "b", "c", "d"], "correct_choice_idx": 2}
    (tmp_path / "aokvqa_v1p0_val.json").write_text(json.dumps([rec]))
    s = load_dataset("aokvqa", "val", tmp_path)[0]
    assert s.mc_options == ("a", "b", "c", "d") and s.mc_correct_index == 2
    assert s.image_ref.endswith("val2017/000000000005.jpg")
    rec["choices"] = ["a", "b", "c"]
    (tmp_path / "aokvqa_v1p0_val.json").write_text(json.dumps([rec]))
    with pytest.raises(DatasetError, match="3 choices"):
        load_dataset("aokvqa", "val", tmp_path)


def test_aokvqa_test_split_is_unlabelled(tmp_path):
    rec = {"question_id": "q1", "image_id": 5, "question": "What?", "choices": ["a", "b", "c", "d"]}
    (tmp_path / "aokvqa_v1p0_test.json").write_text(json.dumps([rec]))
    assert load_dataset("aokvqa", "test", tmp_path)[0].human_answers == ()


def test_duplicate_ids_rejected(tmp_path):
    _okvqa(tmp_path, [{"question_id": 1, "image_id": 1, "question": "a?"}] * 2, [_ann(1, ["x"])])
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset("okvqa", "val", tmp_path)


def test_canonical_answer_ties_lexicographic():
    assert canonical_answer(["Dog", "cat", "dog", "cat"]) == "cat"
    assert Sample("1", "x", "q?", ("b", "a", "b")).answer == "b"
    with pytest.raises(ValueError):
        canonical_answer([])


def test_manifest_categories():
    m = build_manifest("okvqa", {"train": [1, 2], "val": [3]})
    assert len(m.category_list) == 11 and m.split_sizes == {"train": 2, "val": 1}


records = st.lists(st.fixed_dictionaries({
    "sample_id": st.text(min_size=1, max_size=8),
    "answer": st.text(max_size=20),
    "score": st.floats(allow_nan=False, allow_infinity=False),
}), max_size=10)


@given(records)
def test_artifact_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("art") / "p.jsonl"
    digest = write_artifact("predictions", recs, path)
    back = read_artifact(path)
    assert [{k: v for k, v in r.items() if k != "schema_version"} for r in back] == recs
    assert all("schema_version" in r for r in back)
    assert write_artifact("predictions", recs, path) == digest


def test_artifact_validation(tmp_path):
    with pytest.raises(ArtifactError, match="lacks fields"):
        write_artifact("predictions", [{"sample_id": "1"}], tmp_path / "p.jsonl")
    with pytest.raises(ArtifactError, match="serialize"):
        write_artifact("predictions", [{"sample_id": "1", "answer": object()}], tmp_path / "p.jsonl")
    assert not (tmp_path / "p.jsonl").exists()
    with pytest.raises(ValueError):
        write_artifact("nonsense", [], tmp_path / "x.jsonl")
    with pytest.raises(ArtifactError):
        read_artifact(tmp_path / "missing.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"a": 1}\nnot json\n')
    with pytest.raises(ArtifactError, match=":2:"):
        read_artifact(tmp_path / "bad.jsonl")


def test_failed_write_keeps_old_file(tmp_path):
    path = tmp_path / "p.jsonl"
    write_artifact("predictions", [{"sample_id": "1", "answer": "a"}], path)
    before = path.read_bytes()
    with pytest.raises(ArtifactError):
        write_artifact("predictions", [{"sample_id": "2"}], path)
    assert path.read_bytes() == before
    assert list(tmp_path.iterdir()) == [path]


def test_concurrent_writer_refused(tmp_path):
    path = tmp_path / "p.jsonl"
    (tmp_path / "p.jsonl.lock").write_text("")
    with pytest.raises(ConcurrentWriteError):
        write_artifact("predictions", [], path)


def test_empty_artifact(tmp_path):
    write_artifact("records", [], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == b""
    assert read_artifact(tmp_path / "e.jsonl") == []


def test_json_documents(tmp_path):
    write_json({"b": 1, "a": [1, 2]}, tmp_path / "r.json")
    assert read_json(tmp_path / "r.json") == {"a": [1, 2], "b": 1}
    with pytest.raises(ArtifactError):
        read_json(tmp_path / "none.json")
