"""Dataset loaders for OK-VQA / A-OKVQA and line-delimited JSON artifacts."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ._hashing import canonical_json
from .exceptions import ArtifactError, ConcurrentWriteError, DatasetError
from .metrics import OKVQA_CATEGORIES, normalize_answer

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")

# OK-VQA stores the category in ``question_type`` as a spelled-out number.
_OKVQA_TYPE_CODES = {
    "one": "VT",
    "two": "BCP",
    "three": "OMC",
    "four": "SR",
    "five": "CF",
    "six": "GHLC",
    "seven": "PEL",
    "eight": "PA",
    "nine": "ST",
    "ten": "WC",
    "other": "Other",
}
_CATEGORY_LOOKUP = {**_OKVQA_TYPE_CODES}
for _abbrev, _name in OKVQA_CATEGORIES:
    _CATEGORY_LOOKUP[_abbrev.lower()] = _abbrev
    _CATEGORY_LOOKUP[_name.lower()] = _abbrev


def canonical_answer(human_answers: Sequence[str]) -> str:
    """Most frequent normalized answer; ties broken lexicographically."""
    if not human_answers:
        raise ValueError("no human answers to reduce")
    counts = Counter(normalize_answer(a) for a in human_answers)
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_ref: str
    question: str
    human_answers: tuple = ()
    split: str = "train"
    category: str | None = None
    mc_options: tuple | None = None
    mc_correct_index: int | None = None
    image_missing: bool = False

    @property
    def answer(self) -> str:
        return canonical_answer(self.human_answers)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_ref": self.image_ref,
            "question": self.question,
            "human_answers": list(self.human_answers),
            "split": self.split,
            "category": self.category,
            "mc_options": list(self.mc_options) if self.mc_options is not None else None,
            "mc_correct_index": self.mc_correct_index,
            "image_missing": self.image_missing,
        }


@dataclass
class DatasetManifest:
    name: str
    version: str
    split_sizes: dict = field(default_factory=dict)
    category_list: tuple = tuple(abbrev for abbrev, _ in OKVQA_CATEGORIES)

    def __post_init__(self):
        if self.name == "okvqa" and len(self.category_list) != 11:
            raise ValueError("OK-VQA has exactly 11 categories")


DATASET_VERSIONS = {"okvqa": "1.1", "aokvqa": "v1p0"}


def _read_json(path: Path):
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON in {path}: {exc}") from exc


def _clean_question(q: str) -> str:
    return " ".join(q.split())


def _image_ref(path: Path) -> tuple[str, bool]:
    return str(path), not path.is_file()


def _okvqa_files(root: Path, split: str):
    coco = "train2014" if split == "train" else "val2014"
    return (
        root / f"OpenEnded_mscoco_{coco}_questions.json",
        root / f"mscoco_{coco}_annotations.json",
        coco,
    )


def _load_okvqa(root: Path, split: str, answer_field: str) -> list[Sample]:
    q_path, a_path, coco = _okvqa_files(root, split)
    questions = _read_json(q_path)
    annotations = _read_json(a_path)
    questions = [] if questions is None else questions.get("questions", [])
    annotations = [] if annotations is None else annotations.get("annotations", [])
    by_qid = {}
    for idx, ann in enumerate(annotations):
        try:
            by_qid[ann["question_id"]] = ann
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{a_path}: malformed annotation at index {idx}") from exc
    key = {"raw": "raw_answer", "processed": "answer"}[answer_field]
    samples = []
    for idx, q in enumerate(questions):
        try:
            qid = q["question_id"]
            image_id = int(q["image_id"])
            question = _clean_question(q["question"])
            ann = by_qid.get(qid, {})
            answers = tuple(a.get(key, a.get("answer")) for a in ann.get("answers", []))
            category = _CATEGORY_LOOKUP.get(str(ann.get("question_type", "")).lower())
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{q_path}: malformed question record at index {idx}") from exc
        if split in ("train", "val") and not answers:
            raise DatasetError(f"{a_path}: sample index {idx} (question_id={qid}) has no answers")
        if any(a is None for a in answers):
            raise DatasetError(f"{a_path}: sample index {idx} has an answer without text")
        ref, missing = _image_ref(root / coco / f"COCO_{coco}_{image_id:012d}.jpg")
        samples.append(
            Sample(
                sample_id=str(qid),
                image_ref=ref,
                question=question,
                human_answers=answers,
                split=split,
                category=category,
                image_missing=missing,
            )
        )
    return samples


def _load_aokvqa(root: Path, split: str) -> list[Sample]:
    path = root / f"aokvqa_v1p0_{split}.json"
    records = _read_json(path) or []
    samples = []
    for idx, rec in enumerate(records):
        try:
            qid = str(rec["question_id"])
            image_id = int(rec["image_id"])
            question = _clean_question(rec["question"])
            answers = tuple(rec.get("direct_answers") or ())
            choices = rec.get("choices")
            correct = rec.get("correct_choice_idx")
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: malformed record at index {idx}") from exc
        if split in ("train", "val") and not answers:
            raise DatasetError(f"{path}: record index {idx} ({qid}) has no direct answers")
        if choices is not None and len(choices) != 4:
            raise DatasetError(f"{path}: record index {idx} ({qid}) has {len(choices)} choices, expected 4")
        ref, missing = _image_ref(root / f"{split}2017" / f"{image_id:012d}.jpg")
        samples.append(
            Sample(
                sample_id=qid,
                image_ref=ref,
                question=question,
                human_answers=answers,
                split=split,
                mc_options=tuple(choices) if choices is not None else None,
                mc_correct_index=int(correct) if correct is not None else None,
                image_missing=missing,
            )
        )
    return samples


def load_dataset(name: str, split: str, root, answer_field: str = "raw") -> list[Sample]:
    """Load one split of OK-VQA (``okvqa``) or A-OKVQA (``aokvqa``) from its published JSON.

    OK-VQA has no separate validation set, so ``val`` and ``test`` both read the
    val2014 files. ``answer_field`` picks OK-VQA's ``raw_answer`` (default) or the
    processed ``answer`` field. Samples are sorted by ``sample_id``.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    if answer_field not in ("raw", "processed"):
        raise ValueError(f"answer_field must be 'raw' or 'processed', got {answer_field!r}")
    root = Path(root)
    if name == "okvqa":
        samples = _load_okvqa(root, split, answer_field)
    elif name == "aokvqa":
        samples = _load_aokvqa(root, split)
    else:
        raise ValueError(f"unknown dataset {name!r}; expected 'okvqa' or 'aokvqa'")
    samples.sort(key=lambda s: s.sample_id)
    for a, b in zip(samples, samples[1:]):
        if a.sample_id == b.sample_id:
            raise DatasetError(f"duplicate sample_id {a.sample_id} in {name}/{split}")
    return samples


def build_manifest(name: str, splits: dict[str, Sequence[Sample]]) -> DatasetManifest:
    return DatasetManifest(
        name=name,
        version=DATASET_VERSIONS.get(name, "unknown"),
        split_sizes={k: len(v) for k, v in splits.items()},
    )


# -- artifacts ---------------------------------------------------------------

# Fields every line of a given artifact kind must carry (schema_version is added if absent).
ARTIFACT_FIELDS = {
    "captions": ("sample_id", "backend_id", "region_index", "template_id", "caption"),
    "exemplars": ("sample_id", "strategy"),
    "predictions": ("sample_id", "answer"),
    "regions": ("sample_id", "regions"),
    "neighbors": ("sample_id", "neighbors"),
    "zeroshot": ("sample_id", "answer"),
    "records": (),
}


def _serialize(kind: str, records: Iterable[dict]) -> bytes:
    if kind not in ARTIFACT_FIELDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    required = ARTIFACT_FIELDS[kind]
    lines = []
    for i, rec in enumerate(records):
        rid = rec.get("sample_id", i) if isinstance(rec, dict) else i
        if not isinstance(rec, dict):
            raise ArtifactError(f"{kind} record {rid} is not a mapping")
        missing = [f for f in required if f not in rec]
        if missing:
            raise ArtifactError(f"{kind} record {rid} lacks fields {missing}")
        if "schema_version" not in rec:
            rec = {"schema_version": SCHEMA_VERSION, **rec}
        try:
            lines.append(canonical_json(rec))
        except (TypeError, ValueError) as exc:
            raise ArtifactError(f"cannot serialize {kind} record {rid}: {exc}") from exc
    body = "\n".join(lines)
    return (body + "\n").encode("utf-8") if lines else b""


@contextmanager
def _write_lock(path: Path):
    lock = path.with_name(path.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ConcurrentWriteError(f"another writer holds {lock}") from exc
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _atomic_write_bytes(path: Path, data: bytes) -> str:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create directory for {path}: {exc}") from exc
    with _write_lock(path):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    return hashlib.sha256(data).hexdigest()


def write_artifact(kind: str, records: Iterable[dict], path) -> str:
    """Atomically write ``records`` as JSON lines and return the sha256 of the file."""
    path = Path(path)
    data = _serialize(kind, records)
    try:
        return _atomic_write_bytes(path, data)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_artifact(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"artifact not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ArtifactError(f"{path}:{lineno}: invalid JSON line") from exc
    return out


def write_json(obj, path) -> str:
    """Atomic single-document JSON write (``report.json``, manifests)."""
    data = (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    try:
        return _atomic_write_bytes(Path(path), data)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"artifact not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def append_records(path, records: Iterable[dict]) -> None:
    """Append JSON lines without rewriting; used for caches that grow across runs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            if "schema_version" not in rec:
                rec = {"schema_version": SCHEMA_VERSION, **rec}
            fh.write(canonical_json(rec) + "\n")
        fh.flush()
