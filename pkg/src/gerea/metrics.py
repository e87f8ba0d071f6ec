"""Answer normalization, soft VQA accuracy and caption-quality metrics.

All functions here are pure. Percentages are returned on a 0-100 scale,
``vqa_score`` on 0-1.
"""
from __future__ import annotations

import math
import string
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .exceptions import AlignmentError

# Bumped whenever normalize_answer / contains_answer semantics change; stored in reports.
MATCH_RULE_VERSION = "norm-lower-punct-ws/whole-word/v1"

OKVQA_CATEGORIES = (
    ("VT", "Vehicles and Transportation"),
    ("BCP", "Brands, Companies and Products"),
    ("OMC", "Objects, Material and Clothing"),
    ("SR", "Sports and Recreation"),
    ("CF", "Cooking and Food"),
    ("GHLC", "Geography, History, Language and Culture"),
    ("PEL", "People and Everyday Life"),
    ("PA", "Plants and Animals"),
    ("ST", "Science and Technology"),
    ("WC", "Weather and Climate"),
    ("Other", "Other"),
)

_ASCII_PUNCT = frozenset(string.punctuation)


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace.

    >>> normalize_answer("  Home   Run! ")
    'home run'
    """
    text = text.lower()
    text = "".join(ch for ch in text if not _is_punct(ch))
    return " ".join(text.split())


def vqa_score(pred: str, human_answers: Sequence[str]) -> float:
    """``min(#matches / 3, 1)`` where matches are counted after normalization."""
    if len(human_answers) == 0:
        raise ValueError("vqa_score needs at least one human answer")
    target = normalize_answer(pred)
    hits = sum(1 for a in human_answers if normalize_answer(a) == target)
    return min(hits / 3, 1.0)


def contains_answer(caption: str, answer: str) -> bool:
    """Whole-word containment of the normalized answer in the normalized caption."""
    ans = normalize_answer(answer)
    if not ans:
        return False
    return f" {ans} " in f" {normalize_answer(caption)} "


def _check_aligned(left: Mapping, right: Mapping, what: str) -> list:
    lk, rk = set(left), set(right)
    if lk != rk:
        raise AlignmentError(lk - rk, rk - lk, what)
    return sorted(lk)


def answer_hit_rate(caption_sets: Mapping[str, Sequence[str]], answers: Mapping[str, str]) -> float:
    """Percentage of samples with at least one caption containing the answer."""
    ids = _check_aligned(caption_sets, answers, "captions/answers")
    if not ids:
        raise ValueError("answer_hit_rate over zero samples")
    hits = sum(
        1 for sid in ids if any(contains_answer(c, answers[sid]) for c in caption_sets[sid])
    )
    return 100.0 * hits / len(ids)


def answer_noise_rate(caption_sets: Mapping[str, Sequence[str]], answers: Mapping[str, str]) -> float:
    """Percentage of individual captions that do not contain their sample's answer.

    Every sample must carry the same number of captions.
    """
    ids = _check_aligned(caption_sets, answers, "captions/answers")
    if not ids:
        raise ValueError("answer_noise_rate over zero samples")
    counts = {len(caption_sets[sid]) for sid in ids}
    if len(counts) != 1:
        raise ValueError(f"ragged caption counts {sorted(counts)}; caption number must be constant")
    c_n = counts.pop()
    if c_n == 0:
        raise ValueError("answer_noise_rate with zero captions per sample")
    hits = sum(
        sum(1 for c in caption_sets[sid] if contains_answer(c, answers[sid])) for sid in ids
    )
    return 100.0 * (1.0 - hits / (len(ids) * c_n))


def token_f1(a: str, b: str) -> float:
    ta, tb = normalize_answer(a).split(), normalize_answer(b).split()
    if not ta or not tb:
        return float(ta == tb)
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    p, r = common / len(ta), common / len(tb)
    return 2 * p * r / (p + r)


def select_mc_option(answer: str, options: Sequence[str]) -> int:
    """Index of the option with highest token F1 to ``answer``; ties go to the lowest index."""
    if not options:
        raise ValueError("no options to choose from")
    best, best_f1 = 0, -1.0
    for i, opt in enumerate(options):
        f1 = token_f1(answer, opt)
        if f1 > best_f1:
            best, best_f1 = i, f1
    return best


CORRECT_THRESHOLD = 1 / 3


@dataclass
class BehaviorReport:
    # Keys are "<backend>/<system>" with each side "correct" or "wrong".
    quadrants: dict
    same_share: float
    different_share: float
    same_accuracy: float | None
    different_system_accuracy: float | None
    different_backend_accuracy: float | None
    n_samples: int


def behavior_analysis(
    system_preds: Mapping[str, str],
    backend_preds: Mapping[str, str],
    gold: Mapping[str, Sequence[str]],
) -> BehaviorReport:
    """Compare system and backend predictions sample by sample.

    A prediction is "correct" when ``vqa_score >= 1/3``. Accuracies in the
    same/different split are mean VQA scores in percent.
    """
    ids = _check_aligned(system_preds, gold, "system/gold")
    _check_aligned(backend_preds, gold, "backend/gold")
    if not ids:
        raise ValueError("behavior_analysis over zero samples")
    quad = Counter()
    same, diff = [], []
    for sid in ids:
        s_score = vqa_score(system_preds[sid], gold[sid])
        b_score = vqa_score(backend_preds[sid], gold[sid])
        key = ("correct" if b_score >= CORRECT_THRESHOLD else "wrong") + "/" + (
            "correct" if s_score >= CORRECT_THRESHOLD else "wrong"
        )
        quad[key] += 1
        if normalize_answer(system_preds[sid]) == normalize_answer(backend_preds[sid]):
            same.append((s_score, b_score))
        else:
            diff.append((s_score, b_score))
    n = len(ids)
    quadrants = {
        f"{b}/{s}": 100.0 * quad[f"{b}/{s}"] / n
        for b in ("correct", "wrong")
        for s in ("correct", "wrong")
    }

    def mean(xs):
        return 100.0 * sum(xs) / len(xs) if xs else None

    return BehaviorReport(
        quadrants=quadrants,
        same_share=100.0 * len(same) / n,
        different_share=100.0 * len(diff) / n,
        same_accuracy=mean([s for s, _ in same]),
        different_system_accuracy=mean([s for s, _ in diff]),
        different_backend_accuracy=mean([b for _, b in diff]),
        n_samples=n,
    )


def accuracy(preds: Mapping[str, str], gold: Mapping[str, Sequence[str]]) -> float:
    ids = _check_aligned(preds, gold, "predictions/gold")
    if not ids:
        raise ValueError("accuracy over zero samples")
    return 100.0 * sum(vqa_score(preds[i], gold[i]) for i in ids) / len(ids)


@dataclass
class EvalReport:
    overall_accuracy: float
    n_samples: int
    per_category: dict = field(default_factory=dict)
    ahr: float | None = None
    anr: float | None = None
    caption_count: int | None = None
    backend_accuracy: float | None = None
    behavior: dict | None = None
    mc_accuracy: float | None = None
    matching_rule: str = MATCH_RULE_VERSION
    config_hashes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _finite(asdict(self))


def _finite(obj):
    # NaN is not valid JSON; empty categories become null.
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def evaluate(
    preds: Mapping[str, str],
    gold: Mapping[str, Sequence[str]],
    *,
    categories: Mapping[str, str | None] | None = None,
    captions: Mapping[str, Sequence[str]] | None = None,
    answers: Mapping[str, str] | None = None,
    backend_preds: Mapping[str, str] | None = None,
    mc: Mapping[str, tuple[Sequence[str], int | None]] | None = None,
    config_hashes: Mapping[str, str] | None = None,
) -> EvalReport:
    """Build the full report.

    ``answers`` are the canonical per-sample answers used for AHR/ANR;
    ``mc`` maps sample id to (options, correct index).
    """
    report = EvalReport(
        overall_accuracy=accuracy(preds, gold),
        n_samples=len(preds),
        config_hashes=dict(config_hashes or {}),
    )
    if captions is not None and answers is not None:
        report.ahr = answer_hit_rate(captions, answers)
        report.anr = answer_noise_rate(captions, answers)
        report.caption_count = len(next(iter(captions.values())))
    if backend_preds is not None:
        report.backend_accuracy = accuracy(backend_preds, gold)
        report.behavior = asdict(behavior_analysis(preds, backend_preds, gold))
    if categories is not None:
        report.per_category = per_category_report(
            preds, gold, categories, captions=captions, answers=answers, backend_preds=backend_preds
        )
    if mc:
        scored = [(select_mc_option(preds[sid], opts), idx) for sid, (opts, idx) in mc.items() if idx is not None]
        if scored:
            report.mc_accuracy = 100.0 * sum(p == t for p, t in scored) / len(scored)
    return report


def per_category_report(preds, gold, categories, *, captions=None, answers=None, backend_preds=None) -> dict:
    """Accuracy (and ZSP/AHR/ANR where inputs allow) for each of the 11 categories.

    Categories with no samples get ``nan`` entries so the table always has 11 rows.
    """
    out = {}
    for abbrev, name in OKVQA_CATEGORIES:
        ids = sorted(sid for sid in preds if categories.get(sid) == abbrev)
        row = {"name": name, "n": len(ids), "accuracy": math.nan, "zsp": math.nan, "ahr": math.nan, "anr": math.nan}
        if ids:
            row["accuracy"] = accuracy({i: preds[i] for i in ids}, {i: gold[i] for i in ids})
            if backend_preds is not None:
                row["zsp"] = accuracy({i: backend_preds[i] for i in ids}, {i: gold[i] for i in ids})
            if captions is not None and answers is not None:
                sub_c = {i: captions[i] for i in ids}
                sub_a = {i: answers[i] for i in ids}
                row["ahr"] = answer_hit_rate(sub_c, sub_a)
                row["anr"] = answer_noise_rate(sub_c, sub_a)
        out[abbrev] = row
    return out


def render_category_table(report: EvalReport | dict) -> str:
    """Aligned text table: one row per category plus Overall, columns ZSP/AHR/ANR/Acc."""
    data = report.to_dict() if isinstance(report, EvalReport) else report
    rows = [("Category", "N", "ZSP", "AHR", "ANR", "Acc.")]

    def fmt(v):
        return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"

    for abbrev, _ in OKVQA_CATEGORIES:
        r = data.get("per_category", {}).get(abbrev)
        if r is None:
            continue
        rows.append((abbrev, str(r["n"]), fmt(r["zsp"]), fmt(r["ahr"]), fmt(r["anr"]), fmt(r["accuracy"])))
    rows.append(
        (
            "Overall",
            str(data["n_samples"]),
            fmt(data.get("backend_accuracy")),
            fmt(data.get("ahr")),
            fmt(data.get("anr")),
            fmt(data["overall_accuracy"]),
        )
    )
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    return "\n".join(lines) + "\n"
