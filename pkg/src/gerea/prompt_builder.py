"""Question-specific prompt templates and noun/verb phrase extraction.

Templates live in ``resources/prompts.json`` keyed by backend style, six per
style. A new style can be added there without touching this module.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

PROMPT_CLASSES = ("unconstrained", "noun_verb", "question_inquiry", "question_relevant_description")
N_TEMPLATES = 6


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    prompt_class: str
    backend_style: str
    pattern: str

    def render(self, question: str, phrases: str = "") -> str:
        values = {"question": question, "phrases": phrases}
        # Single pass so braces inside the question are never re-expanded.
        return re.sub(r"\{(question|phrases)\}", lambda m: values[m.group(1)], self.pattern)


@lru_cache(maxsize=None)
def _resource() -> dict:
    with resources.files("gerea.resources").joinpath("prompts.json").open(encoding="utf-8") as fh:
        return json.load(fh)


def template_version() -> str:
    return _resource()["version"]


def backend_styles() -> tuple:
    return tuple(_resource()["styles"])


def load_templates(style: str) -> list[PromptTemplate]:
    styles = _resource()["styles"]
    if style not in styles:
        raise ValueError(f"unknown backend style {style!r}; known: {sorted(styles)}")
    out = [PromptTemplate(backend_style=style, **t) for t in styles[style]]
    out.sort(key=lambda t: t.template_id)
    ids = [t.template_id for t in out]
    if ids != list(range(1, N_TEMPLATES + 1)):
        raise ValueError(f"style {style!r} must define template ids 1..{N_TEMPLATES}, got {ids}")
    return out


def auxiliary_prompt(name: str, style: str | None = None) -> str:
    aux = _resource()["auxiliary"][name]
    return aux[style] if isinstance(aux, dict) else aux


# -- phrase extraction -------------------------------------------------------

_DET = set("a an the this that these those some any each every another its his her their my our your no".split())
_DEMONSTRATIVES = set("this that these those".split())
_WH = set("what which who whom whose where when why how".split())
_PRON = set("i you he she it we they me him us them one ones something anything someone anyone".split())
_SUBJECTS = set("i you he she we they".split())
_AUX = set(
    "is are was were be been being am 's 're do does did done has have had having can could will would shall should may might must".split()
)
_PREP = set(
    "of in on at by for with from to into onto about as like near under over above below behind between through "
    "during after before without within across along around against toward towards inside outside upon beside besides "
    "via per than since until".split()
)
_CONJ = set("and or but nor so yet if because while whether".split())
_PARTICLES = set("up down out off away back over around".split())
_OTHER = set(
    "not n't there here also very too often usually always ever never just only really most more less least much many "
    "few several all both either neither else".split()
)
_ADJ = set(
    "red blue green yellow white black brown orange pink purple gray grey silver gold golden tan beige "
    "big small large little tall short long old new young famous popular common typical main other same different "
    "favorite favourite hot cold warm cool wooden electric male female first last best worst high low wild fresh "
    "healthy dangerous safe full empty open good bad real top bottom front left right whole entire average "
    "traditional modern ancient national local natural human professional commercial public private".split()
)
_NUMBERS = set("one two three four five six seven eight nine ten hundred thousand".split())
_VERBS = set(
    "eat eats drink drinks play plays hold holds ride rides wear wears use uses make makes made live lives grow grows "
    "sell sells cook cooks fly flies drive drives sit sits stand stands carry carries come comes go goes call called "
    "known take takes taken keep keeps need needs mean means cause causes build built belong belongs work works "
    "serve serves contain contains produce produces read reads write writes written say says show shows see seen "
    "get gets got give gives given put find found happen happens run runs think feel look looks looking like likes "
    "help helps live lived die died invent invented hang hangs hung sleep sleeps swim swims catch caught throw thrown "
    "wash cut kept sold bought buy buys prevent protect pull pulls push pushes measure measures represent represents "
    "originate originated come came become happen used shown appear appears".split()
)
_IMPERATIVES = set("name identify describe list guess tell give explain".split())
_NOT_ING = set(
    "thing things something anything nothing everything king ring spring string wing ceiling morning evening clothing "
    "icing building buildings painting paintings ping sing bring during noting ding sibling".split()
)
_NOT_LY = set("family italy july jelly belly lily fly supply reply ally rally bully holy only".split())

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*")


def _tag(words: list[tuple[str, int, int]]) -> list[str]:
    tags = []
    prev = None
    for i, (w, _, _) in enumerate(words):
        lw = w.lower()
        if i == 0 and lw in _IMPERATIVES:
            t = "VERB"
        elif lw in _WH:
            t = "WH"
        elif lw in _DET:
            t = "DET"
        elif lw in _AUX:
            t = "AUX"
        elif lw in _PARTICLES and prev == "VERB":
            t = "PART"
        elif lw in _PREP:
            t = "PREP"
        elif lw in _CONJ:
            t = "CONJ"
        elif lw in _PRON:
            t = "PRON"
        elif lw in _OTHER:
            t = "OTHER"
        elif lw.isdigit() or lw in _NUMBERS:
            t = "NUM"
        elif lw in _ADJ:
            t = "ADJ"
        elif lw in _VERBS:
            # "the drink", "in use": a verb form after an article, possessive, preposition or adjective is a noun.
            # Demonstratives ("does this appear") and infinitive "to" keep the verb reading.
            before = words[i - 1][0].lower() if i else ""
            nominal = prev in ("DET", "PREP", "ADJ") and before not in _DEMONSTRATIVES and before != "to"
            t = "NOUN" if nominal else "VERB"
        elif lw.endswith("ing") and len(lw) > 4 and lw not in _NOT_ING:
            t = "VERB"
        elif lw.endswith("ed") and len(lw) > 4 and prev in ("AUX", "NOUN", "PRON"):
            t = "VERB"
        elif lw.endswith("ly") and len(lw) > 4 and lw not in _NOT_LY:
            t = "ADV"
        elif prev == "PRON" and words[i - 1][0].lower() in _SUBJECTS:
            # "do you pick up": an unknown word right after a subject pronoun is its verb
            t = "VERB"
        else:
            t = "NOUN"
        tags.append(t)
        prev = t
    # "the top of": an adjective after a determiner with nothing nominal after it heads the phrase
    for i, t in enumerate(tags):
        nxt = tags[i + 1] if i + 1 < len(tags) else None
        if t == "ADJ" and i and tags[i - 1] == "DET" and nxt not in ("ADJ", "NOUN", "NUM"):
            tags[i] = "NOUN"
    return tags


@dataclass(frozen=True)
class PhraseExtraction:
    noun_phrases: tuple = ()
    verb_phrases: tuple = ()
    # All phrases in question order (start offset), duplicates removed case-insensitively.
    ordered: tuple = field(default=(), compare=False)

    def joined(self) -> str:
        return ", ".join(self.ordered)


def extract_phrases(question: str) -> PhraseExtraction:
    """Deterministic noun/verb phrase chunking from a lexicon-based tagger.

    Noun phrase: optional determiner, adjectives/numbers, then a noun run; the
    determiner is matched but not emitted. Verb phrase: a run of main verbs
    plus an optional following particle. Auxiliaries never form a phrase.
    Unknown words are tagged as nouns, which keeps named entities in noun phrases.
    """
    words = [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(question)]
    tags = _tag(words)
    spans = []  # (start, end, kind)
    i, n = 0, len(words)
    while i < n:
        t = tags[i]
        if t in ("ADJ", "NUM", "NOUN"):
            j = i
            while j < n and tags[j] in ("ADJ", "NUM"):
                j += 1
            k = j
            while k < n and tags[k] == "NOUN":
                k += 1
            if k > j:
                spans.append((words[i][1], words[k - 1][2], "np"))
                i = k
                continue
            i = j if j > i else i + 1
            continue
        if t == "VERB":
            j = i
            while j < n and tags[j] == "VERB":
                j += 1
            if j < n and tags[j] == "PART":
                j += 1
            spans.append((words[i][1], words[j - 1][2], "vp"))
            i = j
            continue
        i += 1
    nps, vps, ordered, seen = [], [], [], set()
    for start, end, kind in spans:
        text = question[start:end]
        (nps if kind == "np" else vps).append(text)
        if text.lower() not in seen:
            seen.add(text.lower())
            ordered.append(text)

    def dedup(xs):
        out, s = [], set()
        for x in xs:
            if x.lower() not in s:
                s.add(x.lower())
                out.append(x)
        return tuple(out)

    return PhraseExtraction(noun_phrases=dedup(nps), verb_phrases=dedup(vps), ordered=tuple(ordered))


def render_prompts(question: str, phrases: PhraseExtraction | None = None, style: str = "instructblip", n: int = N_TEMPLATES) -> list[str]:
    """The first ``n`` rendered prompts for ``style``, ordered by template id."""
    templates = load_templates(style)
    if not 1 <= n <= N_TEMPLATES:
        raise ValueError(f"n must be in 1..{N_TEMPLATES}, got {n}")
    if phrases is None:
        phrases = extract_phrases(question)
    return [t.render(question, phrases.joined()) for t in templates[:n]]
