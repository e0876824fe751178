"""Correct / Incorrect / Rejected grading against gold aliases."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .core import Outcome, QAItem

_ARTICLES = re.compile(r"\b(a|an|the)\b")


@dataclass(frozen=True)
class NormalizedAnswer:
    original: str
    canonical: str

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self.canonical.split())


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def canonical(text: str) -> str:
    text = _strip_punct(text.casefold())
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def normalize_answer(text: str) -> NormalizedAnswer:
    return NormalizedAnswer(text, canonical(text))


def contains_tokens(haystack: tuple[str, ...], needle: tuple[str, ...]) -> bool:
    if not needle:
        return False
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def load_lexicon(path: str | Path | None = None) -> tuple[str, ...]:
    if path is None:
        return _default_lexicon()
    return _parse_lexicon(Path(path).read_text(encoding="utf-8"))


def _parse_lexicon(text: str) -> tuple[str, ...]:
    phrases = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            phrases.append(line)
    return tuple(phrases)


@lru_cache(maxsize=1)
def _default_lexicon() -> tuple[str, ...]:
    text = resources.files("delusion_audit").joinpath("data/refusal_lexicon.txt").read_text(
        encoding="utf-8"
    )
    return _parse_lexicon(text)


def is_rejection(text: str, lexicon: tuple[str, ...] | None = None) -> bool:
    tokens = tuple(canonical(text).split())
    phrases = _default_lexicon() if lexicon is None else lexicon
    return any(contains_tokens(tokens, tuple(canonical(p).split())) for p in phrases)


def answers_match(a: str, b: str, strict: bool = False) -> bool:
    """Equality, or (unless ``strict``) token containment in either direction."""
    ta, tb = tuple(canonical(a).split()), tuple(canonical(b).split())
    if not ta or not tb:
        return False
    if strict:
        return ta == tb
    return contains_tokens(ta, tb) or contains_tokens(tb, ta)


def grade(
    answer_text: str,
    item: QAItem,
    strict: bool = False,
    lexicon: tuple[str, ...] | None = None,
) -> Outcome:
    """Rejection is checked first, so a hedged refusal never counts as correct."""
    if is_rejection(answer_text, lexicon):
        return Outcome.REJECTED
    answer = tuple(canonical(answer_text).split())
    for alias in item.gold_answers:
        gold = tuple(canonical(alias).split())
        if not gold:
            continue
        if (answer == gold) if strict else contains_tokens(answer, gold):
            return Outcome.CORRECT
    return Outcome.INCORRECT
