"""Domain records shared across the toolkit and their on-disk formats.

All records are frozen dataclasses so they can be handed to worker threads
without copying. Two JSONL formats live here:

* datasets: one ``{"id", "question", "answers", "passages"?, "source"?}``
  object per line;
* audit records: a header line ``{"format": ..., "version": 1}`` followed by
  one serialized :class:`AuditRecord` per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ContractError, DataError, FormatVersionError

METHODS = ("raw_logits", "agreement", "p_true", "verb_1s", "verb_2s")
ENSEMBLE = "ensemble"

RECORDS_FORMAT = "delusion-audit/records"
RECORDS_VERSION = 1


class RoleTag(str, Enum):
    ANSWER = "answer"
    P_TRUE = "p_true"
    CONSISTENCY_SAMPLE = "consistency_sample"
    VERB_1S = "verb_1s"
    VERB_2S = "verb_2s"
    HONESTY = "honesty"
    REFLECTION = "reflection"
    RAG = "rag"
    VERIFIER = "verifier"


class Outcome(str, Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    REJECTED = "Rejected"


class Classification(str, Enum):
    NONE = "None"
    HALLUCINATION = "Hallucination"
    DELUSION = "Delusion"


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    gold_answers: tuple[str, ...]
    passages: tuple[str, ...] | None = None
    source: str = ""

    def __post_init__(self):
        if not any(a.strip() for a in self.gold_answers):
            raise ContractError(f"item {self.id!r} has no non-empty gold answer")


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.0
    top_p: float = 1.0
    top_k: int = 0
    max_tokens: int = 128
    n: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ContractError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ContractError("top_p must lie in (0, 1]")
        if self.top_k < 0 or self.max_tokens < 1 or self.n < 1:
            raise ContractError("top_k >= 0, max_tokens >= 1 and n >= 1 required")

    @property
    def greedy(self) -> bool:
        return self.temperature == 0

    @classmethod
    def for_consistency(cls, seed: int | None = None, max_tokens: int = 128) -> SamplingParams:
        return cls(temperature=0.7, top_p=0.95, top_k=40, max_tokens=max_tokens, seed=seed)


@dataclass(frozen=True)
class TokenLogprob:
    token: str
    logprob: float
    top_alternatives: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class GenerationTrace:
    item_id: str
    role_tag: RoleTag
    prompt_messages: tuple[tuple[str, str], ...]
    output_text: str
    token_logprobs: tuple[TokenLogprob, ...]
    sampling: SamplingParams
    created_at: str
    retry_count: int = 0
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        for tok in self.token_logprobs:
            if tok.logprob > 0 or any(lp > 0 for _, lp in tok.top_alternatives):
                raise ContractError(f"positive logprob in trace for {self.item_id!r}")


@dataclass(frozen=True)
class BeliefVector:
    item_id: str
    raw: Mapping[str, float | None] = field(default_factory=dict)
    normalized: Mapping[str, float | None] = field(default_factory=dict)
    ensemble: float | None = None
    parse_failed: frozenset[str] = frozenset()
    ensemble_partial: bool = False

    def __post_init__(self):
        for method, value in self.raw.items():
            if method not in METHODS:
                raise ContractError(f"unknown belief method {method!r}")
            if value is not None and not 0.0 <= value <= 1.0:
                raise ContractError(f"{method} score {value} outside [0, 1]")
            if value is not None and method in self.parse_failed:
                raise ContractError(f"{method} is parse_failed but carries a score")

    def score(self, method: str, normalized: bool = True) -> float | None:
        if method == ENSEMBLE:
            return self.ensemble
        source = self.normalized if normalized else self.raw
        return source.get(method)


@dataclass(frozen=True)
class Verdict:
    item_id: str
    outcome: Outcome
    classification: Classification = Classification.NONE
    belief_used: float | None = None
    threshold_used: float | None = None

    def __post_init__(self):
        # Incorrect + NONE is the "pending classification" state and is allowed.
        if self.outcome is not Outcome.INCORRECT and self.classification is not Classification.NONE:
            raise ContractError(f"{self.outcome.value} verdict cannot be classified")
        if self.classification is Classification.DELUSION:
            if self.belief_used is None or self.threshold_used is None:
                raise ContractError("a delusion needs both belief and threshold")
            if not self.belief_used > self.threshold_used:
                raise ContractError("a delusion must exceed its threshold")


@dataclass(frozen=True)
class AuditRecord:
    item: QAItem
    traces: tuple[GenerationTrace, ...]
    belief: BeliefVector
    verdict: Verdict | None = None
    method_verdicts: Mapping[str, Verdict] = field(default_factory=dict)

    @property
    def answer_trace(self) -> GenerationTrace:
        found = [t for t in self.traces if t.role_tag in (RoleTag.ANSWER, RoleTag.RAG)]
        if len(found) != 1:
            raise DataError(f"record {self.item.id!r} has {len(found)} answer traces")
        return found[0]

    def traces_for(self, role: RoleTag) -> list[GenerationTrace]:
        return [t for t in self.traces if t.role_tag is role]


# ---------------------------------------------------------------------------
# datasets


def item_from_json(obj: Mapping[str, Any]) -> QAItem:
    answers = obj["answers"]
    if isinstance(answers, str) or not isinstance(answers, list) or not answers:
        raise ValueError("'answers' must be a non-empty list of strings")
    passages = obj.get("passages")
    return QAItem(
        id=str(obj["id"]),
        question=str(obj["question"]),
        gold_answers=tuple(str(a) for a in answers),
        passages=None if passages is None else tuple(str(p) for p in passages),
        source=str(obj.get("source", "")),
    )


def item_to_json(item: QAItem) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": item.id,
        "question": item.question,
        "answers": list(item.gold_answers),
    }
    if item.passages is not None:
        out["passages"] = list(item.passages)
    if item.source:
        out["source"] = item.source
    return out


def load_dataset(path: str | Path) -> list[QAItem]:
    """Read a JSONL dataset, keeping file order and rejecting duplicate ids."""
    items: list[QAItem] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                item = item_from_json(json.loads(line))
            except (ValueError, KeyError, TypeError, ContractError) as exc:
                raise DataError(f"{path}:{lineno}: malformed dataset line ({exc})") from exc
            if item.id in seen:
                raise DataError(
                    f"{path}: duplicate id {item.id!r} on lines {seen[item.id]} and {lineno}"
                )
            seen[item.id] = lineno
            items.append(item)
    return items


def write_dataset(items: Iterable[QAItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item_to_json(item), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# audit records


def _finite_or_none(x: float | None) -> float | None:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return float(x)


def trace_to_json(trace: GenerationTrace) -> dict[str, Any]:
    s = trace.sampling
    return {
        "item_id": trace.item_id,
        "role_tag": trace.role_tag.value,
        "prompt_messages": [[role, text] for role, text in trace.prompt_messages],
        "output_text": trace.output_text,
        "token_logprobs": [
            [t.token, t.logprob, [[alt, lp] for alt, lp in t.top_alternatives]]
            for t in trace.token_logprobs
        ],
        "sampling": {
            "temperature": s.temperature,
            "top_p": s.top_p,
            "top_k": s.top_k,
            "max_tokens": s.max_tokens,
            "n": s.n,
            "seed": s.seed,
        },
        "created_at": trace.created_at,
        "retry_count": trace.retry_count,
        "notes": list(trace.notes),
    }


def trace_from_json(obj: Mapping[str, Any]) -> GenerationTrace:
    return GenerationTrace(
        item_id=obj["item_id"],
        role_tag=RoleTag(obj["role_tag"]),
        prompt_messages=tuple((r, t) for r, t in obj["prompt_messages"]),
        output_text=obj["output_text"],
        token_logprobs=tuple(
            TokenLogprob(tok, float(lp), tuple((a, float(alp)) for a, alp in alts))
            for tok, lp, alts in obj["token_logprobs"]
        ),
        sampling=SamplingParams(**obj["sampling"]),
        created_at=obj["created_at"],
        retry_count=obj.get("retry_count", 0),
        notes=tuple(obj.get("notes", ())),
    )


def belief_to_json(b: BeliefVector) -> dict[str, Any]:
    return {
        "item_id": b.item_id,
        "raw": {k: _finite_or_none(v) for k, v in b.raw.items()},
        "normalized": {k: _finite_or_none(v) for k, v in b.normalized.items()},
        "ensemble": _finite_or_none(b.ensemble),
        "ensemble_partial": b.ensemble_partial,
        "parse_failed": sorted(b.parse_failed),
    }


def belief_from_json(obj: Mapping[str, Any]) -> BeliefVector:
    return BeliefVector(
        item_id=obj["item_id"],
        raw=dict(obj["raw"]),
        normalized=dict(obj["normalized"]),
        ensemble=obj["ensemble"],
        parse_failed=frozenset(obj["parse_failed"]),
        ensemble_partial=obj.get("ensemble_partial", False),
    )


def verdict_to_json(v: Verdict) -> dict[str, Any]:
    return {
        "item_id": v.item_id,
        "outcome": v.outcome.value,
        "classification": v.classification.value,
        "belief_used": _finite_or_none(v.belief_used),
        "threshold_used": _finite_or_none(v.threshold_used),
    }


def verdict_from_json(obj: Mapping[str, Any]) -> Verdict:
    return Verdict(
        item_id=obj["item_id"],
        outcome=Outcome(obj["outcome"]),
        classification=Classification(obj["classification"]),
        belief_used=obj["belief_used"],
        threshold_used=obj["threshold_used"],
    )


def record_to_json(rec: AuditRecord) -> dict[str, Any]:
    return {
        "item": item_to_json(rec.item),
        "traces": [trace_to_json(t) for t in rec.traces],
        "belief": belief_to_json(rec.belief),
        "verdict": None if rec.verdict is None else verdict_to_json(rec.verdict),
        "method_verdicts": {m: verdict_to_json(v) for m, v in rec.method_verdicts.items()},
    }


def record_from_json(obj: Mapping[str, Any]) -> AuditRecord:
    return AuditRecord(
        item=item_from_json(obj["item"]),
        traces=tuple(trace_from_json(t) for t in obj["traces"]),
        belief=belief_from_json(obj["belief"]),
        verdict=None if obj["verdict"] is None else verdict_from_json(obj["verdict"]),
        method_verdicts={m: verdict_from_json(v) for m, v in obj["method_verdicts"].items()},
    )


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False) + "\n"


def save_records(records: Iterable[AuditRecord], path: str | Path) -> None:
    path = Path(path)
    lines = [dumps_line({"format": RECORDS_FORMAT, "version": RECORDS_VERSION})]
    lines += [dumps_line(record_to_json(r)) for r in records]
    try:
        path.write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write records to {path}: {exc}") from exc


def load_records(path: str | Path) -> list[AuditRecord]:
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise DataError(f"{path}: empty records file (missing header)")
        header = json.loads(header_line)
        if header.get("format") != RECORDS_FORMAT:
            raise DataError(f"{path}: not an audit records file")
        if header.get("version") != RECORDS_VERSION:
            raise FormatVersionError(
                f"{path}: records version {header.get('version')!r}, expected {RECORDS_VERSION}"
            )
        out = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                out.append(record_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
        return out
