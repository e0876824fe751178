"""The five belief estimators.

Scoring functions (``*_from_trace``, :func:`raw_logits_belief`,
:func:`agreement_belief`) are pure over saved traces, so a run can be
re-scored without touching the endpoint. The ``*_belief`` functions that take
a client issue the prompt first and then defer to the pure scorer.

An unscoreable item raises :class:`~delusion_audit.errors.ParseFailure`; the
pipeline records that method as ``parse_failed`` for the item.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import Sequence

from .client import Request
from .core import GenerationTrace, RoleTag, SamplingParams
from .errors import AuditError, ContractError, ParseFailure
from .grading import canonical
from .prompts import load_template

DEFAULT_CONSISTENCY_N = 10
DEFAULT_TOP_LOGPROBS = 10
MAX_TOKENS = 128


def raw_logits_belief(trace: GenerationTrace) -> float:
    """exp(mean token logprob), i.e. the inverse perplexity of the completion."""
    if not trace.token_logprobs:
        raise ParseFailure(f"no token logprobs for item {trace.item_id!r}")
    logprobs = [t.logprob for t in trace.token_logprobs]
    return math.exp(math.fsum(logprobs) / len(logprobs))


def modal_answer(answers: Sequence[str]) -> tuple[str, int]:
    """Most frequent answer; ties go to the lexicographically smallest."""
    if not answers:
        raise ContractError("agreement needs at least one answer")
    counts = Counter(answers)
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best), best


def agreement_belief(answers: Sequence[str]) -> float:
    _, count = modal_answer(answers)
    return count / len(answers)


# -- P(true) -----------------------------------------------------------------


def p_true_pair(logprob_true: float, logprob_false: float) -> tuple[float, float]:
    """Softmax over the two logprobs; the two values sum to one."""
    p_true = 1.0 / (1.0 + math.exp(logprob_false - logprob_true))
    return p_true, 1.0 - p_true


def _variant(token: str) -> str | None:
    t = token.strip().lower()
    if t.startswith("true"):
        return "true"
    if t.startswith("false"):
        return "false"
    return None


def p_true_from_trace(trace: GenerationTrace) -> float:
    best: dict[str, float] = {}
    if trace.token_logprobs:
        first = trace.token_logprobs[0]
        for tok, lp in ((first.token, first.logprob), *first.top_alternatives):
            kind = _variant(tok)
            if kind is not None and lp > best.get(kind, -math.inf):
                best[kind] = lp
    if len(best) == 2:
        return p_true_pair(best["true"], best["false"])[0]
    # fall back to what the model actually said
    said = _variant(trace.output_text)
    if said is not None:
        return 1.0 if said == "true" else 0.0
    if len(best) == 1:
        return 1.0 if "true" in best else 0.0
    raise ParseFailure(f"no True/False token for item {trace.item_id!r}")


def p_true_messages(question: str, answer: str):
    return load_template("p_true").render(question=question, answer=answer)


def p_true_belief(client, question: str, answer: str, item_id: str = "") -> float:
    trace = client.complete(
        p_true_messages(question, answer),
        SamplingParams(max_tokens=MAX_TOKENS),
        want_logprobs=True,
        top_logprobs_k=DEFAULT_TOP_LOGPROBS,
        item_id=item_id,
        role_tag=RoleTag.P_TRUE,
    )
    return p_true_from_trace(trace)


# -- verbalized confidence ---------------------------------------------------

_NUMBER = r"(\d+(?:\.\d+)?)"
_PERCENT_RE = re.compile(_NUMBER + r"\s*%")
_KEYWORD_RE = re.compile(
    r"\b(?:confidence|confident|certainty)\b[^\d%]{0,30}?" + _NUMBER, re.IGNORECASE
)
_CONFIDENCE_CLAUSE_RE = re.compile(
    r"(?:\b(?:confidence|confident|certainty)\b|\(?\s*\d+(?:\.\d+)?\s*%)", re.IGNORECASE
)


def parse_confidence(text: str) -> float | None:
    """Last percentage in ``text``, or last keyword-led number in [0, 100]."""
    candidates = [(m.start(1), float(m.group(1))) for m in _PERCENT_RE.finditer(text)]
    for m in _KEYWORD_RE.finditer(text):
        value = float(m.group(1))
        if value <= 100:
            candidates.append((m.start(1), value))
    if not candidates:
        return None
    _, value = max(candidates)
    return min(max(value / 100.0, 0.0), 1.0)


def strip_confidence(text: str) -> str:
    """The answer part of a one-stage verbalized response."""
    m = _CONFIDENCE_CLAUSE_RE.search(text)
    head = text[: m.start()] if m else text
    return head.strip().rstrip(",;:-(").strip()


def verb_1s_from_trace(trace: GenerationTrace) -> tuple[str, float]:
    conf = parse_confidence(trace.output_text)
    if conf is None:
        raise ParseFailure(f"no confidence in verb_1s output for {trace.item_id!r}")
    return strip_confidence(trace.output_text), conf


def verb_2s_from_trace(trace: GenerationTrace) -> float:
    conf = parse_confidence(trace.output_text)
    if conf is None:
        raise ParseFailure(f"no confidence in verb_2s output for {trace.item_id!r}")
    return conf


def verb_1s_messages(question: str):
    return load_template("verb_1s").render(question=question)


def verb_2s_messages(question: str, previous_answer: str):
    return load_template("verb_2s").render(question=question, previous_answer=previous_answer)


def verb_1s_belief(client, question: str, item_id: str = "") -> tuple[str, float]:
    trace = client.complete(
        verb_1s_messages(question),
        SamplingParams(max_tokens=MAX_TOKENS),
        item_id=item_id,
        role_tag=RoleTag.VERB_1S,
    )
    return verb_1s_from_trace(trace)


def verb_2s_belief(client, question: str, previous_answer: str, item_id: str = "") -> float:
    trace = client.complete(
        verb_2s_messages(question, previous_answer),
        SamplingParams(max_tokens=MAX_TOKENS),
        item_id=item_id,
        role_tag=RoleTag.VERB_2S,
    )
    return verb_2s_from_trace(trace)


# -- consistency -------------------------------------------------------------


def consistency_messages(question: str):
    return load_template("consistency").render(question=question)


def consistency_requests(question: str, n: int, item_id: str = "", seed: int = 0, messages=None):
    if n < 2:
        raise ContractError(f"consistency needs n >= 2 samples, got {n}")
    messages = messages or consistency_messages(question)
    return [
        Request(
            messages=tuple(messages),
            sampling=SamplingParams.for_consistency(seed=seed + i, max_tokens=MAX_TOKENS),
            item_id=item_id,
            role_tag=RoleTag.CONSISTENCY_SAMPLE,
        )
        for i in range(n)
    ]


def consistency_samples(
    client, question: str, n: int = DEFAULT_CONSISTENCY_N, item_id: str = "", seed: int = 0
) -> list[GenerationTrace | AuditError]:
    """Draw ``n`` samples; sample ``i`` carries seed ``seed + i``."""
    return client.complete_batch(consistency_requests(question, n, item_id, seed))


def agreement_from_traces(traces: Sequence[GenerationTrace | AuditError]) -> float:
    answers = [canonical(t.output_text) for t in traces if isinstance(t, GenerationTrace)]
    if len(answers) < 2:
        raise ParseFailure(f"only {len(answers)} usable consistency samples")
    return agreement_belief(answers)
