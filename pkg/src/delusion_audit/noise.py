"""Training-data procedures: noisy answer synthesis, refusal SFT sets and
similarity-based dedup against known delusions.

Outputs are chat-style records::

    {"messages": [{"role": "system", ...}, {"role": "user", ...},
                  {"role": "assistant", ...}],
     "meta": {...}}

Every procedure is deterministic given its seed; per-item generators are
seeded with ``seed ^ crc32(item_id)`` so items can be processed in any order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import random
import string
import time
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .calibrate import outcome_for
from .client import EndpointConfig
from .core import AuditRecord, Classification, Outcome, QAItem
from .errors import ContractError, DataError, TransientError, TransportError
from .grading import canonical

log = logging.getLogger(__name__)

IDENTICAL_FRACTION = {4: 1.00, 3: 0.75, 2: 0.50, 1: 0.25}
SFT_SYSTEM = "You are a helpful assistant."
REFUSAL_TARGET = "I don't know"
EDIT_OPS = ("insert", "delete", "replace")


@dataclass(frozen=True)
class NoiseSpec:
    proportion: float
    level: int
    variants_per_item: int = 20
    seed: int = 0
    edits: int = 1

    def __post_init__(self):
        if not 0.0 <= self.proportion <= 1.0:
            raise ContractError("proportion must lie in [0, 1]")
        if self.level not in IDENTICAL_FRACTION:
            raise ContractError(f"noise level must be one of {sorted(IDENTICAL_FRACTION)}")
        if self.variants_per_item < 1 or self.edits < 1:
            raise ContractError("variants_per_item and edits must be >= 1")

    @property
    def identical_count(self) -> int:
        # round() guards against 0.75 * 20 landing a hair above 15
        return math.ceil(round(IDENTICAL_FRACTION[self.level] * self.variants_per_item, 9))


def item_seed(seed: int, item_id: str) -> int:
    return seed ^ zlib.crc32(item_id.encode("utf-8"))


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


# -- perturbation ------------------------------------------------------------


def _alphabet(ch: str) -> str | None:
    if ch in string.digits:
        return string.digits
    if ch in string.ascii_lowercase:
        return string.ascii_lowercase
    if ch in string.ascii_uppercase:
        return string.ascii_uppercase
    return None


def _default_alphabet(answer: str) -> str:
    return string.digits if any(c.isdigit() for c in answer) else string.ascii_lowercase


def apply_edit(answer: str, op: str, index: int, char: str = "") -> str:
    if op == "insert":
        return answer[:index] + char + answer[index:]
    if op == "delete":
        if len(answer) <= 1:
            raise ContractError("cannot delete from a single-character answer")
        return answer[:index] + answer[index + 1 :]
    if op == "replace":
        if char == answer[index]:
            raise ContractError("replacement must change the character")
        return answer[:index] + char + answer[index + 1 :]
    raise ContractError(f"unknown edit {op!r}")


def _one_edit(answer: str, rng: random.Random, op: str | None = None) -> str:
    ops = EDIT_OPS if len(answer) > 1 else ("insert", "replace")
    op = op or rng.choice(ops)
    if op == "delete":
        return apply_edit(answer, op, rng.randrange(len(answer)))
    if op == "insert":
        pos = rng.randrange(len(answer) + 1)
        neighbour = answer[rng.randrange(len(answer))]
        alphabet = _alphabet(neighbour) or _default_alphabet(answer)
        return apply_edit(answer, op, pos, rng.choice(alphabet))
    idx = rng.randrange(len(answer))
    alphabet = _alphabet(answer[idx]) or _default_alphabet(answer)
    return apply_edit(answer, op, idx, rng.choice([c for c in alphabet if c != answer[idx]]))


def perturb_answer(answer: str, rng: random.Random, edits: int = 1, op: str | None = None) -> str:
    """Apply ``edits`` random character edits (insert / delete / replace).

    Digits are replaced or joined by digits and letters by letters of the same
    case. With ``edits=1`` the result is always at edit distance exactly 1.
    """
    if not answer:
        raise ContractError("cannot perturb an empty answer")
    while True:
        out = answer
        for _ in range(edits):
            out = _one_edit(out, rng, op)
        if out != answer:
            return out


# -- SFT record helpers ------------------------------------------------------


def sft_record(question: str, answer: str, **meta: Any) -> dict[str, Any]:
    return {
        "messages": [
            {"role": "system", "content": SFT_SYSTEM},
            {"role": "user", "content": question},
            {"role": "assistant", "content": answer},
        ],
        "meta": meta,
    }


def write_jsonl(rows: Iterable[dict[str, Any]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


# -- noise synthesis ---------------------------------------------------------


def noisy_variants(answer: str, spec: NoiseSpec, rng: random.Random) -> list[str]:
    """``identical_count`` copies of one perturbation, then distinct ones."""
    shared = perturb_answer(answer, rng, spec.edits)
    variants = [shared] * spec.identical_count
    seen = {shared}
    budget = 1000 * spec.variants_per_item
    while len(variants) < spec.variants_per_item:
        budget -= 1
        if budget < 0:
            raise DataError(f"cannot draw enough distinct perturbations of {answer!r}")
        p = perturb_answer(answer, rng, spec.edits)
        if p not in seen:
            seen.add(p)
            variants.append(p)
    return variants


def synthesize_noise_set(items: Sequence[QAItem], spec: NoiseSpec) -> list[dict[str, Any]]:
    """A ``proportion`` of items become noisy; the rest stay clean.

    Each noisy item yields ``variants_per_item`` records with perturbed
    answers, ``identical_count`` of them sharing one perturbation. Each clean
    item yields one record with its first gold answer.
    """
    exact = IDENTICAL_FRACTION[spec.level] * spec.variants_per_item
    if abs(exact - round(exact)) > 1e-9:
        warnings.warn(
            f"level {spec.level} with {spec.variants_per_item} variants: identical group "
            f"rounded up from {exact:g} to {spec.identical_count}",
            stacklevel=2,
        )
    n_noisy = round_half_up(spec.proportion * len(items))
    noisy = set(random.Random(spec.seed).sample(range(len(items)), n_noisy))
    out = []
    for idx, item in enumerate(items):
        answer = item.gold_answers[0]
        if idx not in noisy:
            out.append(sft_record(item.question, answer, item_id=item.id, noisy=False))
            continue
        rng = random.Random(item_seed(spec.seed, item.id))
        for v, text in enumerate(noisy_variants(answer, spec, rng)):
            out.append(
                sft_record(
                    item.question,
                    text,
                    item_id=item.id,
                    noisy=True,
                    variant=v,
                    identical_group=v < spec.identical_count,
                    level=spec.level,
                )
            )
    return out


# -- refusal SFT -------------------------------------------------------------


def build_refusal_sft_set(
    records: Sequence[AuditRecord],
    refuse_ratio: float,
    total: int,
    seed: int = 0,
    method: str | None = None,
) -> list[dict[str, Any]]:
    """Mix refusal targets on wrongly answered questions with gold answers on
    correctly answered ones, ``round(refuse_ratio * total)`` refusals in all."""
    if not 0.0 < refuse_ratio < 1.0:
        raise ContractError("refuse_ratio must lie in (0, 1)")
    if total < 1:
        raise ContractError("total must be >= 1")

    def verdict(r: AuditRecord):
        return r.method_verdicts.get(method) if method else r.verdict

    wrong = [r for r in records if outcome_for(r, method or "") is Outcome.INCORRECT]
    right = [r for r in records if outcome_for(r, method or "") is Outcome.CORRECT]
    n_refuse = round_half_up(refuse_ratio * total)
    n_answer = total - n_refuse
    if n_refuse > len(wrong):
        raise DataError(f"need {n_refuse} incorrect records for refusals, pool has {len(wrong)}")
    if n_answer > len(right):
        raise DataError(f"need {n_answer} correct records for answers, pool has {len(right)}")
    rng = random.Random(seed)
    out = []
    for r in rng.sample(wrong, n_refuse):
        v = verdict(r)
        label = v.classification.value if v else Classification.NONE.value
        out.append(sft_record(r.item.question, REFUSAL_TARGET, item_id=r.item.id, target="refuse", label=label))
    for r in rng.sample(right, n_answer):
        out.append(
            sft_record(r.item.question, r.item.gold_answers[0], item_id=r.item.id, target="answer",
                       label=Classification.NONE.value)
        )
    rng.shuffle(out)
    return out


# -- embeddings --------------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch {a.shape} vs {b.shape}")
    na2, nb2 = np.dot(a, a), np.dot(b, b)
    if na2 == 0 or nb2 == 0:
        raise ContractError("cosine similarity of a zero vector is undefined")
    # one square root of the product keeps integer-valued cases exact
    return float(np.clip(np.dot(a, b) / np.sqrt(na2 * nb2), -1.0, 1.0))


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


class MockEmbedder:
    """Signed hashing of character trigrams into a fixed number of buckets.

    Identical texts embed identically; texts sharing no trigram only overlap
    through bucket collisions, whose random signs keep cosine near zero.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _grams(self, text: str) -> list[str]:
        text = text.lower()
        if len(text) < 3:
            return [text] if text else []
        return [text[i : i + 3] for i in range(len(text) - 2)]

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ContractError("embed needs at least one text")
        out = []
        for text in texts:
            vec = np.zeros(self.dim)
            for g in self._grams(text):
                d = hashlib.blake2b(g.encode("utf-8"), digest_size=8).digest()
                bucket = int.from_bytes(d[:4], "little") % self.dim
                vec[bucket] += 1.0 if d[4] & 1 else -1.0
            out.append(vec)
        return out


class RemoteEmbedder:
    """``POST {base_url}/v1/embeddings`` with ``{"model", "input"}``."""

    def __init__(
        self,
        config: EndpointConfig,
        batch_size: int = 256,
        sleep=time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.batch_size = batch_size
        self.sleep = sleep
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=config.request_timeout, headers=headers, transport=transport)
        self.url = config.base_url.rstrip("/") + "/v1/embeddings"

    def _post(self, texts: Sequence[str]) -> list[np.ndarray]:
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self._client.post(self.url, json={"model": self.config.model_name, "input": list(texts)})
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise TransientError(f"HTTP {resp.status_code}")
                if resp.status_code >= 400:
                    raise TransportError(f"{self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
                data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
                return [np.asarray(d["embedding"], dtype=float) for d in data]
            except (TransientError, httpx.TimeoutException, httpx.TransportError) as exc:
                if attempt == self.config.max_retries:
                    raise TransportError(f"{self.url}: {exc}") from exc
                self.sleep(0.5 * 2**attempt)
        raise AssertionError("unreachable")

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ContractError("embed needs at least one text")
        out: list[np.ndarray] = []
        for start in range(0, len(texts), self.batch_size):
            try:
                out.extend(self._post(texts[start : start + self.batch_size]))
            except TransportError as exc:
                raise TransportError(f"embedding aborted after {len(out)}/{len(texts)} texts: {exc}") from exc
        return out


def embed(texts: Sequence[str], embedder: Embedder) -> list[np.ndarray]:
    if not texts:
        raise ContractError("embed needs at least one text")
    return embedder.embed(list(texts))


# -- dedup refinement --------------------------------------------------------


def _text_for(item: QAItem, embed_qa: bool) -> str:
    return f"{item.question}\n{item.gold_answers[0]}" if embed_qa else item.question


def similarity_matrix(left: Sequence[np.ndarray], right: Sequence[np.ndarray]) -> np.ndarray:
    L, R = np.vstack(left), np.vstack(right)
    nl, nr = np.einsum("ij,ij->i", L, L), np.einsum("ij,ij->i", R, R)
    if (nl == 0).any() or (nr == 0).any():
        raise ContractError("cosine similarity of a zero vector is undefined")
    return np.clip((L @ R.T) / np.sqrt(np.outer(nl, nr)), -1.0, 1.0)


def dedup_refine(
    records: Sequence[QAItem],
    delusion_examples: Sequence[QAItem],
    embedder: Embedder,
    sim_threshold: float = 0.9,
    embed_qa: bool = False,
) -> tuple[list[QAItem], list[dict[str, Any]]]:
    """Drop records sharing an answer with, or too similar to, a known delusion.

    Similarity must strictly exceed ``sim_threshold`` to trigger removal.
    Returns the kept records and one report row per removal.
    """
    if not delusion_examples:
        raise ContractError("dedup_refine needs at least one delusion example")
    if not records:
        return [], []
    rec_vecs = embed([_text_for(r, embed_qa) for r in records], embedder)
    del_vecs = embed([_text_for(d, embed_qa) for d in delusion_examples], embedder)
    sims = similarity_matrix(rec_vecs, del_vecs)
    del_answers = [canonical(d.gold_answers[0]) for d in delusion_examples]

    kept, removed = [], []
    for i, rec in enumerate(records):
        ans = canonical(rec.gold_answers[0])
        hit = next((j for j, a in enumerate(del_answers) if ans and a == ans), None)
        if hit is not None:
            trigger = "answer_match"
        else:
            hit = int(np.argmax(sims[i]))
            trigger = "similarity" if sims[i, hit] > sim_threshold else None
        if trigger is None:
            kept.append(rec)
            continue
        removed.append(
            {
                "record_id": rec.id,
                "trigger": trigger,
                "matched_delusion_id": delusion_examples[hit].id,
                "similarity": float(sims[i, hit]),
            }
        )
    return kept, removed


def write_removal_report(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["record_id", "trigger", "matched_delusion_id", "similarity"], lineterminator="\n"
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "similarity": repr(row["similarity"])})
