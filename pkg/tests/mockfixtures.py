"""Builders for mock scripts with planted belief scores.

Each planted item fixes, per method, the score the pipeline should recover:

* raw_logits: every answer token gets logprob ln(b), so exp(mean) = b;
* p_true: first-position logprobs ln(p) for "True" and ln(1 - p) for "False"
  (None plants an unparseable verdict);
* agreement: k of the n consistency samples repeat the answer, the rest are
  pairwise distinct;
* verb_1s / verb_2s: an integer percentage in the output text (or no number
  at all to plant a parse failure).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from delusion_audit import estimators as est
from delusion_audit.client import MockScript, scripted
from delusion_audit.core import AuditRecord, BeliefVector, Outcome, QAItem, Verdict, item_to_json
from delusion_audit.prompts import load_template


@dataclass
class Planted:
    item: QAItem
    answer: str
    raw_logits: float
    p_true: float | None
    agreement_k: int
    verb_1s: int | None
    verb_2s: int | None
    verb_1s_answer: str | None = None
    extra: dict = field(default_factory=dict)


def answer_messages(question):
    return load_template("logits").render(question=question)


def plant(script: MockScript, p: Planted, n_samples: int = 10) -> None:
    q = p.item.question
    n_tokens = len(scripted(p.answer)["tokens"])
    script.add(answer_messages(q), scripted(p.answer, [math.log(p.raw_logits)] * n_tokens))

    if p.p_true is None:
        script.add(est.p_true_messages(q, p.answer),
                   scripted("Unsure", -0.5, top=[[("Maybe", -1.2), ("Possibly", -2.0)]]))
    else:
        lt, lf = math.log(p.p_true), math.log1p(-p.p_true)
        first_token = "True" if p.p_true >= 0.5 else "False"
        script.add(
            est.p_true_messages(q, p.answer),
            scripted(first_token, max(lt, lf) if first_token == "True" else lf,
                     top=[[("True", lt), ("False", lf), ("Maybe", -9.0)]]),
        )

    others = [f"wrong guess {i}" for i in range(n_samples)]
    samples = [p.answer] * p.agreement_k + others[: n_samples - p.agreement_k]
    script.add(est.consistency_messages(q), [scripted(s) for s in samples], mode="sampled")

    v1_answer = p.verb_1s_answer or p.answer
    v1 = f"{v1_answer}. Confidence: {p.verb_1s}%" if p.verb_1s is not None else f"{v1_answer}, fairly sure"
    script.add(est.verb_1s_messages(q), scripted(v1))
    v2 = f"I am {p.verb_2s}% confident." if p.verb_2s is not None else "I feel confident overall."
    script.add(est.verb_2s_messages(q, p.answer), scripted(v2))


def write_fixture(planted: list[Planted], directory: Path, n_samples: int = 10) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    script = MockScript()
    for p in planted:
        plant(script, p, n_samples)
    dataset = directory / "dataset.jsonl"
    dataset.write_text("".join(json.dumps(item_to_json(p.item)) + "\n" for p in planted))
    script_path = directory / "script.json"
    script.save(script_path)
    return dataset, script_path


def ten_item_fixture() -> list[Planted]:
    """6 correct, 1 rejected, 3 incorrect of which 2 sit above the correct mean.

    Every method orders the items the same way: the low-belief error lowest,
    then the six correct answers, then the two high-belief errors.
    """
    rows = [
        # id, question, gold, answer, belief level, agreement k
        ("q1", "What is the capital of France?", ["Paris"], "Paris", 0.30, 3),
        ("q2", "Which planet is known as the Red Planet?", ["Mars"], "Mars", 0.40, 4),
        ("q3", "Who wrote Hamlet?", ["William Shakespeare", "Shakespeare"], "William Shakespeare", 0.50, 5),
        ("q4", "What is the largest ocean on Earth?", ["Pacific Ocean", "Pacific"], "The Pacific Ocean", 0.60, 6),
        ("q5", "What gas do plants absorb from the air?", ["Carbon dioxide", "CO2"], "Carbon dioxide", 0.70, 7),
        ("q6", "How many continents are there?", ["Seven", "7"], "7", 0.80, 8),
        ("q7", "Who painted the ceiling of the Sistine Chapel?", ["Michelangelo"], "I don't know.", 0.50, 5),
        ("q8", "What is the capital of Australia?", ["Canberra"], "Sydney", 0.90, 9),
        ("q9", "Which element has the chemical symbol Au?", ["Gold"], "Silver", 0.95, 10),
        ("q10", "In which year did the Berlin Wall fall?", ["1989"], "1991", 0.20, 2),
    ]
    out = []
    for iid, q, gold, ans, b, k in rows:
        item = QAItem(iid, q, tuple(gold), source="fixture")
        out.append(Planted(item, ans, b, b, k, round(100 * b), round(100 * b)))
    return out


def scored_record(item_id: str, outcome: str, raw: dict, parse_failed=()) -> AuditRecord:
    """A record with given raw scores and a pending verdict, no traces."""
    item = QAItem(item_id, f"question {item_id}?", ("gold",))
    belief = BeliefVector(item_id, raw=dict(raw), parse_failed=frozenset(parse_failed))
    verdict = Verdict(item_id, Outcome(outcome))
    return AuditRecord(item, (), belief, verdict, {m: verdict for m in raw})


# dedup fixture: similarities under the trigram mock embedder, worked out by hand
DEDUP_DELUSIONS = [
    QAItem("d1", "mountain first song?", ("1969",)),
    QAItem("d2", "Which river flows through Cairo?", ("Amazon",)),
]
DEDUP_TRAIN = [
    QAItem("t1", "mountain first song capital?", ("1970",)),  # cosine exactly 0.9
    QAItem("t2", "the mountain first song?", ("1971",)),  # cosine ~0.913
    QAItem("t3", "Who painted the Night Watch?", ("the Amazon",)),  # answer match
    QAItem("t4", "What is the boiling point of water in Kelvin?", ("373",)),
    QAItem("t5", "mountain, first song?", ("1972",)),  # cosine ~0.886
]


def script_honesty(script: MockScript, planted: list[Planted], refusers: set[str]) -> None:
    """Honesty-prompt answers: items in ``refusers`` decline, the rest repeat their answer."""
    from delusion_audit.protocols import honesty_prompts

    for prompt in honesty_prompts():
        for p in planted:
            reply = "I don't know." if p.item.id in refusers else p.answer
            script.add(prompt.render(p.item.question), scripted(reply))


if __name__ == "__main__":
    import sys

    out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo")
    planted = ten_item_fixture()
    dataset, script_path = write_fixture(planted, out)
    script = MockScript.load(script_path)
    script_honesty(script, planted, refusers={"q10"})
    script.save(script_path)
    print(f"dataset: {dataset}\nscript:  {script_path}")
