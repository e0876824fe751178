"""End-to-end runs: audit, re-scoring, and the protocol commands.

A run directory holds ``config.json`` (effective configuration),
``records.jsonl`` (items, traces, beliefs, verdicts) and
``report.{json,csv,md}``. Protocol commands read a baseline run directory and
add their own files next to it without touching ``records.jsonl``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import estimators as est
from .calibrate import ThresholdSpec, belief_threshold, classify, ensemble, normalize_run
from .client import Client, EndpointConfig, Request
from .core import (
    ENSEMBLE,
    METHODS,
    AuditRecord,
    BeliefVector,
    GenerationTrace,
    Outcome,
    QAItem,
    RoleTag,
    Verdict,
    dumps_line,
    load_dataset,
    load_records,
    save_records,
    trace_to_json,
)
from .errors import AuditError, ConfigError, DataError, ParseFailure, ThresholdUndefinedError, TransportError
from .grading import grade, load_lexicon
from .prompts import dump_prompt, format_passages, load_template
from .protocols import (
    GREEDY,
    ReflectionOutcome,
    VoteConfig,
    discard,
    honesty_battery,
    honesty_prompts,
    judge_reflection,
    rag_messages,
    rag_request,
    reflection_messages,
    reflection_summary,
    vote_verify,
)
from .report import RunReport, aggregate, compare_runs, emit, load_report

log = logging.getLogger(__name__)

DEFAULT_ENSEMBLE = ("p_true", "agreement", "raw_logits")


@dataclass
class RunConfig:
    endpoint: EndpointConfig
    dataset_path: str
    methods: tuple[str, ...] = METHODS
    ensemble_methods: tuple[str, ...] | None = None
    normalized: bool = True
    ensemble_normalized: bool = True
    consistency_n: int = est.DEFAULT_CONSISTENCY_N
    seed: int = 0
    output_dir: str = "runs"
    strict_em: bool = False
    verb1s_own_answer: bool = False
    primary_method: str | None = None
    lexicon_path: str | None = None
    parallelism: int | None = None
    run_name: str | None = None

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ConfigError("at least one belief method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.ensemble_methods is not None:
            self.ensemble_methods = tuple(self.ensemble_methods)
            if not set(self.ensemble_methods) <= set(self.methods):
                raise ConfigError("ensemble methods must all be among the scored methods")
        if "agreement" in self.methods and self.consistency_n < 2:
            raise ConfigError("consistency_n must be >= 2 when agreement is requested")
        if self.primary is not None and self.primary not in self.all_methods:
            raise ConfigError(f"primary method {self.primary!r} is not scored")

    @property
    def all_methods(self) -> tuple[str, ...]:
        return self.methods + ((ENSEMBLE,) if self.ensemble_methods else ())

    @property
    def primary(self) -> str:
        if self.primary_method:
            return self.primary_method
        return ENSEMBLE if self.ensemble_methods else self.methods[0]

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["ensemble_methods"] = None if self.ensemble_methods is None else list(self.ensemble_methods)
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> RunConfig:
        d = dict(d)
        if "endpoint" not in d or "dataset_path" not in d:
            raise ConfigError("config needs 'endpoint' and 'dataset_path'")
        d["endpoint"] = EndpointConfig.from_dict(d["endpoint"])
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        try:
            return cls(**known)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc


# ---------------------------------------------------------------------------
# prompts


def answer_request(item: QAItem, rag: bool, want_logprobs: bool) -> Request:
    if rag:
        return replace(rag_request(item), want_logprobs=want_logprobs)
    messages = load_template("logits").render(question=item.question)
    return Request(messages, GREEDY, item.id, RoleTag.ANSWER, want_logprobs=want_logprobs)


def dry_run_prompts(items: Sequence[QAItem], config: RunConfig, rag: bool = False) -> str:
    """Every prompt an audit would send, with answer placeholders left in."""
    blocks = []
    for item in items:
        q = item.question
        if rag:
            passages = format_passages(item.passages)
            blocks.append(dump_prompt(f"{item.id} answer", load_template("rag"), question=q, passages=passages))
        else:
            blocks.append(dump_prompt(f"{item.id} answer", load_template("logits"), question=q))
        if "p_true" in config.methods:
            blocks.append(dump_prompt(f"{item.id} p_true", load_template("p_true"), question=q, answer="{answer}"))
        if "agreement" in config.methods and not rag:
            blocks.append(dump_prompt(f"{item.id} consistency", load_template("consistency"), question=q))
        if "verb_1s" in config.methods and not rag:
            blocks.append(dump_prompt(f"{item.id} verb_1s", load_template("verb_1s"), question=q))
        if "verb_2s" in config.methods:
            blocks.append(
                dump_prompt(
                    f"{item.id} verb_2s", load_template("verb_2s"), question=q, previous_answer="{previous_answer}"
                )
            )
    return "".join(blocks)


# ---------------------------------------------------------------------------
# inference


def collect_traces(
    client: Client, items: Sequence[QAItem], config: RunConfig, rag: bool = False
) -> tuple[dict[str, list[GenerationTrace]], dict[str, str]]:
    """Query the endpoint for every trace the requested methods need.

    Returns traces per item id plus the answer-level failures by item id.
    Failures of method-specific calls are left out and later become
    ``parse_failed`` for that method.
    """
    methods = set(config.methods)
    par = config.parallelism
    want_lp = "raw_logits" in methods
    traces: dict[str, list[GenerationTrace]] = {it.id: [] for it in items}
    failures: dict[str, str] = {}

    first: list[Request] = [answer_request(it, rag, want_lp) for it in items]
    if "agreement" in methods:
        for it in items:
            msgs = rag_messages(it) if rag else None
            first += est.consistency_requests(it.question, config.consistency_n, it.id, config.seed, msgs)
    if "verb_1s" in methods and not rag:
        first += [
            Request(est.verb_1s_messages(it.question), GREEDY, it.id, RoleTag.VERB_1S) for it in items
        ]
    for req, res in zip(first, client.complete_batch(first, par)):
        if isinstance(res, AuditError):
            if req.role_tag in (RoleTag.ANSWER, RoleTag.RAG):
                failures[req.item_id] = str(res)
            else:
                log.warning("%s %s failed: %s", req.item_id, req.role_tag.value, res)
            continue
        traces[req.item_id].append(res)

    second: list[Request] = []
    for it in items:
        if it.id in failures:
            continue
        answer = _answer_text(traces[it.id])
        if "p_true" in methods:
            second.append(
                Request(
                    est.p_true_messages(it.question, answer),
                    GREEDY,
                    it.id,
                    RoleTag.P_TRUE,
                    want_logprobs=True,
                    top_logprobs_k=est.DEFAULT_TOP_LOGPROBS,
                )
            )
        if "verb_2s" in methods:
            second.append(Request(est.verb_2s_messages(it.question, answer), GREEDY, it.id, RoleTag.VERB_2S))
    for req, res in zip(second, client.complete_batch(second, par)):
        if isinstance(res, AuditError):
            log.warning("%s %s failed: %s", req.item_id, req.role_tag.value, res)
            continue
        traces[req.item_id].append(res)
    return traces, failures


def _answer_text(traces: Sequence[GenerationTrace]) -> str:
    for t in traces:
        if t.role_tag in (RoleTag.ANSWER, RoleTag.RAG):
            return t.output_text.strip()
    raise DataError("no answer trace")


# ---------------------------------------------------------------------------
# scoring (pure over traces)


def _first(traces: Sequence[GenerationTrace], role: RoleTag) -> GenerationTrace:
    for t in traces:
        if t.role_tag is role:
            return t
    raise ParseFailure(f"no {role.value} trace")


def score_item(
    item: QAItem, traces: Sequence[GenerationTrace], config: RunConfig, lexicon
) -> AuditRecord:
    answer = _answer_text(traces)
    outcome = grade(answer, item, config.strict_em, lexicon)
    outcomes = {m: outcome for m in config.all_methods}
    raw: dict[str, float | None] = {}
    failed = set()
    for method in config.methods:
        try:
            if method == "raw_logits":
                score = est.raw_logits_belief(_answer_trace(traces))
            elif method == "agreement":
                score = est.agreement_from_traces(
                    [t for t in traces if t.role_tag is RoleTag.CONSISTENCY_SAMPLE]
                )
            elif method == "p_true":
                score = est.p_true_from_trace(_first(traces, RoleTag.P_TRUE))
            elif method == "verb_1s":
                own, score = est.verb_1s_from_trace(_first(traces, RoleTag.VERB_1S))
                if config.verb1s_own_answer:
                    outcomes[method] = grade(own, item, config.strict_em, lexicon)
            else:
                score = est.verb_2s_from_trace(_first(traces, RoleTag.VERB_2S))
        except ParseFailure as exc:
            log.debug("%s: %s parse failed (%s)", item.id, method, exc)
            failed.add(method)
            raw[method] = None
            continue
        raw[method] = score
    belief = BeliefVector(item.id, raw=raw, parse_failed=frozenset(failed))
    pending = {m: Verdict(item.id, o) for m, o in outcomes.items()}
    return AuditRecord(item, tuple(traces), belief, None, pending)


def _answer_trace(traces):
    for t in traces:
        if t.role_tag in (RoleTag.ANSWER, RoleTag.RAG):
            return t
    raise ParseFailure("no answer trace")


def score_records(
    records: Sequence[AuditRecord], config: RunConfig
) -> tuple[list[AuditRecord], dict[str, ThresholdSpec]]:
    """Normalize, ensemble, threshold and classify a run's records."""
    records = normalize_run(records, config.methods)
    if config.ensemble_methods:
        beliefs = ensemble([r.belief for r in records], config.ensemble_methods, config.ensemble_normalized)
        records = [replace(r, belief=b) for r, b in zip(records, beliefs)]
    specs: dict[str, ThresholdSpec] = {}
    for method in config.all_methods:
        space = config.ensemble_normalized if method == ENSEMBLE else config.normalized
        try:
            spec = belief_threshold(records, method, space)
        except ThresholdUndefinedError as exc:
            log.warning("no threshold for %s: %s", method, exc)
            continue
        specs[method] = spec
        records = classify(records, spec)
    primary = config.primary
    records = [replace(r, verdict=r.method_verdicts[primary]) for r in records]
    return records, specs


def rescore(records: Sequence[AuditRecord], config: RunConfig) -> tuple[list[AuditRecord], dict[str, ThresholdSpec]]:
    """Recompute beliefs and verdicts from saved traces without any queries."""
    lexicon = load_lexicon(config.lexicon_path)
    fresh = [score_item(r.item, r.traces, config, lexicon) for r in records]
    return score_records(fresh, config)


# ---------------------------------------------------------------------------
# run directories


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text).strip("-") or "x"


def make_run_dir(config: RunConfig, stamp: str, overwrite: bool = False) -> Path:
    name = config.run_name or "_".join(
        [_slug(Path(config.dataset_path).stem), _slug(config.endpoint.model_name), _slug(stamp.replace(":", ""))]
    )
    path = Path(config.output_dir) / name
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise ConfigError(f"run directory {path} already exists (use --run-name or --overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run(run_dir: Path, config: RunConfig, records, specs, extra_sections=None) -> RunReport:
    (run_dir / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
    save_records(records, run_dir / "records.jsonl")
    report = aggregate(records, specs, config.all_methods, run_id=run_dir.name, model_name=config.endpoint.model_name)
    if extra_sections:
        report.protocol_sections.update(extra_sections)
    emit(report, run_dir)
    return report


def save_traces(traces: Sequence[GenerationTrace], path: Path) -> None:
    path.write_text("".join(dumps_line(trace_to_json(t)) for t in traces), encoding="utf-8")


def load_run(run_dir: str | Path) -> tuple[RunConfig, list[AuditRecord], RunReport]:
    run_dir = Path(run_dir)
    if not (run_dir / "records.jsonl").exists():
        raise DataError(f"{run_dir} is not a run directory; create one with the 'audit' command first")
    config = RunConfig.from_json(json.loads((run_dir / "config.json").read_text()))
    return config, load_records(run_dir / "records.jsonl"), load_report(run_dir / "report.json")


def run_audit(
    config: RunConfig, client: Client | None = None, rag: bool = False, overwrite: bool = False
) -> Path:
    items = load_dataset(config.dataset_path)
    if rag:
        missing = [it.id for it in items if not it.passages]
        if missing:
            raise DataError(f"RAG needs passages; missing for {missing[:5]}")
        if "verb_1s" in config.methods:
            log.warning("verb_1s has no RAG prompt and is skipped in RAG runs")
            config = replace(
                config,
                methods=tuple(m for m in config.methods if m != "verb_1s"),
                ensemble_methods=None if config.ensemble_methods is None
                else tuple(m for m in config.ensemble_methods if m != "verb_1s") or None,
            )
    client = client or Client(config.endpoint)
    lexicon = load_lexicon(config.lexicon_path)
    traces, failures = collect_traces(client, items, config, rag)
    run_dir = make_run_dir(config, client.clock(), overwrite)
    if failures:
        done = [t for it in items for t in traces[it.id]]
        save_traces(done, run_dir / "partial_traces.jsonl")
        first = next(iter(failures.items()))
        raise TransportError(
            f"{len(failures)} answers failed (e.g. item {first[0]!r}: {first[1]}); "
            f"partial traces saved in {run_dir}"
        )
    records = [score_item(it, traces[it.id], config, lexicon) for it in items]
    records, specs = score_records(records, config)
    write_run(run_dir, config, records, specs)
    return run_dir


def run_rescore(run_dir: str | Path, overrides: Mapping[str, Any], overwrite: bool = False) -> Path:
    config, records, _ = load_run(run_dir)
    config = replace(config, **overrides)
    records, specs = rescore(records, config)
    stamp = records[0].answer_trace.created_at if records else "empty"
    out = make_run_dir(config, stamp + "-rescored", overwrite)
    write_run(out, config, records, specs)
    return out


# ---------------------------------------------------------------------------
# protocols over a baseline run


def _update_report(run_dir: Path, section: str, payload: Any) -> RunReport:
    report = load_report(run_dir / "report.json")
    report.protocol_sections[section] = payload
    emit(report, run_dir)
    return report


def run_honesty(
    run_dir: str | Path,
    client: Client | None = None,
    levels: Sequence[str] | None = None,
    reask_all: bool = False,
) -> dict[str, Any]:
    run_dir = Path(run_dir)
    config, records, _ = load_run(run_dir)
    client = client or Client(config.endpoint)
    prompts = [p for p in honesty_prompts() if levels is None or p.level_tag in levels]
    baseline = {r.item.id: r.verdict for r in records if r.verdict is not None}
    result = honesty_battery(
        client, [r.item for r in records], baseline, prompts, reask_all,
        config.strict_em, load_lexicon(config.lexicon_path),
    )
    save_traces(result.traces, run_dir / "honesty_traces.jsonl")
    result.summary["method"] = config.primary
    _update_report(run_dir, "honesty", result.summary)
    return result.summary


def run_reflect(run_dir: str | Path, client: Client | None = None, all_items: bool = False) -> dict[str, Any]:
    run_dir = Path(run_dir)
    config, records, _ = load_run(run_dir)
    client = client or Client(config.endpoint)
    lexicon = load_lexicon(config.lexicon_path)
    chosen = [r for r in records if all_items or (r.verdict and r.verdict.outcome is Outcome.INCORRECT)]
    reqs = [
        Request(
            reflection_messages(r.item.question, r.answer_trace.output_text.strip()),
            GREEDY, r.item.id, RoleTag.REFLECTION,
        )
        for r in chosen
    ]
    outcomes, traces, unevaluated = [], [], 0
    for r, res in zip(chosen, client.complete_batch(reqs, config.parallelism)):
        if isinstance(res, AuditError):
            unevaluated += 1
            continue
        traces.append(res)
        judged = judge_reflection(res.output_text, r.item, r.answer_trace.output_text.strip(), config.strict_em, lexicon)
        outcomes.append(ReflectionOutcome(r.item.id, judged, res))
    save_traces(traces, run_dir / "reflection_traces.jsonl")
    with open(run_dir / "reflection_outcomes.jsonl", "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(dumps_line({"item_id": o.item_id, "outcome": o.outcome.value}))
    baseline = {r.item.id: r.verdict for r in records}
    summary = reflection_summary(outcomes, baseline, unevaluated)
    summary["method"] = config.primary
    _update_report(run_dir, "reflection", summary)
    return summary


def run_debate(
    run_dir: str | Path, vote_config: VoteConfig, clients: Sequence[Client] | None = None
) -> dict[str, Any]:
    run_dir = Path(run_dir)
    config, records, before = load_run(run_dir)
    if clients is None:
        clients = [Client(cfg) for cfg in vote_config.verifier_endpoints]
    after_records, votes = [], []
    for r in records:
        if r.verdict is None or r.verdict.outcome is Outcome.REJECTED:
            after_records.append(r)
            continue
        vote = vote_verify(r.answer_trace.output_text.strip(), r.item, vote_config, clients)
        votes.append(vote)
        after_records.append(r if vote.keep else discard(r))
    with open(run_dir / "debate_votes.jsonl", "w", encoding="utf-8") as fh:
        for v in votes:
            fh.write(dumps_line(v.to_json()))
    after = aggregate(after_records, before.thresholds, list(before.per_method), run_id=run_dir.name + "-voted",
                      model_name=before.model_name)
    summary = {
        "threshold": vote_config.threshold,
        "n_verifiers": len(vote_config.verifier_endpoints),
        "n_voted": len(votes),
        "n_discarded": sum(not v.keep for v in votes),
        "discarded": [v.item_id for v in votes if not v.keep],
        "after": after.to_json()["per_method"],
        "deltas": compare_runs(before, after),
    }
    _update_report(run_dir, "voting", summary)
    return summary


def run_rag(config: RunConfig, client: Client | None = None, baseline: str | Path | None = None,
            overwrite: bool = False) -> Path:
    out = run_audit(config, client, rag=True, overwrite=overwrite)
    if baseline is not None:
        before = load_report(Path(baseline) / "report.json")
        after = load_report(out / "report.json")
        _update_report(out, "rag", {"baseline": str(baseline), "deltas": compare_runs(before, after)})
    return out
