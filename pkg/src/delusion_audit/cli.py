"""``delusion-audit`` command line.

Exit codes: 0 success, 2 configuration error, 3 transport error, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .client import Client, EndpointConfig
from .core import Outcome, load_dataset, load_records, write_dataset
from .errors import AuditError, ConfigError
from .noise import (
    MockEmbedder,
    NoiseSpec,
    RemoteEmbedder,
    build_refusal_sft_set,
    dedup_refine,
    synthesize_noise_set,
    write_jsonl,
    write_removal_report,
)
from .prompts import HONESTY_LEVELS, dump_prompt, honesty_template, load_template
from .protocols import VoteConfig
from .report import compare_runs, deltas_to_markdown, emit, load_report, aggregate

log = logging.getLogger("delusion_audit")


def _csv(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _add_endpoint_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("endpoint")
    g.add_argument("--base-url", help="server URL, or mock:<script.json> for the in-process backend")
    g.add_argument("--model", help="model name sent to the endpoint")
    g.add_argument("--api-key-env", help="environment variable holding the API key")
    g.add_argument("--timeout", type=float)
    g.add_argument("--max-retries", type=int)
    g.add_argument("--parallel", type=int, help="max requests in flight")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    _add_endpoint_flags(p)
    p.add_argument("--dataset", help="dataset JSONL")
    p.add_argument("--methods", type=_csv, help=f"comma list from {','.join(pipeline.METHODS)}")
    p.add_argument("--ensemble", type=_csv, help="methods to average into an ensemble belief")
    p.add_argument("--raw", action="store_true", help="threshold raw instead of rank-normalized scores")
    p.add_argument("--raw-ensemble", action="store_true", help="average raw instead of normalized scores")
    p.add_argument("--consistency-n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--run-name")
    p.add_argument("--strict-em", action="store_true", help="exact match instead of containment")
    p.add_argument("--verb1s-own-answer", action="store_true", help="grade verb_1s on its own answer")
    p.add_argument("--primary", help="method whose verdict is the record's headline verdict")
    p.add_argument("--lexicon", help="refusal lexicon file")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="print prompts and exit without network calls")


def build_config(args: argparse.Namespace) -> pipeline.RunConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    endpoint = dict(base.get("endpoint", {}))
    for flag, key in [
        ("base_url", "base_url"), ("model", "model_name"), ("api_key_env", "api_key_env"),
        ("timeout", "request_timeout"), ("max_retries", "max_retries"), ("parallel", "max_parallel"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            endpoint[key] = value
    if "base_url" not in endpoint:
        raise ConfigError("no endpoint: pass --base-url or a config with endpoint.base_url")
    base["endpoint"] = endpoint
    for flag, key in [
        ("dataset", "dataset_path"), ("methods", "methods"), ("ensemble", "ensemble_methods"),
        ("consistency_n", "consistency_n"), ("seed", "seed"), ("output_dir", "output_dir"),
        ("run_name", "run_name"), ("primary", "primary_method"), ("lexicon", "lexicon_path"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    for flag, key, val in [
        ("raw", "normalized", False), ("raw_ensemble", "ensemble_normalized", False),
        ("strict_em", "strict_em", True), ("verb1s_own_answer", "verb1s_own_answer", True),
    ]:
        if getattr(args, flag, False):
            base[key] = val
    if "dataset_path" not in base:
        raise ConfigError("no dataset: pass --dataset or set dataset_path in the config")
    return pipeline.RunConfig.from_json(base)


def _baseline_client(args, config: pipeline.RunConfig) -> Client:
    endpoint = config.endpoint
    if args.base_url:
        endpoint = replace(endpoint, base_url=args.base_url)
    if args.model:
        endpoint = replace(endpoint, model_name=args.model)
    return Client(endpoint)


# -- command handlers ----------------------------------------------------------


def cmd_audit(args) -> int:
    if args.rescore:
        overrides = {}
        if args.raw:
            overrides["normalized"] = False
        if args.raw_ensemble:
            overrides["ensemble_normalized"] = False
        if args.strict_em:
            overrides["strict_em"] = True
        if args.verb1s_own_answer:
            overrides["verb1s_own_answer"] = True
        if args.output_dir:
            overrides["output_dir"] = args.output_dir
        if args.run_name:
            overrides["run_name"] = args.run_name
        out = pipeline.run_rescore(args.rescore, overrides, args.overwrite)
        print(out)
        return 0
    config = build_config(args)
    if args.dry_run:
        sys.stdout.write(pipeline.dry_run_prompts(load_dataset(config.dataset_path), config))
        return 0
    print(pipeline.run_audit(config, overwrite=args.overwrite))
    return 0


def cmd_rag(args) -> int:
    config = build_config(args)
    if args.dry_run:
        sys.stdout.write(pipeline.dry_run_prompts(load_dataset(config.dataset_path), config, rag=True))
        return 0
    print(pipeline.run_rag(config, baseline=args.baseline, overwrite=args.overwrite))
    return 0


def cmd_honesty(args) -> int:
    config, records, _ = pipeline.load_run(args.baseline)
    levels = args.levels or list(HONESTY_LEVELS)
    if args.dry_run:
        for r in records:
            if not args.reask_all and r.verdict.outcome is not Outcome.INCORRECT:
                continue
            for level in levels:
                block = dump_prompt(f"{r.item.id} honesty_{level}", honesty_template(level), question=r.item.question)
                sys.stdout.write(block)
        return 0
    summary = pipeline.run_honesty(args.baseline, _baseline_client(args, config), levels, args.reask_all)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_reflect(args) -> int:
    config, records, _ = pipeline.load_run(args.baseline)
    if args.dry_run:
        for r in records:
            if not args.all and r.verdict.outcome is not Outcome.INCORRECT:
                continue
            block = dump_prompt(
                f"{r.item.id} reflection",
                load_template("reflection"),
                question=r.item.question,
                previous_answer=r.answer_trace.output_text.strip(),
            )
            sys.stdout.write(block)
        return 0
    summary = pipeline.run_reflect(args.baseline, _baseline_client(args, config), args.all)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_debate(args) -> int:
    config, _, _ = pipeline.load_run(args.baseline)
    verifiers = []
    if args.verifiers_config:
        for d in json.loads(Path(args.verifiers_config).read_text()):
            verifiers.append(EndpointConfig.from_dict(d))
    for url in args.verifier or []:
        verifiers.append(replace(config.endpoint, base_url=url))
    vote_config = VoteConfig(tuple(verifiers), args.threshold, args.strict_match)
    summary = pipeline.run_debate(args.baseline, vote_config)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_noise_gen(args) -> int:
    items = load_dataset(args.input)
    spec = NoiseSpec(args.proportion, args.level, args.variants, args.seed, args.edits)
    rows = synthesize_noise_set(items, spec)
    write_jsonl(rows, args.out)
    print(f"{len(rows)} records -> {args.out}")
    return 0


def _embedder(args):
    if args.embedder == "mock":
        return MockEmbedder()
    return RemoteEmbedder(EndpointConfig(base_url=args.embedder, model_name=args.embed_model))


def cmd_refine(args) -> int:
    train = load_dataset(args.train)
    delusions = load_dataset(args.delusions)
    kept, removed = dedup_refine(train, delusions, _embedder(args), args.threshold, args.embed_qa)
    write_dataset(kept, args.out)
    write_removal_report(removed, args.report or str(Path(args.out).with_suffix(".removed.csv")))
    print(f"kept {len(kept)}, removed {len(removed)}")
    return 0


def cmd_sft_build(args) -> int:
    path = Path(args.records)
    records = load_records(path / "records.jsonl" if path.is_dir() else path)
    rows = build_refusal_sft_set(records, args.refuse_ratio, args.total, args.seed, args.method)
    write_jsonl(rows, args.out)
    n_refuse = sum(r["meta"]["target"] == "refuse" for r in rows)
    print(f"{len(rows)} records ({n_refuse} refusals) -> {args.out}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    config, records, old = pipeline.load_run(run_dir)
    report = aggregate(records, old.thresholds, list(old.per_method), run_id=old.run_id, model_name=old.model_name)
    report.protocol_sections = old.protocol_sections
    for fmt, p in emit(report, args.out_dir or run_dir, args.formats).items():
        print(p)
    return 0


def _report_path(p: str) -> Path:
    path = Path(p)
    return path / "report.json" if path.is_dir() else path


def cmd_compare(args) -> int:
    rows = compare_runs(load_report(_report_path(args.before)), load_report(_report_path(args.after)))
    sys.stdout.write(deltas_to_markdown(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delusion-audit", description="Measure, classify and mitigate delusions of chat-completion models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="answer, score, threshold and classify a dataset")
    _add_run_flags(p)
    p.add_argument("--rescore", metavar="RUN_DIR", help="re-score a saved run without querying")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("rag", help="audit with retrieved passages in the prompt")
    _add_run_flags(p)
    p.add_argument("--baseline", help="run directory to compare against")
    p.set_defaults(func=cmd_rag)

    p = sub.add_parser("honesty", help="refuse rates under the six honesty prompts")
    p.add_argument("baseline", help="baseline run directory")
    _add_endpoint_flags(p)
    p.add_argument("--levels", type=_csv)
    p.add_argument("--reask-all", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_honesty)

    p = sub.add_parser("reflect", help="ask the model to reflect on its baseline answers")
    p.add_argument("baseline")
    _add_endpoint_flags(p)
    p.add_argument("--all", action="store_true", help="reflect on every item, not only errors")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_reflect)

    p = sub.add_parser("debate", help="multi-model voting over baseline answers")
    p.add_argument("baseline")
    p.add_argument("--verifier", action="append", help="verifier base URL (repeatable)")
    p.add_argument("--verifiers-config", help="JSON list of verifier endpoint configs")
    p.add_argument("--threshold", type=int, default=2)
    p.add_argument("--strict-match", action="store_true")
    p.set_defaults(func=cmd_debate)

    p = sub.add_parser("noise-gen", help="synthesize a noisy SFT set")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--proportion", type=float, required=True)
    p.add_argument("--level", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--variants", type=int, default=20)
    p.add_argument("--edits", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_noise_gen)

    p = sub.add_parser("refine", help="drop training pairs close to known delusions")
    p.add_argument("--train", required=True)
    p.add_argument("--delusions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="removal report CSV (default: <out>.removed.csv)")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--embedder", default="mock", help="'mock' or an embeddings base URL")
    p.add_argument("--embed-model", default="paraphrase-MiniLM-L6-v2")
    p.add_argument("--embed-qa", action="store_true", help="embed question and answer, not the question alone")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("sft-build", help="refusal SFT set from graded records")
    p.add_argument("--records", required=True, help="run directory or records.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--refuse-ratio", type=float, required=True)
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", help="take outcomes/labels from this method's verdicts")
    p.set_defaults(func=cmd_sft_build)

    p = sub.add_parser("report", help="re-render a run's report")
    p.add_argument("run_dir")
    p.add_argument("--formats", type=_csv, default=["json", "csv", "markdown"])
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="metric deltas between two runs")
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
