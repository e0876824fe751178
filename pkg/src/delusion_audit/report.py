"""Run-level metrics and their JSON / CSV / markdown renderings.

Rates are stored as fractions. A rate whose denominator is empty is ``None``
(``null`` in JSON, ``n/a`` in markdown), never zero.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .calibrate import ThresholdSpec, outcome_for
from .core import AuditRecord, Classification, Outcome
from .errors import ContractError, DataError

METRICS = (
    "accuracy",
    "error_rate",
    "reject_rate",
    "delusion_rate_overall",
    "delusion_share_of_errors",
    "threshold",
    "n_items",
)
RATE_METRICS = METRICS[:5]
# +1: higher is better, -1: lower is better, 0: neither
_DIRECTION = {
    "accuracy": 1,
    "error_rate": -1,
    "reject_rate": 0,
    "delusion_rate_overall": -1,
    "delusion_share_of_errors": -1,
}


@dataclass(frozen=True)
class MethodMetrics:
    accuracy: float | None
    error_rate: float | None
    reject_rate: float | None
    delusion_rate_overall: float | None
    delusion_share_of_errors: float | None
    threshold: float | None
    n_items: int
    n_correct: int = 0
    n_incorrect: int = 0
    n_rejected: int = 0
    n_delusion: int | None = None
    n_hallucination: int | None = None


@dataclass
class RunReport:
    run_id: str
    model_name: str
    dataset_tag: str
    per_method: dict[str, MethodMetrics]
    thresholds: dict[str, ThresholdSpec] = field(default_factory=dict)
    protocol_sections: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "model_name": self.model_name,
            "dataset_tag": self.dataset_tag,
            # keys are sorted on output, so the column order is kept separately
            "methods": list(self.per_method),
            "per_method": {m: asdict(v) for m, v in self.per_method.items()},
            "thresholds": {m: t.to_json() for m, t in self.thresholds.items()},
            "protocol_sections": self.protocol_sections,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> RunReport:
        return cls(
            run_id=obj["run_id"],
            model_name=obj["model_name"],
            dataset_tag=obj["dataset_tag"],
            per_method={
                m: MethodMetrics(**obj["per_method"][m]) for m in obj.get("methods", obj["per_method"])
            },
            thresholds={m: ThresholdSpec.from_json(t) for m, t in obj["thresholds"].items()},
            protocol_sections=dict(obj.get("protocol_sections", {})),
        )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def dataset_tag_of(records: Sequence[AuditRecord]) -> str:
    tags = {r.item.source for r in records}
    if len(tags) > 1:
        raise ContractError(f"records mix dataset tags {sorted(tags)}")
    return tags.pop() if tags else ""


def method_metrics(
    records: Sequence[AuditRecord], method: str, spec: ThresholdSpec | None
) -> MethodMetrics:
    n = len(records)
    outcomes = [outcome_for(r, method) for r in records]
    n_correct = outcomes.count(Outcome.CORRECT)
    n_incorrect = outcomes.count(Outcome.INCORRECT)
    n_rejected = outcomes.count(Outcome.REJECTED)
    n_del = n_hal = None
    if spec is not None:
        labels = []
        for r in records:
            v = r.method_verdicts.get(method)
            if v is None:
                raise ContractError(f"record {r.item.id!r} has no verdict for {method}")
            labels.append(v.classification)
        n_del = labels.count(Classification.DELUSION)
        n_hal = labels.count(Classification.HALLUCINATION)
    return MethodMetrics(
        accuracy=_ratio(n_correct, n),
        error_rate=_ratio(n_incorrect, n),
        reject_rate=_ratio(n_rejected, n),
        delusion_rate_overall=None if n_del is None else _ratio(n_del, n),
        delusion_share_of_errors=None if n_del is None else _ratio(n_del, n_incorrect),
        threshold=None if spec is None else float(spec.threshold),
        n_items=n,
        n_correct=n_correct,
        n_incorrect=n_incorrect,
        n_rejected=n_rejected,
        n_delusion=n_del,
        n_hallucination=n_hal,
    )


def aggregate(
    records: Sequence[AuditRecord],
    threshold_specs: Mapping[str, ThresholdSpec],
    methods: Iterable[str] | None = None,
    run_id: str = "",
    model_name: str = "",
) -> RunReport:
    """Metrics per method. Methods without a threshold report null delusion rates."""
    tag = dataset_tag_of(records)
    if methods is None:
        methods = list(threshold_specs)
    per_method = {m: method_metrics(records, m, threshold_specs.get(m)) for m in methods}
    return RunReport(
        run_id=run_id,
        model_name=model_name,
        dataset_tag=tag,
        per_method=per_method,
        thresholds={m: s for m, s in threshold_specs.items() if m in per_method},
    )


def compare_runs(before: RunReport, after: RunReport) -> list[dict[str, Any]]:
    """Absolute per-metric deltas (after - before) for methods in both runs."""
    if before.dataset_tag != after.dataset_tag:
        raise ContractError(
            f"cannot compare runs on {before.dataset_tag!r} and {after.dataset_tag!r}"
        )
    rows = []
    for method in before.per_method:
        if method not in after.per_method:
            continue
        b, a = before.per_method[method], after.per_method[method]
        for metric in RATE_METRICS:
            vb, va = getattr(b, metric), getattr(a, metric)
            delta = None if vb is None or va is None else va - vb
            direction = _DIRECTION[metric]
            rows.append(
                {
                    "method": method,
                    "metric": metric,
                    "before": vb,
                    "after": va,
                    "delta": delta,
                    "worsened": bool(delta is not None and direction and delta * direction < 0),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# rendering


def to_json_text(report: RunReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def load_report(path: str | Path) -> RunReport:
    try:
        return RunReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed report ({exc})") from exc


def to_csv_text(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "metric", "value"])
    for method, mm in report.per_method.items():
        for metric in METRICS:
            value = getattr(mm, metric)
            writer.writerow([method, metric, "" if value is None else repr(value)])
    return buf.getvalue()


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100 * x:.1f}"


def to_markdown(report: RunReport) -> str:
    methods = list(report.per_method)
    head = f"# {report.run_id or 'run'}\n\nmodel: {report.model_name}, dataset: {report.dataset_tag}\n\n"
    lines = ["| Metric | " + " | ".join(methods) + " |", "|---" * (len(methods) + 1) + "|"]

    def row(label, fn):
        lines.append(f"| {label} | " + " | ".join(fn(report.per_method[m]) for m in methods) + " |")

    row("Acc. (%)", lambda mm: _pct(mm.accuracy))
    row("ER (%)", lambda mm: _pct(mm.error_rate))
    row("Reject (%)", lambda mm: _pct(mm.reject_rate))
    row(
        "Delusion overall / in errors (%)",
        lambda mm: f"{_pct(mm.delusion_rate_overall)} / {_pct(mm.delusion_share_of_errors)}",
    )
    row("Threshold", lambda mm: "n/a" if mm.threshold is None else f"{mm.threshold:.4f}")
    row("N", lambda mm: str(mm.n_items))
    return head + "\n".join(lines) + "\n"


def deltas_to_markdown(rows: Sequence[Mapping[str, Any]]) -> str:
    lines = ["| Method | Metric | Before (%) | After (%) | Delta (pts) | Worsened |", "|---|---|---|---|---|---|"]
    for r in rows:
        delta = "n/a" if r["delta"] is None else f"{100 * r['delta']:+.1f}"
        lines.append(
            f"| {r['method']} | {r['metric']} | {_pct(r['before'])} | {_pct(r['after'])} "
            f"| {delta} | {'yes' if r['worsened'] else ''} |"
        )
    return "\n".join(lines) + "\n"


def emit(report: RunReport, out_dir: str | Path, formats: Iterable[str] = ("json", "csv", "markdown")) -> dict[str, Path]:
    out_dir = Path(out_dir)
    renderers = {
        "json": ("report.json", to_json_text),
        "csv": ("report.csv", to_csv_text),
        "markdown": ("report.md", to_markdown),
    }
    written = {}
    for fmt in formats:
        if fmt not in renderers:
            raise ContractError(f"unknown report format {fmt!r}")
        name, render = renderers[fmt]
        path = out_dir / name
        try:
            path.write_text(render(report), encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        written[fmt] = path
    return written
