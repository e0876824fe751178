import csv
import io
import json
import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from delusion_audit.calibrate import ThresholdSpec
from delusion_audit.core import AuditRecord, BeliefVector, Classification, Outcome, QAItem, Verdict
from delusion_audit.errors import ContractError
from delusion_audit.report import (
    METRICS,
    MethodMetrics,
    RunReport,
    aggregate,
    compare_runs,
    deltas_to_markdown,
    emit,
    load_report,
    to_csv_text,
    to_json_text,
    to_markdown,
)

LABELS = {
    "C": (Outcome.CORRECT, Classification.NONE),
    "R": (Outcome.REJECTED, Classification.NONE),
    "D": (Outcome.INCORRECT, Classification.DELUSION),
    "H": (Outcome.INCORRECT, Classification.HALLUCINATION),
}


def records(pattern, methods=("raw_logits",), source="unit"):
    """One record per letter in ``pattern`` (C/R/D/H), same verdict for every method."""
    out = []
    for i, ch in enumerate(pattern):
        outcome, cls = LABELS[ch]
        v = (
            Verdict(f"q{i}", outcome, cls, 0.9, 0.5)
            if cls is Classification.DELUSION
            else Verdict(f"q{i}", outcome, cls)
        )
        out.append(AuditRecord(QAItem(f"q{i}", "?", ("a",), source=source), (), BeliefVector(f"q{i}"), v,
                               {m: v for m in methods}))
    return out


SPEC = {"raw_logits": ThresholdSpec("raw_logits", 0.5, 6, True)}


def test_ten_item_ratios():
    mm = aggregate(records("CCCCCCRDDH"), SPEC).per_method["raw_logits"]
    assert (mm.accuracy, mm.error_rate, mm.reject_rate) == (0.6, 0.3, 0.1)
    assert mm.delusion_rate_overall == 0.2
    assert mm.delusion_share_of_errors == 2 / 3
    assert (mm.n_delusion, mm.n_hallucination, mm.n_items) == (2, 1, 10)


def test_no_errors_gives_null_share():
    mm = aggregate(records("CCR"), SPEC).per_method["raw_logits"]
    assert mm.error_rate == 0.0
    assert mm.delusion_rate_overall == 0.0
    assert mm.delusion_share_of_errors is None


def test_all_rejected():
    mm = aggregate(records("RRRR"), SPEC).per_method["raw_logits"]
    assert (mm.accuracy, mm.error_rate, mm.reject_rate) == (0.0, 0.0, 1.0)


def test_empty_run_is_all_null():
    mm = aggregate([], SPEC).per_method["raw_logits"]
    assert mm.accuracy is None and mm.n_items == 0


def test_missing_threshold_gives_null_delusion():
    mm = aggregate(records("CDH"), {}, methods=["raw_logits"]).per_method["raw_logits"]
    assert mm.delusion_rate_overall is None
    assert mm.threshold is None
    assert mm.error_rate == 2 / 3


def test_mixed_dataset_tags_rejected():
    with pytest.raises(ContractError):
        aggregate(records("C", source="a") + records("D", source="b"), SPEC)


def naive(pattern):
    n = len(pattern)
    if not n:
        return None
    wrong = pattern.count("D") + pattern.count("H")
    return {
        "accuracy": Fraction(pattern.count("C"), n),
        "error_rate": Fraction(wrong, n),
        "reject_rate": Fraction(pattern.count("R"), n),
        "delusion_rate_overall": Fraction(pattern.count("D"), n),
        "delusion_share_of_errors": Fraction(pattern.count("D"), wrong) if wrong else None,
    }


@given(st.text("CRDH", max_size=60))
def test_aggregate_matches_naive_recount(pattern):
    mm = aggregate(records(pattern), SPEC).per_method["raw_logits"]
    expect = naive(pattern)
    if expect is None:
        return
    for metric, value in expect.items():
        got = getattr(mm, metric)
        assert got == (None if value is None else float(value))
    assert abs(mm.accuracy + mm.error_rate + mm.reject_rate - 1) <= 1e-9
    assert mm.delusion_rate_overall <= mm.error_rate


def report_with(values, run_id="r", tag="unit"):
    mm = MethodMetrics(threshold=0.5, n_items=1000, **values)
    return RunReport(run_id, "m", tag, {"ensemble": mm})


BASE = dict(accuracy=0.5, error_rate=0.4, reject_rate=0.1, delusion_rate_overall=0.146, delusion_share_of_errors=0.365)


def test_compare_delusion_drop():
    after = report_with({**BASE, "delusion_rate_overall": 0.013})
    (row,) = [r for r in compare_runs(report_with(BASE), after) if r["metric"] == "delusion_rate_overall"]
    assert row["delta"] == pytest.approx(-0.133, abs=1e-12)
    assert not row["worsened"]
    assert "| -13.3 |" in deltas_to_markdown([row])


def test_compare_identity_and_antisymmetry():
    a = report_with(BASE)
    b = report_with({**BASE, "error_rate": 0.45, "accuracy": 0.45})
    assert all(r["delta"] == 0 and not r["worsened"] for r in compare_runs(a, a))
    ab, ba = compare_runs(a, b), compare_runs(b, a)
    assert [r["delta"] for r in ab] == [-r["delta"] for r in ba]
    flagged = {r["metric"] for r in ab if r["worsened"]}
    assert flagged == {"accuracy", "error_rate"}


def test_compare_needs_same_dataset():
    with pytest.raises(ContractError):
        compare_runs(report_with(BASE, tag="a"), report_with(BASE, tag="b"))


def full_report():
    methods = ("raw_logits", "p_true", "ensemble")
    recs = records("CCCCCCRDDH", methods)
    specs = {m: ThresholdSpec(m, 0.55, 6, True) for m in methods}
    return aggregate(recs, specs, run_id="run1", model_name="mock-7b")


def test_json_round_trip_is_byte_stable(tmp_path):
    rep = full_report()
    emit(rep, tmp_path, ["json"])
    text = (tmp_path / "report.json").read_text()
    assert to_json_text(load_report(tmp_path / "report.json")) == text
    assert json.loads(text)["per_method"]["p_true"]["delusion_share_of_errors"] == 2 / 3


def test_csv_shape():
    rows = list(csv.reader(io.StringIO(to_csv_text(full_report()))))
    assert rows[0] == ["method", "metric", "value"]
    assert len(rows) - 1 == 3 * len(METRICS)


def test_markdown_columns():
    md = to_markdown(full_report())
    header = next(line for line in md.splitlines() if line.startswith("| Metric"))
    assert [c.strip() for c in header.strip("|").split("|")][1:] == ["raw_logits", "p_true", "ensemble"]
    assert "| 20.0 / 66.7 |" in md
    assert "| 60.0 |" in md


def test_emit_all_formats(tmp_path):
    written = emit(full_report(), tmp_path)
    assert sorted(p.name for p in written.values()) == ["report.csv", "report.json", "report.md"]


def test_random_compare_antisymmetric():
    rng = random.Random(4)
    for _ in range(50):
        vals = {k: rng.random() for k in BASE}
        other = {k: rng.random() for k in BASE}
        ab = compare_runs(report_with(vals), report_with(other))
        ba = compare_runs(report_with(other), report_with(vals))
        assert [r["delta"] for r in ab] == [-r["delta"] for r in ba]


def test_method_order_survives_json(tmp_path):
    rep = full_report()
    emit(rep, tmp_path)
    assert list(load_report(tmp_path / "report.json").per_method) == ["raw_logits", "p_true", "ensemble"]
