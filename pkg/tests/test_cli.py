import csv
import json

import pytest
from mockfixtures import scored_record, ten_item_fixture

from delusion_audit import cli
from delusion_audit.client import MockScript, scripted
from delusion_audit.core import load_dataset, load_records, save_records
from delusion_audit.protocols import answer_messages, reflection_messages


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture
def audited(ten_items, tmp_path, capsys):
    dataset, script = ten_items
    code, _ = run(["audit", "--base-url", f"mock:{script}", "--model", "mock-7b", "--dataset", dataset,
                   "--ensemble", "p_true,agreement,raw_logits", "--output-dir", tmp_path / "runs",
                   "--run-name", "base"], capsys)
    assert code == 0
    return tmp_path / "runs" / "base", script


def test_audit_fixture_report(audited):
    run_dir, _ = audited
    report = json.loads((run_dir / "report.json").read_text())
    assert set(report["per_method"]) == {"raw_logits", "agreement", "p_true", "verb_1s", "verb_2s", "ensemble"}
    for mm in report["per_method"].values():
        assert (mm["accuracy"], mm["error_rate"], mm["reject_rate"]) == (0.6, 0.3, 0.1)
        assert mm["delusion_rate_overall"] == 0.2
        assert mm["delusion_share_of_errors"] == 2 / 3
    assert {p.name for p in run_dir.iterdir()} >= {"config.json", "records.jsonl", "report.json", "report.csv", "report.md"}


def test_rescore_keeps_traces_and_changes_verdicts(audited, tmp_path, capsys):
    run_dir, script = audited
    code, _ = run(["audit", "--rescore", run_dir, "--raw", "--output-dir", tmp_path / "runs",
                   "--run-name", "raw"], capsys)
    assert code == 0
    before = load_records(run_dir / "records.jsonl")
    after = load_records(tmp_path / "runs" / "raw" / "records.jsonl")
    assert [r.traces for r in before] == [r.traces for r in after]
    specs = json.loads((tmp_path / "runs" / "raw" / "report.json").read_text())["thresholds"]
    assert specs["raw_logits"]["normalized"] is False
    # mean raw belief over q1..q6
    assert specs["raw_logits"]["threshold"] == pytest.approx(0.55)
    assert json.loads((tmp_path / "runs" / "raw" / "config.json").read_text())["normalized"] is False


def test_rescore_never_queries(audited, tmp_path, capsys):
    run_dir, script = audited
    script.unlink()  # the endpoint is gone
    code, _ = run(["audit", "--rescore", run_dir, "--output-dir", tmp_path / "runs", "--run-name", "again"], capsys)
    assert code == 0
    assert (tmp_path / "runs" / "again" / "records.jsonl").read_bytes() == (run_dir / "records.jsonl").read_bytes()


def test_unreachable_endpoint_exit_3(ten_items, tmp_path, capsys):
    dataset, _ = ten_items
    code, out = run(["audit", "--base-url", "http://127.0.0.1:9", "--max-retries", "0", "--dataset", dataset,
                     "--methods", "raw_logits", "--output-dir", tmp_path / "runs"], capsys)
    assert code == 3
    assert "http://127.0.0.1:9" in out.err


def test_config_errors_exit_2(ten_items, tmp_path, capsys):
    dataset, script = ten_items
    code, _ = run(["audit", "--base-url", f"mock:{script}", "--dataset", dataset, "--methods", "nope"], capsys)
    assert code == 2
    code, _ = run(["audit", "--dataset", dataset], capsys)
    assert code == 2


def test_data_errors_exit_4(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "q1", "question": "?"}\n')
    code, out = run(["audit", "--base-url", "mock:", "--dataset", bad], capsys)
    assert code == 4
    assert ":1:" in out.err


def test_config_file_with_flag_override(ten_items, tmp_path, capsys):
    dataset, script = ten_items
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"endpoint": {"base_url": "mock:/nonexistent.json", "model_name": "m"},
                               "dataset_path": str(dataset), "methods": ["raw_logits"], "seed": 3}))
    code, _ = run(["audit", "--config", cfg, "--base-url", f"mock:{script}", "--output-dir", tmp_path / "r",
                   "--run-name", "x"], capsys)
    assert code == 0
    snap = json.loads((tmp_path / "r" / "x" / "config.json").read_text())
    assert snap["endpoint"]["base_url"] == f"mock:{script}"
    assert snap["methods"] == ["raw_logits"] and snap["seed"] == 3


def test_missing_baseline_names_audit(tmp_path, capsys):
    code, out = run(["honesty", tmp_path / "nowhere"], capsys)
    assert code == 4
    assert "audit" in out.err


def test_reflect_all_insist(audited, capsys):
    run_dir, script_path = audited
    script = MockScript.load(script_path)
    for p in ten_item_fixture():
        script.add(reflection_messages(p.item.question, p.answer), scripted("I insist."))
    script.save(script_path)
    code, out = run(["reflect", run_dir, "--all"], capsys)
    assert code == 0
    summary = json.loads(out.out)
    for cls in summary["classes"].values():
        assert cls["insist_rate"] == 1.0
    assert sum(c["n"] for c in summary["classes"].values()) == 10
    # baseline records are left alone
    assert json.loads((run_dir / "report.json").read_text())["protocol_sections"]["reflection"] == summary


# verifier answers per item; matches are against the target answers in the fixture
VERIFIERS = {
    "v1": {"q1": "Paris", "q2": "Mars", "q3": "William Shakespeare", "q4": "Pacific Ocean",
           "q5": "Carbon dioxide", "q6": "Seven", "q8": "Canberra", "q9": "Gold", "q10": "1989"},
    "v2": {"q1": "Paris", "q2": "Mars", "q3": "William Shakespeare", "q4": "The Pacific Ocean",
           "q5": "Carbon dioxide", "q6": "7", "q8": "Sydney", "q9": "Silver", "q10": "1991"},
    "v3": {"q1": "no idea", "q2": "no idea", "q3": "no idea", "q4": "no idea",
           "q5": "no idea", "q6": "7", "q8": "Sydney", "q9": "Copper", "q10": "1990"},
}
# hand count of verifiers agreeing with the target answer
MATCHES = {"q1": 2, "q2": 2, "q3": 2, "q4": 2, "q5": 2, "q6": 2, "q8": 2, "q9": 1, "q10": 1}


@pytest.mark.parametrize("threshold", [1, 2, 3])
def test_debate_discards_match_hand_count(audited, tmp_path, capsys, threshold):
    run_dir, _ = audited
    questions = {p.item.id: p.item.question for p in ten_item_fixture()}
    urls = []
    for name, answers in VERIFIERS.items():
        script = MockScript()
        for iid, ans in answers.items():
            script.add(answer_messages(questions[iid]), scripted(ans))
        path = tmp_path / f"{name}.json"
        script.save(path)
        urls += ["--verifier", f"mock:{path}"]
    code, out = run(["debate", run_dir, "--threshold", threshold, *urls], capsys)
    assert code == 0
    summary = json.loads(out.out)
    expected = sorted(i for i, m in MATCHES.items() if m < threshold)
    assert sorted(summary["discarded"]) == expected
    votes = [json.loads(line) for line in (run_dir / "debate_votes.jsonl").read_text().splitlines()]
    assert {v["item_id"]: sum(v["matches"]) for v in votes} == MATCHES
    after = summary["after"]["ensemble"]
    before = json.loads((run_dir / "report.json").read_text())["per_method"]["ensemble"]
    assert after["delusion_rate_overall"] <= before["delusion_rate_overall"]
    if threshold == 2:
        assert after["delusion_rate_overall"] == 0.1
        assert after["error_rate"] == 0.1


def test_rag_without_passages(ten_items, tmp_path, capsys):
    dataset, script = ten_items
    code, out = run(["rag", "--base-url", f"mock:{script}", "--dataset", dataset,
                     "--output-dir", tmp_path / "runs"], capsys)
    assert code == 4
    assert "passages" in out.err


def test_noise_gen_counts(tmp_path, capsys):
    data = tmp_path / "items.jsonl"
    data.write_text("".join(json.dumps({"id": f"n{i}", "question": f"How many {i}?", "answers": [str(100 + i)]}) + "\n"
                            for i in range(10)))
    out_path = tmp_path / "noise.jsonl"
    code, _ = run(["noise-gen", "--input", data, "--out", out_path, "--level", 4, "--proportion", 0.5,
                   "--seed", 7], capsys)
    assert code == 0
    rows = [json.loads(line) for line in out_path.read_text().splitlines()]
    assert len(rows) == 5 * 20 + 5
    first = out_path.read_bytes()
    run(["noise-gen", "--input", data, "--out", out_path, "--level", 4, "--proportion", 0.5, "--seed", 7], capsys)
    assert out_path.read_bytes() == first


def test_refine_cli(tmp_path, capsys):
    from test_noise import DELUSIONS, TRAIN

    from delusion_audit.core import write_dataset

    write_dataset(TRAIN, tmp_path / "train.jsonl")
    write_dataset(DELUSIONS, tmp_path / "delusions.jsonl")
    code, out = run(["refine", "--train", tmp_path / "train.jsonl", "--delusions", tmp_path / "delusions.jsonl",
                     "--out", tmp_path / "kept.jsonl", "--threshold", 0.9], capsys)
    assert code == 0
    assert [i.id for i in load_dataset(tmp_path / "kept.jsonl")] == ["t1", "t4", "t5"]
    rows = list(csv.DictReader((tmp_path / "kept.removed.csv").open()))
    assert {r["record_id"]: r["trigger"] for r in rows} == {"t2": "similarity", "t3": "answer_match"}


def test_sft_build_cli(tmp_path, capsys):
    recs = [scored_record(f"w{i}", "Incorrect", {}) for i in range(6)]
    recs += [scored_record(f"c{i}", "Correct", {}) for i in range(6)]
    save_records(recs, tmp_path / "records.jsonl")
    out_path = tmp_path / "sft.jsonl"
    code, _ = run(["sft-build", "--records", tmp_path / "records.jsonl", "--out", out_path,
                   "--refuse-ratio", 0.5, "--total", 8], capsys)
    assert code == 0
    rows = [json.loads(line) for line in out_path.read_text().splitlines()]
    assert len(rows) == 8
    assert sum(r["messages"][2]["content"] == "I don't know" for r in rows) == 4


def test_report_and_compare(audited, tmp_path, capsys):
    run_dir, _ = audited
    original = {n: (run_dir / n).read_bytes() for n in ("report.json", "report.csv", "report.md")}
    code, _ = run(["report", run_dir, "--out-dir", tmp_path], capsys)
    assert code == 0
    for name, data in original.items():
        assert (tmp_path / name).read_bytes() == data
    code, out = run(["compare", run_dir, run_dir, "--out", tmp_path / "delta.json"], capsys)
    assert code == 0
    rows = json.loads((tmp_path / "delta.json").read_text())
    assert rows and all(r["delta"] == 0 for r in rows)
    assert "| ensemble | delusion_rate_overall |" in out.out


def test_existing_run_dir_needs_overwrite(audited, ten_items, tmp_path, capsys):
    dataset, script = ten_items
    argv = ["audit", "--base-url", f"mock:{script}", "--dataset", dataset, "--output-dir", tmp_path / "runs",
            "--run-name", "base"]
    assert run(argv, capsys)[0] == 2
    assert run(argv + ["--overwrite"], capsys)[0] == 0
