import json
import shutil
import subprocess
import sys

import pytest

from metabridge.cli import main

from oracles import CLUSTER_A, two_cluster_corpus, write_sized_dataset


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_kb_check_exit_codes(capsys, fixtures, tmp_path):
    code, out, _ = run(capsys, "kb", "check", fixtures / "liver_fire_kb.jsonl")
    assert code == 0 and "consistent" in out
    code, out, _ = run(capsys, "kb", "check", fixtures / "duplicate_concept_kb.jsonl")
    assert code == 2 and len(out.strip().splitlines()) == 1
    assert run(capsys, "kb", "check", fixtures / "cycle_kb.jsonl")[0] == 2
    assert run(capsys, "kb", "check", tmp_path / "missing.jsonl")[0] == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    code, _, err = run(capsys, "kb", "check", bad)
    assert code == 1 and "bad.jsonl:1:" in err


def test_kb_extend(capsys, fixtures, tmp_path):
    out = tmp_path / "new.jsonl"
    code, text, _ = run(capsys, "kb", "extend", fixtures / "minimal_kb.jsonl", fixtures / "additions.jsonl", "-o", out)
    assert code == 0 and "version 2" in text
    assert run(capsys, "kb", "check", out)[0] == 0
    rejected = tmp_path / "rejected.jsonl"
    code, _, _ = run(capsys, "kb", "extend", fixtures / "minimal_kb.jsonl", fixtures / "bad_additions.jsonl",
                     "-o", rejected)
    assert code == 2 and not rejected.exists()


def test_infer_liver_fire(capsys, fixtures, tmp_path):
    code, out, _ = run(capsys, "infer", "--kb", fixtures / "liver_fire_kb.jsonl",
                       "--evidence", fixtures / "liver_fire_evidence.jsonl", "--out", tmp_path)
    assert code == 0
    assert "1 convergence(s), 4 discrepancy(ies)" in out
    assert "liver_fire ~ hepatic_inflammation" in out
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["tcm_findings"]["liver_fire"] == 0.8
    steps = [json.loads(x) for x in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert len(steps) == 5 and steps[-1]["agent"] == "Coordinator"
    code, shown, _ = run(capsys, "trace", "show", tmp_path / "trace.jsonl", "--payload")
    assert code == 0 and "Coordinator" in shown and "!!" not in shown


def test_infer_empty_evidence(capsys, fixtures, tmp_path):
    code, out, _ = run(capsys, "infer", "--kb", fixtures / "liver_fire_kb.jsonl",
                       "--evidence", fixtures / "empty_evidence.jsonl", "--out", tmp_path)
    assert (code, out.strip()) == (0, "no findings")


def test_infer_unreachable_remote(capsys, fixtures, tmp_path):
    code, _, err = run(capsys, "infer", "--kb", fixtures / "liver_fire_kb.jsonl",
                       "--evidence", fixtures / "liver_fire_evidence.jsonl", "--out", tmp_path,
                       "--backend", "remote", "--endpoint", "http://127.0.0.1:9/", "--timeout", "1")
    assert code == 1 and "partial trace" in err
    assert (tmp_path / "trace.jsonl").exists() and not (tmp_path / "result.json").exists()


def test_infer_bad_thresholds(capsys, fixtures, tmp_path):
    code, _, _ = run(capsys, "infer", "--kb", fixtures / "liver_fire_kb.jsonl", "--evidence",
                     fixtures / "liver_fire_evidence.jsonl", "--out", tmp_path, "--tau-high", "0.1", "--tau-low", "0.5")
    assert code == 1


def test_bayes_query(capsys, fixtures):
    code, out, _ = run(capsys, "bayes", "query", "--kb", fixtures / "heat_fever_kb.jsonl", "--node", "heat",
                       "--evidence", "fever=present")
    assert code == 0 and "heat=present\t0.692308" in out
    assert run(capsys, "bayes", "query", "--kb", fixtures / "heat_fever_kb.jsonl", "--node", "nope")[0] == 1


def _eval(capsys, fixtures, out, *extra):
    return run(capsys, "eval", fixtures / "alignment_eval.json", "--output-dir", out, *extra)


def test_eval_is_deterministic(capsys, fixtures, tmp_path):
    code, text, _ = _eval(capsys, fixtures, tmp_path / "a")
    assert code == 0 and "truth table agreement 20/20" in text
    assert _eval(capsys, fixtures, tmp_path / "b", "--workers", "4")[0] == 0
    for name in ("confusion.json", "verdicts.jsonl", "traces.jsonl", "metrics.md", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    md = (tmp_path / "a" / "metrics.md").read_text()
    assert md.startswith("| LLM_Models |") and "Abstentions: 0 of 20" in md


def test_eval_malformed_dataset_fails_first(capsys, fixtures, tmp_path):
    shutil.copy(fixtures / "alignment_kb.jsonl", tmp_path)
    shutil.copy(fixtures / "malformed_dataset.jsonl", tmp_path / "alignment_dataset.jsonl")
    cfg = json.loads((fixtures / "alignment_eval.json").read_text())
    cfg.pop("truth_table")
    (tmp_path / "eval.json").write_text(json.dumps(cfg))
    code, _, err = run(capsys, "eval", tmp_path / "eval.json", "--output-dir", tmp_path / "out")
    assert code == 1 and "line 2" in err
    assert not (tmp_path / "out").exists()


def test_eval_remote_via_env(capsys, fixtures, tmp_path, json_server, monkeypatch):
    reply = lambda body: (200, json.dumps({"rationale": "r", "payload": {"answer": "yes", "familiarity": 5}}))  # noqa: E731
    with json_server(reply) as (url, got):
        monkeypatch.setenv("METABRIDGE_AGENT_ENDPOINT", url)
        monkeypatch.setenv("METABRIDGE_AGENT_MODEL", "env-model")
        code, out, _ = _eval(capsys, fixtures, tmp_path, "--backend", "remote", "--model", "flag-model")
    assert code == 0 and len(got) == 20
    assert {g["body"]["model"] for g in got} == {"flag-model"}
    assert "Familiarity" in (tmp_path / "metrics.csv").read_text()


def test_dataset_validate_with_screening(capsys, fixtures, tmp_path):
    path = tmp_path / "ds.jsonl"
    write_sized_dataset(path)
    code, out, _ = run(capsys, "dataset", "validate", path, "--screening", fixtures / "screening.json")
    assert code == 0
    assert "total\t2801" in out and "3000 raw - 199 removed = 2801 kept" in out


def test_dataset_validate_count_mismatch(capsys, tmp_path):
    path = tmp_path / "ds.jsonl"
    write_sized_dataset(path, {"TCM-aligned": 3, "TCM-misaligned": 0, "WM-aligned": 0, "WM-misaligned": 0},
                        declare=False)
    path.write_text(json.dumps({"declared_counts": {"TCM-aligned": 4}}) + "\n" + path.read_text())
    code, _, err = run(capsys, "dataset", "validate", path)
    assert code == 2 and "count mismatch" in err


def test_dataset_split(capsys, fixtures, tmp_path):
    code, out, _ = run(capsys, "dataset", "split", fixtures / "alignment_dataset.jsonl", "--fraction", "0.2",
                       "--seed", "1", "--out", tmp_path)
    assert code == 0 and "train 32, test 8" in out
    assert len((tmp_path / "test.jsonl").read_text().splitlines()) == 8


def test_embed_build_and_topk(capsys, tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("\n".join(two_cluster_corpus(0)), encoding="utf-8")
    table = tmp_path / "table.json"
    code, out, _ = run(capsys, "embed", "build", corpus, "-o", table, "--d", "8", "--seed", "3",
                       "--merge", "运化", "--merge", "水谷")
    assert code == 0 and "20 tokens" in out
    code, out, _ = run(capsys, "embed", "topk", table, "脾", "--k", "3")
    assert code == 0
    neighbours = [line.split("\t")[0] for line in out.splitlines()]
    assert len(neighbours) == 3 and set(neighbours) <= set(CLUSTER_A)
    assert run(capsys, "embed", "topk", table, "unknown-token")[0] == 1


def test_module_entry_point(fixtures):
    proc = subprocess.run([sys.executable, "-m", "metabridge", "kb", "check", str(fixtures / "minimal_kb.jsonl")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "consistent" in proc.stdout


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
