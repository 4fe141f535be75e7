import json
import os

import pytest

from sessionwatch.cli import main


def run(workdir, *args):
    return main(["--workdir", str(workdir), *args])


@pytest.fixture(scope="module")
def trained_workdir(tmp_path_factory):
    """Small end-to-end workdir: synth -> lda -> assign -> train."""
    wd = tmp_path_factory.mktemp("cliwd")
    assert run(wd, "synth", "--personas", "2", "--vocab-size", "12",
               "--sizes", "70,70", "--overlap", "0.0", "--mean-length", "8",
               "--long-fraction", "0", "--seed", "5") == 0
    assert run(wd, "lda", "--k-list", "2", "--seeds-per-k", "1",
               "--iterations", "150", "--seed", "2") == 0
    selections = {"clusters": [
        {"id": 1, "name": "first", "topics": [{"run": 0, "topic": 0}]},
        {"id": 2, "name": "second", "topics": [{"run": 0, "topic": 1}]},
    ]}
    sel_path = wd / "selections.json"
    sel_path.write_text(json.dumps(selections))
    assert run(wd, "assign", "--selections", str(sel_path)) == 0
    assert run(wd, "train", "--hidden", "10", "--epochs", "4",
               "--batch-size", "16", "--seed", "3") == 0
    return wd


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, tmp_path):
        assert run(tmp_path, "synth", "--no-such-flag") == 1

    def test_unknown_command(self, tmp_path):
        assert run(tmp_path, "frobnicate") == 1

    def test_runtime_error_is_2(self, tmp_path):
        session_file = tmp_path / "x.jsonl"
        session_file.write_text('{"session_id":"a","actions":["x","y"]}\n')
        assert run(tmp_path, "score", "--session-file", str(session_file)) == 2

    def test_stats_without_corpus(self, tmp_path):
        assert run(tmp_path, "stats") == 2


class TestSynthStats:
    def test_synth_writes_corpus_and_sidecar(self, tmp_path):
        assert run(tmp_path, "synth", "--personas", "2", "--vocab-size", "10",
                   "--sizes", "30,30", "--seed", "1") == 0
        assert (tmp_path / "dataset.jsonl").exists()
        sidecar = [json.loads(l) for l in
                   (tmp_path / "ground_truth.jsonl").read_text().splitlines()]
        assert len(sidecar) == 60
        assert {r["persona"] for r in sidecar} == {0, 1}

    def test_stats_outputs(self, tmp_path):
        run(tmp_path, "synth", "--personas", "2", "--vocab-size", "10",
            "--sizes", "30,30", "--seed", "1")
        assert run(tmp_path, "stats") == 0
        assert (tmp_path / "stats.json").exists()
        assert (tmp_path / "session_lengths.png").exists()

    def test_synth_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for wd in (a, b):
            run(wd, "synth", "--personas", "2", "--vocab-size", "10",
                "--sizes", "25,25", "--seed", "9")
        assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
        assert (a / "ground_truth.jsonl").read_bytes() == (b / "ground_truth.jsonl").read_bytes()


class TestIngest:
    def test_ingest_csv(self, tmp_path):
        src = tmp_path / "log.csv"
        src.write_text("session_id,action,ordinal\ns1,A,0\ns1,B,1\ns2,B,0\ns2,A,1\n")
        assert run(tmp_path, "ingest", "--input", str(src), "--format", "csv") == 0
        lines = (tmp_path / "dataset.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_ingest_filters_short(self, tmp_path):
        src = tmp_path / "log.jsonl"
        src.write_text('{"session_id":"a","actions":["x","y"]}\n'
                       '{"session_id":"b","actions":["x"]}\n')
        assert run(tmp_path, "ingest", "--input", str(src)) == 0
        lines = (tmp_path / "dataset.jsonl").read_text().splitlines()
        assert len(lines) == 1


class TestTrainedCommands:
    def test_score(self, trained_workdir):
        wd = trained_workdir
        lines = (wd / "dataset.jsonl").read_text().splitlines()
        probe = wd / "probe.jsonl"
        probe.write_text("\n".join(lines[:3]) + "\n")
        assert run(wd, "score", "--session-file", str(probe)) == 0
        report = json.loads((wd / "report.json").read_text())
        assert len(report["sessions"]) == 3
        assert 0 < report["mean_likelihood"] <= 1

    def test_monitor_traces(self, trained_workdir):
        wd = trained_workdir
        lines = (wd / "dataset.jsonl").read_text().splitlines()
        probe = wd / "probe2.jsonl"
        probe.write_text(lines[0] + "\n")
        assert run(wd, "monitor", "--session-file", str(probe)) == 0
        out_lines = [json.loads(l) for l in (wd / "traces.jsonl").read_text().splitlines()]
        assert out_lines[0]["type"] == "meta"
        records = [l for l in out_lines if l["type"] == "record"]
        n = len(json.loads(lines[0])["actions"])
        assert len(records) == n - 1
        assert [r["t"] for r in records] == list(range(2, n + 1))

    def test_random_baseline(self, trained_workdir):
        wd = trained_workdir
        assert run(wd, "random-baseline", "--count", "40", "--seed", "2") == 0
        assert (wd / "random_vs_real.csv").exists()
        assert (wd / "random_vs_real.png").exists()
        assert (wd / "random_sessions.jsonl").exists()

    def test_eval_from_workdir(self, trained_workdir):
        wd = trained_workdir
        assert run(wd, "eval", "--random-count", "40", "--trace-sessions", "10",
                   "--max-t", "40") == 0
        for name in ("cluster_vs_global.csv", "cluster_vs_global_accuracy.png",
                     "cluster_vs_global_loss.png", "online_traces.csv",
                     "online_traces.png", "normality_per_cluster.csv",
                     "normality_per_cluster.png"):
            assert (wd / name).exists(), name


class TestConfigPrecedence:
    def test_config_file_overridden_by_flag(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"synth": {"personas": 3, "vocab_size": 9,
                                             "sizes": "10,10,10"}}))
        assert main(["--workdir", str(tmp_path), "--config", str(cfg), "synth",
                     "--seed", "1"]) == 0
        sidecar = [json.loads(l) for l in
                   (tmp_path / "ground_truth.jsonl").read_text().splitlines()]
        assert {r["persona"] for r in sidecar} == {0, 1, 2}
        # explicit flag beats the file
        assert main(["--workdir", str(tmp_path), "--config", str(cfg), "synth",
                     "--personas", "2", "--sizes", "10,10", "--seed", "1"]) == 0
        sidecar = [json.loads(l) for l in
                   (tmp_path / "ground_truth.jsonl").read_text().splitlines()]
        assert {r["persona"] for r in sidecar} == {0, 1}

    def test_env_overrides_file(self, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"synth": {"personas": 3, "vocab_size": 9,
                                             "sizes": "10,10,10"}}))
        monkeypatch.setenv("SESSIONWATCH_SYNTH_PERSONAS", "2")
        monkeypatch.setenv("SESSIONWATCH_SYNTH_SIZES", "10,10")
        assert main(["--workdir", str(tmp_path), "--config", str(cfg), "synth",
                     "--seed", "1"]) == 0
        sidecar = [json.loads(l) for l in
                   (tmp_path / "ground_truth.jsonl").read_text().splitlines()]
        assert {r["persona"] for r in sidecar} == {0, 1}
