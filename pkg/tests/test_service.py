import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from sessionwatch.corpus import emit, generate_synthetic, make_personas
from sessionwatch.service import ServiceConfig, create_app


def wait_job(client, job_id, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        payload = client.get(f"/api/jobs/{job_id}").json()
        if payload["state"] in ("done", "failed"):
            return payload
        time.sleep(0.05)
    raise TimeoutError("job did not finish")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    path = tmp_path_factory.mktemp("svc")
    cfg = make_personas(2, 10, [60, 60], overlap=0.0, mean_length=8.0, seed=12)
    out = generate_synthetic(cfg)
    emit(out.dataset, str(path / "dataset.jsonl"))
    return path


@pytest.fixture(scope="module")
def client(workdir):
    app = create_app(ServiceConfig(workdir=str(workdir)))
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def fitted(client):
    """Drive the full lifecycle once: lda -> clusters -> train."""
    r = client.post("/api/lda", json={"k_list": [2], "iterations": 120, "seed": 3})
    assert r.status_code == 200, r.text
    assert wait_job(client, r.json()["job_id"])["state"] == "done"

    r = client.post("/api/clusters", json={"selections": [
        {"id": 1, "name": "alpha", "topics": [{"run": 0, "topic": 0}]},
        {"id": 2, "name": "beta", "topics": [{"run": 0, "topic": 1}]},
    ]})
    assert r.status_code == 200, r.text
    sizes = {c["id"]: c["size"] for c in r.json()["clusters"]}

    r = client.post("/api/train", json={
        "lm": {"hidden": 10, "epochs": 4, "dropout": 0.2, "batch_size": 16},
        "ocsvm": {"nu": 0.2, "gamma": 1.5},
        "seed": 1,
    })
    assert r.status_code == 200, r.text
    assert wait_job(client, r.json()["job_id"])["state"] == "done"
    return sizes


class TestEnsembleEndpoints:
    def test_409_before_fit(self, workdir):
        app = create_app(ServiceConfig(workdir=str(workdir / "empty")))
        with TestClient(app) as c:
            r = c.get("/api/ensemble")
            assert r.status_code == 409
            assert r.json()["error"] == "no_ensemble"
            assert c.get("/api/projection").status_code == 409
            assert c.get("/api/chord").status_code == 409

    def test_topics_payload(self, client, fitted):
        payload = client.get("/api/ensemble").json()
        assert payload["total_topics"] == 2
        assert len(payload["topics"]) == 2
        for topic in payload["topics"]:
            probs = [a["p"] for a in topic["top_actions"]]
            assert len(probs) <= 10
            assert sum(probs) <= 1.0 + 1e-12
            assert probs == sorted(probs, reverse=True)

    def test_payload_roundtrips_phi(self, client, fitted, workdir):
        from sessionwatch.lda import load_ensemble

        ens = load_ensemble(str(workdir / "ensemble.json"))
        payload = client.get("/api/ensemble").json()
        for topic in payload["topics"]:
            row = ens.phi_row((topic["run"], topic["topic"]))
            by_name = {}
            for i, p in enumerate(row):
                by_name.setdefault(float(p), []).append(i)
            for entry in topic["top_actions"]:
                # exact float64 round-trip through JSON
                assert entry["p"] in by_name

    def test_projection_shape(self, client, fitted):
        r = client.get("/api/projection")
        # 2 topics is below the t-SNE minimum; the service stores no projection
        assert r.status_code in (200, 409)

    def test_chord_symmetry(self, client, fitted):
        payload = client.get("/api/chord", params={"threshold": 0.05}).json()
        shared = payload["shared"]
        n = len(shared)
        for i in range(n):
            assert shared[i][i] == payload["fan_sizes"][i]
            for j in range(n):
                assert shared[i][j] == shared[j][i]

    def test_chord_threshold_one(self, client, fitted):
        payload = client.get("/api/chord", params={"threshold": 1.0}).json()
        for i, row in enumerate(payload["shared"]):
            for j, v in enumerate(row):
                if i != j:
                    assert v == 0


class TestClusterEndpoints:
    def test_sizes_sum_to_m(self, client, fitted, workdir):
        # the service drops length-1 sessions at load; m is the active corpus
        m = sum(
            1
            for line in (workdir / "dataset.jsonl").read_text().splitlines()
            if line and len(json.loads(line)["actions"]) >= 2
        )
        assert sum(fitted.values()) == m

    def test_overlapping_selection_422(self, client, fitted):
        r = client.post("/api/clusters", json={"selections": [
            {"id": 1, "topics": [{"run": 0, "topic": 0}]},
            {"id": 2, "topics": [{"run": 0, "topic": 0}]},
        ]})
        assert r.status_code == 422

    def test_unknown_field_400(self, client, fitted):
        r = client.post("/api/clusters", json={"selections": [], "bogus": 1})
        assert r.status_code == 400
        assert r.json()["error"] == "unknown_field"
        assert "bogus" in r.json()["field"]

    def test_nested_unknown_field_400(self, client, fitted):
        r = client.post("/api/clusters", json={"selections": [
            {"id": 1, "topics": [{"run": 0, "topic": 0, "oops": 2}]},
        ]})
        assert r.status_code == 400
        assert "oops" in r.json()["field"]


class TestScoreAndMonitor:
    def test_score_training_session(self, client, fitted, workdir):
        line = (workdir / "dataset.jsonl").read_text().splitlines()[0]
        actions = json.loads(line)["actions"]
        r = client.post("/api/score", json={"actions": actions, "session_id": "probe"})
        assert r.status_code == 200
        payload = r.json()
        assert payload["sessions"][0]["cluster"] in (0, 1, 2)
        assert 0 < payload["mean_likelihood"] <= 1

    def test_score_untrained_409(self, workdir):
        app = create_app(ServiceConfig(workdir=str(workdir / "untrained")))
        with TestClient(app) as c:
            r = c.post("/api/score", json={"actions": ["a", "b"]})
            assert r.status_code == 409
            assert r.json()["error"] == "not_trained"

    def test_monitor_order_and_oov(self, client, fitted, workdir):
        line = (workdir / "dataset.jsonl").read_text().splitlines()[0]
        actions = json.loads(line)["actions"][:3]
        channel = client.post("/api/monitor/open").json()["channel_id"]
        records = []
        for a in actions:
            r = client.post(f"/api/monitor/{channel}/actions", json={"action": a})
            assert r.status_code == 200
            for ln in r.text.splitlines():
                records.append(json.loads(ln))
        # t=1 yields no record; t=2,3 arrive in order
        assert [rec["t"] for rec in records] == [2, 3]

        r = client.post(f"/api/monitor/{channel}/actions", json={"action": "NO_SUCH"})
        rec = json.loads(r.text.splitlines()[0])
        assert rec["oov"] is True

        closed = client.delete(f"/api/monitor/{channel}").json()
        assert closed["records"] == 3
        assert any(a["reason"] == "out_of_vocabulary" for a in closed["alarms"])
        assert client.delete(f"/api/monitor/{channel}").status_code == 404

    def test_monitor_unknown_channel(self, client, fitted):
        r = client.post("/api/monitor/zzz/actions", json={"action": "a"})
        assert r.status_code == 404


class TestJobTable:
    def test_unknown_job_404(self, client):
        assert client.get("/api/jobs/nope").status_code == 404

    def test_conflict_while_running(self, client, fitted):
        # a slow-ish eval job occupies the single slot
        r = client.post("/api/eval", json={"random_count": 80, "max_trace_sessions": 20})
        assert r.status_code == 200
        job_id = r.json()["job_id"]
        second = client.post("/api/lda", json={"k_list": [2], "iterations": 5})
        assert second.status_code in (200, 409)
        if second.status_code == 409:
            assert second.json()["error"] == "job_running"
            final = wait_job(client, job_id)
        else:
            final = wait_job(client, job_id)
            wait_job(client, second.json()["job_id"])
        assert final["state"] == "done"
        assert final["progress"] == 1.0

    def test_eval_writes_reports(self, client, fitted, workdir):
        for name in ("cluster_vs_global.csv", "online_traces.csv",
                     "random_vs_real.csv", "normality_per_cluster.csv",
                     "cluster_vs_global_accuracy.png", "online_traces.png"):
            assert (workdir / name).exists(), name


class TestRestartSafety:
    def test_reload_from_workdir(self, client, fitted, workdir):
        app = create_app(ServiceConfig(workdir=str(workdir)))
        with TestClient(app) as c2:
            assert c2.get("/api/ensemble").status_code == 200
            lines = (workdir / "dataset.jsonl").read_text().splitlines()
            actions = next(
                json.loads(ln)["actions"] for ln in lines
                if ln and len(json.loads(ln)["actions"]) >= 2
            )
            r = c2.post("/api/score", json={"actions": actions})
            assert r.status_code == 200
            assert r.json()["mean_likelihood"] is not None


class TestServiceConfig:
    def test_file_and_env_precedence(self, tmp_path, monkeypatch):
        from sessionwatch.service import load_service_config

        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "service": {"fan_threshold": 0.05, "projection_perplexity": 7.0},
            "synth": {"personas": 3},
        }))
        loaded = load_service_config(str(tmp_path), str(cfg))
        assert loaded.fan_threshold == 0.05
        assert loaded.projection_perplexity == 7.0
        monkeypatch.setenv("SESSIONWATCH_FAN_THRESHOLD", "0.08")
        loaded = load_service_config(str(tmp_path), str(cfg))
        assert loaded.fan_threshold == 0.08  # env beats the file
        assert loaded.workdir == str(tmp_path)

    def test_defaults_without_file(self, tmp_path):
        from sessionwatch.service import load_service_config

        loaded = load_service_config(str(tmp_path))
        assert loaded.fan_threshold == 0.01
        assert loaded.monitor.vote_horizon == 15
