"""HTTP+JSON facade over the pipeline for the expert UI and monitoring
clients.

State lives in a working directory (dataset, ensemble, assignment, trained
models) and is reloaded on startup, so the service is restart-safe.  One
background job (lda / train / eval) runs at a time; finished artifacts are
swapped in atomically.  All request schemas reject unknown fields with 400.
"""

from __future__ import annotations

import itertools
import json
import os
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from . import plots
from .clusterer import ClusterSelection, EmptyClusterError, assign_sessions, save_assignment
from .corpus import SessionDataset, filter_short, ingest
from .lda import (
    LdaEnsemble,
    TopicRef,
    fit_ensemble,
    load_ensemble,
    medoid_topic,
    project_topics,
    save_ensemble,
    shared_action_count,
    topic_fan_size,
)
from .pipeline import (
    LmConfig,
    OcsvmConfig,
    TrainedArtifacts,
    load_artifacts,
    save_artifacts,
    train_all,
)
from .scoring import MonitorConfig, NormalityReport, SessionMonitor, score_session_names
from .serialize import dump_json, read_json


@dataclass
class ServiceConfig:
    workdir: str
    fan_threshold: float = 0.01
    projection_perplexity: float = 10.0
    projection_iterations: int = 1000
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    ui_dir: str | None = None  # static expert-UI bundle, served at /ui


class Job:
    """queued -> running -> done|failed; no other transitions."""

    def __init__(self, kind: str):
        self.job_id = uuid.uuid4().hex[:12]
        self.kind = kind
        self.state = "queued"
        self.progress = 0.0
        self.message = ""

    def start(self):
        assert self.state == "queued"
        self.state = "running"

    def finish(self, message: str = ""):
        assert self.state == "running"
        self.state, self.progress, self.message = "done", 1.0, message

    def fail(self, message: str):
        assert self.state in ("queued", "running")
        self.state, self.message = "failed", message

    def to_json(self) -> dict:
        return {"version": 1, "job_id": self.job_id, "kind": self.kind,
                "state": self.state, "progress": self.progress, "message": self.message}


# --- request schemas (unknown fields rejected) ------------------------------


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopicRefIn(StrictModel):
    run: int
    topic: int


class SelectionIn(StrictModel):
    id: int
    name: str = ""
    topics: list[TopicRefIn]


class ClustersRequest(StrictModel):
    selections: list[SelectionIn]


class LmParams(StrictModel):
    hidden: int = 64
    dropout: float = 0.4
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.001
    patience: int = 5


class OcsvmParams(StrictModel):
    nu: float = 0.05
    gamma: float = 1.0


class TrainRequest(StrictModel):
    lm: LmParams = LmParams()
    ocsvm: OcsvmParams = OcsvmParams()
    seed: int = 0
    with_baselines: bool = True


class LdaRequest(StrictModel):
    k_list: list[int]
    seeds_per_k: int = 1
    alpha: float | None = None
    beta: float = 0.01
    iterations: int = 200
    seed: int = 0


class EvalRequest(StrictModel):
    random_count: int = 1000
    seed: int = 0
    max_t: int = 300
    max_trace_sessions: int = 200


class ScoreRequest(StrictModel):
    actions: list[str]
    session_id: str = "adhoc"


class MonitorActionIn(StrictModel):
    action: str


class AppState:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.dataset: SessionDataset | None = None
        self.ensemble: LdaEnsemble | None = None
        self.projection: list | None = None
        self.assignment = None
        self.artifacts: TrainedArtifacts | None = None
        self.jobs: dict[str, Job] = {}
        self.job_lock = threading.Lock()
        self.active_job: Job | None = None
        self.swap_lock = threading.Lock()
        self.monitors: dict[str, tuple[SessionMonitor, threading.Lock]] = {}
        self.monitor_seq = itertools.count(1)

    # -- persistence ---------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.config.workdir, name)

    def load_existing(self):
        if os.path.exists(self.path("dataset.jsonl")):
            self.dataset = filter_short(ingest(self.path("dataset.jsonl"))).dataset
        if os.path.exists(self.path("ensemble.json")):
            self.ensemble = load_ensemble(self.path("ensemble.json"))
        if os.path.exists(self.path("projection.json")):
            payload = read_json(self.path("projection.json"))
            self.projection = payload["points"]
        if self.dataset is not None and os.path.exists(self.path("assignment.json")):
            from .clusterer import load_assignment

            try:
                assignment = load_assignment(self.path("assignment.json"))
                assignment.validate_partition(self.dataset)
                self.assignment = assignment
            except (ValueError, KeyError):
                self.assignment = None
        if self.dataset is not None and os.path.exists(self.path("train_meta.json")):
            try:
                self.artifacts = load_artifacts(self.config.workdir, self.dataset)
            except (ValueError, FileNotFoundError, KeyError):
                self.artifacts = None  # stale artifacts; retrain to refresh

    def submit_job(self, kind: str, work) -> Job | None:
        """Run one job at a time on a worker thread; None when busy."""
        with self.job_lock:
            if self.active_job is not None and self.active_job.state in ("queued", "running"):
                return None
            job = Job(kind)
            self.jobs[job.job_id] = job
            self.active_job = job

        def runner():
            job.start()
            try:
                message = work(job)
                job.finish(message or "")
            except Exception as exc:  # surface the failure via the job table
                job.fail(f"{type(exc).__name__}: {exc}")

        threading.Thread(target=runner, daemon=True).start()
        return job


def json_error(status: int, error: str, **extra) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": error, **extra})


def create_app(config: ServiceConfig) -> FastAPI:
    os.makedirs(config.workdir, exist_ok=True)
    app = FastAPI(title="sessionwatch", version="1")
    state = AppState(config)
    state.load_existing()
    app.state.ctx = state

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        for err in exc.errors():
            if err.get("type") == "extra_forbidden":
                path = ".".join(str(p) for p in err.get("loc", []) if p != "body")
                return json_error(400, "unknown_field", field=path)
        return JSONResponse(status_code=422, content={"error": "invalid_request",
                                                      "detail": exc.errors()})

    # -- ensemble views ------------------------------------------------------

    @app.get("/api/ensemble")
    def get_ensemble():
        ens = state.ensemble
        if ens is None:
            return json_error(409, "no_ensemble")
        vocab_actions = state.dataset.vocabulary.actions if state.dataset else None
        topics = []
        for ref in ens.topic_refs():
            row = ens.phi_row(ref)
            top = np.argsort(-row)[:10]
            topics.append({
                "run": ref.run,
                "topic": ref.topic,
                "top_actions": [
                    {"action": vocab_actions[i] if vocab_actions else str(i),
                     "p": float(row[i])}
                    for i in top
                ],
                "fan_size": topic_fan_size(ref, ens, config.fan_threshold),
            })
        return {"version": 1, "threshold": config.fan_threshold,
                "total_topics": ens.total_topics, "topics": topics}

    @app.get("/api/projection")
    def get_projection():
        if state.ensemble is None or state.projection is None:
            return json_error(409, "no_ensemble")
        return {"version": 1, "points": state.projection}

    @app.get("/api/chord")
    def get_chord(threshold: float = 0.01):
        ens = state.ensemble
        if ens is None:
            return json_error(409, "no_ensemble")
        if not 0 < threshold <= 1:
            return json_error(422, "bad_threshold")
        refs = ens.topic_refs()
        n = len(refs)
        shared = [[0] * n for _ in range(n)]
        fans = [topic_fan_size(r, ens, threshold) for r in refs]
        for i in range(n):
            shared[i][i] = fans[i]
            for j in range(i + 1, n):
                c = shared_action_count(refs[i], refs[j], ens, threshold)
                shared[i][j] = shared[j][i] = c
        return {"version": 1, "threshold": threshold,
                "refs": [{"run": r.run, "topic": r.topic} for r in refs],
                "fan_sizes": fans, "shared": shared}

    # -- jobs ----------------------------------------------------------------

    @app.post("/api/lda")
    def post_lda(req: LdaRequest):
        if state.dataset is None:
            return json_error(409, "no_dataset")
        if not req.k_list or any(k < 1 for k in req.k_list):
            return json_error(422, "bad_k_list")

        def work(job: Job):
            ens = fit_ensemble(
                state.dataset, req.k_list, seeds_per_K=req.seeds_per_k,
                alpha=req.alpha, beta=req.beta, iterations=req.iterations,
                base_seed=req.seed)
            job.progress = 0.8
            points = None
            if ens.total_topics >= 3:
                perp = min(config.projection_perplexity, ens.total_topics - 1)
                pts = project_topics(ens, perplexity=perp,
                                     iterations=config.projection_iterations, seed=req.seed)
                points = [{"run": r.run, "topic": r.topic, "x": x, "y": y}
                          for r, x, y in pts]
            with state.swap_lock:
                state.ensemble = ens
                state.projection = points
                save_ensemble(ens, state.path("ensemble.json"))
                if points is not None:
                    dump_json(state.path("projection.json"), {"version": 1, "points": points})
            return f"{len(ens.runs)} runs, {ens.total_topics} topics"

        job = state.submit_job("lda", work)
        if job is None:
            return json_error(409, "job_running")
        return {"job_id": job.job_id}

    @app.post("/api/clusters")
    def post_clusters(req: ClustersRequest):
        if state.ensemble is None or state.dataset is None:
            return json_error(409, "no_ensemble")
        if not req.selections:
            return json_error(422, "empty_selection")
        selections = [
            ClusterSelection(s.id, s.name or f"cluster-{s.id}",
                             tuple(TopicRef(t.run, t.topic) for t in s.topics))
            for s in req.selections
        ]
        try:
            assignment = assign_sessions(state.ensemble, selections, state.dataset)
        except EmptyClusterError as exc:
            return json_error(422, "empty_cluster", clusters=list(exc.cluster_ids))
        except ValueError as exc:
            return json_error(422, "invalid_selection", detail=str(exc))
        with state.swap_lock:
            if state.artifacts is not None:
                state.artifacts = None  # models belong to the previous assignment
            save_assignment(assignment, state.path("assignment.json"))
            state.assignment = assignment
        summary = []
        for c in assignment.clusters:
            med = medoid_topic(c.topics, state.ensemble) if c.topics else None
            summary.append({
                "id": c.cluster_id, "name": c.name, "size": c.size,
                "medoid": {"run": med.run, "topic": med.topic} if med else None,
            })
        return {"version": 1, "clusters": summary}

    @app.post("/api/train")
    def post_train(req: TrainRequest):
        if state.dataset is None or state.assignment is None:
            return json_error(409, "no_assignment")
        assignment = state.assignment
        dataset = state.dataset

        def work(job: Job):
            lm_cfg = LmConfig(hidden=req.lm.hidden, dropout=req.lm.dropout,
                              epochs=req.lm.epochs, batch_size=req.lm.batch_size,
                              lr=req.lm.lr, patience=req.lm.patience)
            oc_cfg = OcsvmConfig(nu=req.ocsvm.nu, gamma=req.ocsvm.gamma)

            def on_progress(frac, msg):
                job.progress = min(frac, 0.99)
                job.message = msg

            artifacts = train_all(dataset, assignment, lm_config=lm_cfg,
                                  ocsvm_config=oc_cfg, seed=req.seed,
                                  with_baselines=req.with_baselines, progress=on_progress)
            with state.swap_lock:
                state.artifacts = artifacts
                save_artifacts(config.workdir, artifacts)
            return f"trained {assignment.k} clusters"

        job = state.submit_job("train", work)
        if job is None:
            return json_error(409, "job_running")
        return {"job_id": job.job_id}

    @app.post("/api/eval")
    def post_eval(req: EvalRequest):
        if state.artifacts is None:
            return json_error(409, "not_trained")
        artifacts = state.artifacts

        def work(job: Job):
            plots.write_eval_reports(
                config.workdir, artifacts, random_count=req.random_count,
                seed=req.seed, max_t=req.max_t, max_trace_sessions=req.max_trace_sessions)
            return "reports written"

        job = state.submit_job("eval", work)
        if job is None:
            return json_error(409, "job_running")
        return {"job_id": job.job_id}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            return json_error(404, "unknown_job")
        return job.to_json()

    # -- scoring and monitoring ----------------------------------------------

    def monitor_config() -> MonitorConfig:
        base = config.monitor
        refs = state.artifacts.reference_likelihood if state.artifacts else None
        return MonitorConfig(
            vote_horizon=base.vote_horizon, alarm_patience=base.alarm_patience,
            alarm_threshold=base.alarm_threshold, reference_likelihood=refs,
            threshold_factor=base.threshold_factor)

    @app.post("/api/score")
    def post_score(req: ScoreRequest):
        if state.artifacts is None:
            return json_error(409, "not_trained")
        art = state.artifacts
        row = score_session_names(
            req.session_id, req.actions, art.cluster_lms, art.cluster_ocsvms,
            art.dataset.vocabulary, monitor_config())
        return NormalityReport.from_rows([row]).to_json()

    @app.post("/api/monitor/open")
    def monitor_open():
        if state.artifacts is None:
            return json_error(409, "not_trained")
        art = state.artifacts
        channel_id = f"mon-{next(state.monitor_seq):06d}"
        mon = SessionMonitor(art.cluster_lms, art.cluster_ocsvms,
                             art.dataset.vocabulary, monitor_config())
        mon.trace.session_id = channel_id
        state.monitors[channel_id] = (mon, threading.Lock())
        return {"version": 1, "channel_id": channel_id}

    @app.post("/api/monitor/{channel_id}/actions")
    def monitor_actions(channel_id: str, body: MonitorActionIn):
        entry = state.monitors.get(channel_id)
        if entry is None:
            return json_error(404, "unknown_channel")
        mon, lock = entry
        with lock:  # one channel, strictly ordered records
            record = mon.feed(body.action)
            alarm_count = len(mon.trace.alarms)
        lines = []
        if record is not None:
            payload = record.to_json()
            payload["alarms_so_far"] = alarm_count
            lines.append(json.dumps(payload, sort_keys=True))
        return Response("".join(line + "\n" for line in lines),
                        media_type="application/x-ndjson")

    @app.delete("/api/monitor/{channel_id}")
    def monitor_close(channel_id: str):
        entry = state.monitors.pop(channel_id, None)
        if entry is None:
            return json_error(404, "unknown_channel")
        mon, _ = entry
        return {
            "version": 1,
            "channel_id": channel_id,
            "records": len(mon.trace.records),
            "alarms": [a.to_json() for a in mon.trace.alarms],
        }

    if config.ui_dir and os.path.isdir(config.ui_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=config.ui_dir, html=True), name="ui")

    return app


def load_service_config(workdir: str, config_file: str | None = None) -> ServiceConfig:
    """Config precedence: explicit file values, then environment, then
    defaults; the workdir argument always wins."""
    values: dict = {}
    if config_file:
        values.update(read_json(config_file).get("service", {}))
    env_map = {
        "SESSIONWATCH_FAN_THRESHOLD": ("fan_threshold", float),
        "SESSIONWATCH_PROJECTION_PERPLEXITY": ("projection_perplexity", float),
        "SESSIONWATCH_PROJECTION_ITERATIONS": ("projection_iterations", int),
    }
    for env, (key, cast) in env_map.items():
        if env in os.environ:
            values[key] = cast(os.environ[env])
    return ServiceConfig(workdir=workdir, **values)
