"""Batch driver for the pipeline: synthesize or ingest a corpus, fit the
topic ensemble, materialize expert selections, train, score, monitor, and
reproduce the evaluation reports as CSV files with rendered figures.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Option precedence
is flags > environment (SESSIONWATCH_*) > config file > built-in defaults;
pass --config with a JSON file mapping subcommand names to option values.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import plots
from .clusterer import ClusterSelection, assign_sessions, assignment_from_labels, save_assignment
from .corpus import (
    default_config,
    emit,
    filter_short,
    generate_synthetic,
    ingest,
    length_stats,
    make_personas,
)
from .lda import TopicRef, fit_ensemble, load_ensemble, project_topics, save_ensemble
from .pipeline import (
    BENCHMARKS,
    LmConfig,
    OcsvmConfig,
    load_artifacts,
    save_artifacts,
    train_all,
)
from .scoring import (
    MonitorConfig,
    NormalityReport,
    SessionMonitor,
    generate_random_sessions,
    score_session_names,
)
from .serialize import dump_json, read_json


class RuntimeFailure(RuntimeError):
    """Command-level failure: reported on stderr, exit code 2."""


def _load_corpus(workdir: str, keep_short: bool = False):
    path = os.path.join(workdir, "dataset.jsonl")
    if not os.path.exists(path):
        raise RuntimeFailure(f"no dataset at {path} (run `synth` or `ingest` first)")
    dataset = ingest(path)
    if keep_short:
        return dataset
    return filter_short(dataset).dataset


def _load_trained(workdir: str):
    meta = os.path.join(workdir, "train_meta.json")
    if not os.path.exists(meta):
        raise RuntimeFailure(f"no trained models in {workdir} (run `train` first)")
    dataset = _load_corpus(workdir)
    return dataset, load_artifacts(workdir, dataset)


def _comma_ints(value: str) -> list[int]:
    try:
        return [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


@click.group(help=__doc__)
@click.option("--workdir", default="workdir", show_default=True,
              help="Directory holding the corpus and every produced artifact.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON config file: {subcommand: {option: value}}.")
@click.pass_context
def cli(ctx, workdir, config_file):
    if config_file:
        ctx.default_map = read_json(config_file)
    os.makedirs(workdir, exist_ok=True)
    ctx.obj = {"workdir": workdir, "config_file": config_file}


@cli.command()
@click.option("--benchmark", type=click.Choice(sorted(BENCHMARKS) + ["default"]),
              default=None, help="Use a named corpus configuration.")
@click.option("--personas", default=4, show_default=True)
@click.option("--vocab-size", default=60, show_default=True)
@click.option("--sizes", default="150,400,1200,3000", show_default=True,
              help="Comma-separated per-persona session counts.")
@click.option("--overlap", default=0.2, show_default=True)
@click.option("--mean-length", default=15.0, show_default=True)
@click.option("--long-fraction", default=0.02, show_default=True,
              help="Share of sessions drawn from the long-tail length distribution.")
@click.option("--long-mean-length", default=120.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_obj
def synth(obj, benchmark, personas, vocab_size, sizes, overlap, mean_length,
          long_fraction, long_mean_length, seed):
    """Generate a synthetic persona corpus plus its ground-truth sidecar."""
    if benchmark == "default":
        config = default_config(seed=seed)
    elif benchmark:
        config = BENCHMARKS[benchmark](seed=seed)
    else:
        size_list = _comma_ints(sizes)
        if len(size_list) != personas:
            raise click.BadParameter("--sizes must list one count per persona")
        config = make_personas(
            personas, vocab_size, size_list, overlap=overlap, mean_length=mean_length,
            long_fraction=long_fraction, long_mean_length=long_mean_length, seed=seed)
    out = generate_synthetic(config)
    emit(out.dataset, os.path.join(obj["workdir"], "dataset.jsonl"))
    with open(os.path.join(obj["workdir"], "ground_truth.jsonl"), "w", encoding="utf-8") as fh:
        for rec in out.sidecar_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    click.echo(f"wrote {out.dataset.m} sessions over {out.dataset.vocabulary.size} actions "
               f"({len(config.personas)} personas)")


@cli.command("ingest")
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default="jsonl",
              show_default=True)
@click.option("--filter-short/--keep-short", "drop_short", default=True,
              show_default=True, help="Drop sessions with fewer than two actions.")
@click.pass_obj
def ingest_cmd(obj, input_path, fmt, drop_short):
    """Normalize a session log into the working directory."""
    dataset = ingest(input_path, format=fmt)
    removed = 0
    if drop_short:
        dataset, removed = filter_short(dataset)
    if dataset.m == 0:
        raise RuntimeFailure("no sessions remain after filtering")
    emit(dataset, os.path.join(obj["workdir"], "dataset.jsonl"))
    click.echo(f"ingested {dataset.m} sessions, {dataset.vocabulary.size} actions"
               + (f" (removed {removed} short sessions)" if drop_short else ""))


@cli.command()
@click.option("--percentile", "percentiles", multiple=True, type=float,
              default=(50.0, 90.0, 98.0), show_default=True)
@click.pass_obj
def stats(obj, percentiles):
    """Length statistics of the corpus plus a histogram figure."""
    dataset = _load_corpus(obj["workdir"], keep_short=True)
    payload = plots.write_stats_report(obj["workdir"], dataset,
                                       percentiles=tuple(percentiles))
    st = length_stats(dataset)
    click.echo(f"sessions={dataset.m} actions={dataset.vocabulary.size} "
               f"mean={st.mean:.2f} max={st.max}")
    for p in percentiles:
        click.echo(f"p{p:g}={st.percentile(p)}")
    click.echo(f"stats.json and session_lengths.png written to {obj['workdir']}")
    return payload


@cli.command()
@click.option("--k-list", default="5,10,15,20", show_default=True)
@click.option("--seeds-per-k", default=2, show_default=True)
@click.option("--alpha", default=None, type=float, help="Defaults to 50/K.")
@click.option("--beta", default=0.01, show_default=True)
@click.option("--iterations", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--perplexity", default=10.0, show_default=True,
              help="t-SNE perplexity for the topic projection.")
@click.option("--tsne-iterations", default=1000, show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.pass_obj
def lda(obj, k_list, seeds_per_k, alpha, beta, iterations, seed, perplexity,
        tsne_iterations, workers):
    """Fit the LDA ensemble and the 2-D topic projection."""
    dataset = _load_corpus(obj["workdir"])
    ensemble = fit_ensemble(
        dataset, _comma_ints(k_list), seeds_per_K=seeds_per_k, alpha=alpha,
        beta=beta, iterations=iterations, base_seed=seed, n_workers=workers)
    save_ensemble(ensemble, os.path.join(obj["workdir"], "ensemble.json"))
    if ensemble.total_topics >= 3:
        perp = min(perplexity, ensemble.total_topics - 1)
        points = project_topics(ensemble, perplexity=perp,
                                iterations=tsne_iterations, seed=seed)
        dump_json(os.path.join(obj["workdir"], "projection.json"), {
            "version": 1,
            "points": [{"run": r.run, "topic": r.topic, "x": x, "y": y}
                       for r, x, y in points],
        })
    click.echo(f"fitted {len(ensemble.runs)} runs, {ensemble.total_topics} topics")


@cli.command()
@click.option("--selections", "selections_file", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON file: {\"clusters\": [{\"id\", \"name\", \"topics\": [{\"run\", \"topic\"}]}]}.")
@click.pass_obj
def assign(obj, selections_file):
    """Materialize an expert topic selection into session clusters."""
    workdir = obj["workdir"]
    ensemble_path = os.path.join(workdir, "ensemble.json")
    if not os.path.exists(ensemble_path):
        raise RuntimeFailure("no ensemble.json (run `lda` first)")
    dataset = _load_corpus(workdir)
    ensemble = load_ensemble(ensemble_path)
    payload = read_json(selections_file)
    selections = [
        ClusterSelection(
            c["id"], c.get("name", f"cluster-{c['id']}"),
            tuple(TopicRef(t["run"], t["topic"]) for t in c["topics"]),
        )
        for c in payload["clusters"]
    ]
    assignment = assign_sessions(ensemble, selections, dataset)
    save_assignment(assignment, os.path.join(workdir, "assignment.json"))
    for c in assignment.clusters:
        click.echo(f"cluster {c.cluster_id} ({c.name}): {c.size} sessions")


@cli.command()
@click.option("--hidden", default=256, show_default=True)
@click.option("--dropout", default=0.4, show_default=True)
@click.option("--epochs", default=100, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--lr", default=0.001, show_default=True)
@click.option("--patience", default=5, show_default=True)
@click.option("--nu", default=0.05, show_default=True)
@click.option("--gamma", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--baselines/--no-baselines", default=True, show_default=True)
@click.option("--from-ground-truth", is_flag=True, default=False,
              help="Cluster by the synthetic sidecar instead of assignment.json.")
@click.pass_obj
def train(obj, hidden, dropout, epochs, batch_size, lr, patience, nu, gamma,
          seed, baselines, from_ground_truth):
    """Train per-cluster OC-SVMs and language models (plus baselines)."""
    workdir = obj["workdir"]
    dataset = _load_corpus(workdir)
    if from_ground_truth:
        assignment = _ground_truth_assignment(workdir, dataset)
    else:
        path = os.path.join(workdir, "assignment.json")
        if not os.path.exists(path):
            raise RuntimeFailure("no assignment.json (run `assign` first)")
        from .clusterer import load_assignment

        assignment = load_assignment(path)
    lm_config = LmConfig(hidden=hidden, dropout=dropout, epochs=epochs,
                         batch_size=batch_size, lr=lr, patience=patience)
    ocsvm_config = OcsvmConfig(nu=nu, gamma=gamma)

    def show_progress(frac, msg):
        click.echo(f"[{frac:5.1%}] {msg}")

    artifacts = train_all(dataset, assignment, lm_config=lm_config,
                          ocsvm_config=ocsvm_config, seed=seed,
                          with_baselines=baselines, progress=show_progress)
    if from_ground_truth:
        save_assignment(assignment, os.path.join(workdir, "assignment.json"))
    save_artifacts(workdir, artifacts)
    click.echo(f"trained {assignment.k} cluster models into {workdir}")


def _ground_truth_assignment(workdir: str, dataset):
    sidecar = os.path.join(workdir, "ground_truth.jsonl")
    if not os.path.exists(sidecar):
        raise RuntimeFailure("no ground_truth.jsonl sidecar in the workdir")
    label_by_id = {}
    with open(sidecar, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                label_by_id[rec["session_id"]] = rec["persona"]
    labels = [label_by_id[s.session_id] for s in dataset.sessions]
    return assignment_from_labels(dataset, labels)


@cli.command()
@click.option("--session-file", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSONL file of sessions to score.")
@click.option("--output", default="report.json", show_default=True,
              help="Report filename (relative to the workdir).")
@click.pass_obj
def score(obj, session_file, output):
    """Score sessions for normality under the trained artifacts."""
    _, artifacts = _load_trained(obj["workdir"])
    config = MonitorConfig(reference_likelihood=artifacts.reference_likelihood)
    rows = []
    with open(session_file, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            rows.append(score_session_names(
                rec["session_id"], rec["actions"], artifacts.cluster_lms,
                artifacts.cluster_ocsvms, artifacts.dataset.vocabulary, config))
    report = NormalityReport.from_rows(rows)
    dump_json(os.path.join(obj["workdir"], output), report.to_json())
    click.echo(f"scored {len(rows)} sessions: mean likelihood "
               f"{report.mean_likelihood:.4f}, mean loss {report.mean_loss:.4f}")


@cli.command()
@click.option("--session-file", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--output", default="traces.jsonl", show_default=True)
@click.option("--vote-horizon", default=15, show_default=True)
@click.option("--alarm-patience", default=5, show_default=True)
@click.option("--alarm-threshold", default=None, type=float,
              help="Absolute threshold; defaults to 0.1x each cluster's validation mean.")
@click.pass_obj
def monitor(obj, session_file, output, vote_horizon, alarm_patience, alarm_threshold):
    """Replay sessions through the online monitor, one JSON record per action."""
    _, artifacts = _load_trained(obj["workdir"])
    config = MonitorConfig(
        vote_horizon=vote_horizon, alarm_patience=alarm_patience,
        alarm_threshold=alarm_threshold,
        reference_likelihood=artifacts.reference_likelihood)
    out_path = os.path.join(obj["workdir"], output)
    alarms_total = 0
    with open(out_path, "w", encoding="utf-8") as out:
        out.write(json.dumps({
            "type": "meta", "vote_horizon": vote_horizon,
            "alarm_patience": alarm_patience, "alarm_threshold": alarm_threshold,
            "threshold_factor": config.threshold_factor,
            "reference_likelihood": {str(k): v for k, v in
                                     artifacts.reference_likelihood.items()},
        }, sort_keys=True) + "\n")
        with open(session_file, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                mon = SessionMonitor(artifacts.cluster_lms, artifacts.cluster_ocsvms,
                                     artifacts.dataset.vocabulary, config)
                mon.trace.session_id = rec["session_id"]
                seen_alarms = 0
                for action in rec["actions"]:
                    record = mon.feed(action)
                    if record is not None:
                        payload = record.to_json()
                        payload.update({"type": "record", "session_id": rec["session_id"]})
                        out.write(json.dumps(payload, sort_keys=True) + "\n")
                    for alarm in mon.trace.alarms[seen_alarms:]:
                        payload = alarm.to_json()
                        payload.update({"type": "alarm", "session_id": rec["session_id"]})
                        out.write(json.dumps(payload, sort_keys=True) + "\n")
                    seen_alarms = len(mon.trace.alarms)
                alarms_total += seen_alarms
    click.echo(f"wrote {out_path} ({alarms_total} alarms)")


@cli.command("random-baseline")
@click.option("--count", default=1000, show_default=True)
@click.option("--length-range", default="5,25", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_obj
def random_baseline(obj, count, length_range, seed):
    """Score random sessions against the real test set (abnormality baseline)."""
    _, artifacts = _load_trained(obj["workdir"])
    lo, hi = _comma_ints(length_range)
    random_ds = generate_random_sessions(count, artifacts.dataset.vocabulary,
                                         (lo, hi), seed=seed)
    emit(random_ds, os.path.join(obj["workdir"], "random_sessions.jsonl"))
    reports = plots.write_random_vs_real(
        obj["workdir"], artifacts, random_count=count, length_range=(lo, hi), seed=seed)
    real, rand = reports["real_test"], reports["random"]
    click.echo(f"real test: likelihood {real.mean_likelihood:.4f}, loss {real.mean_loss:.4f}")
    click.echo(f"random:    likelihood {rand.mean_likelihood:.4f}, loss {rand.mean_loss:.4f}")


@cli.command("eval")
@click.option("--benchmark", type=click.Choice(sorted(BENCHMARKS)), default=None,
              help="Self-contained run: synthesize, cluster by ground truth, train, report.")
@click.option("--hidden", default=64, show_default=True)
@click.option("--epochs", default=8, show_default=True)
@click.option("--nu", default=0.1, show_default=True)
@click.option("--gamma", default=4.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--random-count", default=1000, show_default=True)
@click.option("--max-t", default=300, show_default=True)
@click.option("--trace-sessions", default=200, show_default=True)
@click.pass_obj
def eval_cmd(obj, benchmark, hidden, epochs, nu, gamma, seed, random_count, max_t,
             trace_sessions):
    """Reproduce the evaluation: comparison tables, online traces, random
    baseline, per-cluster normality; CSVs plus figures in the workdir."""
    workdir = obj["workdir"]
    if benchmark:
        out = generate_synthetic(BENCHMARKS[benchmark](seed=seed))
        emit(out.dataset, os.path.join(workdir, "dataset.jsonl"))
        with open(os.path.join(workdir, "ground_truth.jsonl"), "w", encoding="utf-8") as fh:
            for rec in out.sidecar_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        dataset = filter_short(out.dataset).dataset
        assignment = _ground_truth_assignment(workdir, dataset)
        artifacts = train_all(
            dataset, assignment,
            lm_config=LmConfig(hidden=hidden, epochs=epochs),
            ocsvm_config=OcsvmConfig(nu=nu, gamma=gamma), seed=seed,
            progress=lambda f, m: click.echo(f"[{f:5.1%}] {m}"))
        save_assignment(assignment, os.path.join(workdir, "assignment.json"))
        save_artifacts(workdir, artifacts)
    else:
        _, artifacts = _load_trained(workdir)
    results = plots.write_eval_reports(
        workdir, artifacts, random_count=random_count, seed=seed,
        max_t=max_t, max_trace_sessions=trace_sessions)
    for row in results["cluster_vs_global"]:
        click.echo(f"cluster {row.cluster_id} (n={row.size}): own acc "
                   f"{row.own_test_accuracy:.3f} vs other {row.mean_other_test_accuracy:.3f}")
    click.echo(f"reports written to {workdir}")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--ui-dir", default=None, type=click.Path(exists=True, file_okay=False),
              help="Static expert-UI bundle to serve at /ui (frontend/ after `npm run build`).")
@click.pass_context
def serve(ctx, host, port, ui_dir):
    """Run the HTTP service over the working directory.

    Service knobs (fan threshold, projection parameters) come from the
    config file's "service" section and SESSIONWATCH_* variables.
    """
    import uvicorn

    from .service import create_app, load_service_config

    config = load_service_config(ctx.obj["workdir"], ctx.obj.get("config_file"))
    config.ui_dir = ui_dir
    app = create_app(config)
    uvicorn.run(app, host=host, port=port, log_level="info")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False,
                 auto_envvar_prefix="SESSIONWATCH")
        return 0
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 130
    except (RuntimeFailure, ValueError, RuntimeError, OSError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
