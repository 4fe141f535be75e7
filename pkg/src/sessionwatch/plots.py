"""Evaluation reports: delimited tables plus rendered figures.

Every table is written as CSV with full-precision floats and a figure is
rendered alongside it, so a working directory ends up with both the data
and the pictures for the cluster-vs-global comparison, the online score
traces, and the random-session normality baseline.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import scoring
from .corpus import SessionDataset, length_stats
from .pipeline import TrainedArtifacts, evaluate_artifacts
from .scoring import (
    NormalityReport,
    assign_cluster_vote15,
    generate_random_sessions,
    online_trace_table,
    score_dataset,
    session_likelihood,
    session_loss,
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_stats_report(workdir: str, dataset: SessionDataset,
                       percentiles=(50, 90, 98)) -> dict:
    stats = length_stats(dataset)
    payload = {
        "version": 1,
        "sessions": dataset.m,
        "actions": dataset.vocabulary.size,
        "mean_length": stats.mean,
        "max_length": stats.max,
        "percentiles": {str(p): stats.percentile(p) for p in percentiles},
    }
    with open(os.path.join(workdir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")

    fig, ax = plt.subplots(figsize=(7, 4))
    lengths = [s.length for s in dataset.sessions]
    ax.hist(lengths, bins=min(80, max(lengths)), color="steelblue", log=True)
    ax.set_xlabel("session length (actions)")
    ax.set_ylabel("sessions")
    ax.set_title(f"Session lengths (mean {stats.mean:.1f}, max {stats.max})")
    fig.tight_layout()
    fig.savefig(os.path.join(workdir, "session_lengths.png"), dpi=120)
    plt.close(fig)
    return payload


def write_cluster_vs_global(workdir: str, artifacts: TrainedArtifacts) -> list:
    rows = evaluate_artifacts(artifacts)
    _write_csv(
        os.path.join(workdir, "cluster_vs_global.csv"),
        ["cluster_id", "name", "size",
         "own_test_accuracy", "mean_other_test_accuracy",
         "global_accuracy", "size_matched_accuracy",
         "own_test_loss", "mean_other_test_loss",
         "global_loss", "size_matched_loss"],
        [[r.cluster_id, r.name, r.size,
          r.own_test_accuracy, r.mean_other_test_accuracy,
          r.global_accuracy, r.size_matched_accuracy,
          r.own_test_loss, r.mean_other_test_loss,
          r.global_loss, r.size_matched_loss] for r in rows],
    )

    for metric, fname in (("accuracy", "cluster_vs_global_accuracy.png"),
                          ("loss", "cluster_vs_global_loss.png")):
        fig, ax = plt.subplots(figsize=(8, 4.5))
        x = np.arange(len(rows))
        width = 0.2
        series = [
            (f"own_test_{metric}" if metric == "accuracy" else "own_test_loss", "cluster model"),
            (f"mean_other_test_{metric}" if metric == "accuracy" else "mean_other_test_loss",
             "same model, other test sets"),
            (f"global_{metric}", "global model"),
            (f"size_matched_{metric}", "size-matched global"),
        ]
        for k, (attr, label) in enumerate(series):
            vals = [getattr(r, attr) for r in rows]
            ax.bar(x + (k - 1.5) * width, vals, width, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{r.cluster_id}\n(n={r.size})" for r in rows])
        ax.set_xlabel("cluster (ascending size)")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(workdir, fname), dpi=120)
        plt.close(fig)
    return rows


def write_online_traces(workdir: str, artifacts: TrainedArtifacts, *,
                        max_t: int = 300, max_sessions: int = 200, seed: int = 0) -> list[dict]:
    test_sessions = []
    for ds in artifacts.cluster_splits.values():
        test_sessions.extend(s for s in ds.split_part("test").sessions if s.length >= 2)
    rng = np.random.Generator(np.random.PCG64(seed))
    if len(test_sessions) > max_sessions:
        keep = rng.choice(len(test_sessions), size=max_sessions, replace=False)
        test_sessions = [test_sessions[i] for i in sorted(int(i) for i in keep)]
    rows = online_trace_table(
        artifacts.cluster_lms, artifacts.cluster_ocsvms, artifacts.dataset.vocabulary,
        test_sessions, max_t=max_t)
    _write_csv(
        os.path.join(workdir, "online_traces.csv"),
        ["t", "mean_likelihood_max_route", "mean_likelihood_vote15", "sessions"],
        [[r["t"], r["mean_likelihood_max_route"], r["mean_likelihood_vote15"], r["sessions"]]
         for r in rows],
    )
    fig, ax = plt.subplots(figsize=(8, 4))
    ts = [r["t"] for r in rows]
    ax.plot(ts, [r["mean_likelihood_max_route"] for r in rows],
            label="max-score routing each step", lw=1.2)
    ax.plot(ts, [r["mean_likelihood_vote15"] for r in rows],
            label="first-15 vote routing", lw=1.2)
    ax.set_xlabel("action index")
    ax.set_ylabel("mean likelihood of next action")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(workdir, "online_traces.png"), dpi=120)
    plt.close(fig)
    return rows


def write_random_vs_real(workdir: str, artifacts: TrainedArtifacts, *,
                         random_count: int = 1000, length_range=(5, 25),
                         seed: int = 0) -> dict[str, NormalityReport]:
    vocab = artifacts.dataset.vocabulary
    test_sessions = []
    for ds in artifacts.cluster_splits.values():
        test_sessions.extend(s for s in ds.split_part("test").sessions if s.length >= 2)
    real = score_dataset(test_sessions, artifacts.cluster_lms, artifacts.cluster_ocsvms, vocab)
    random_ds = generate_random_sessions(random_count, vocab, length_range, seed=seed)
    random_report = score_dataset(random_ds.sessions, artifacts.cluster_lms,
                                  artifacts.cluster_ocsvms, vocab)
    reports = {"real_test": real, "random": random_report}
    _write_csv(
        os.path.join(workdir, "random_vs_real.csv"),
        ["dataset", "sessions", "mean_likelihood", "var_likelihood",
         "mean_loss", "var_loss", "mean_perplexity"],
        [[name, len(rep.rows), rep.mean_likelihood, rep.var_likelihood,
          rep.mean_loss, rep.var_loss, rep.mean_perplexity]
         for name, rep in reports.items()],
    )
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
    names = list(reports)
    axes[0].bar(names, [reports[n].mean_likelihood for n in names],
                yerr=[np.sqrt(reports[n].var_likelihood) for n in names],
                color=["seagreen", "indianred"], capsize=4)
    axes[0].set_ylabel("mean likelihood")
    axes[1].bar(names, [reports[n].mean_loss for n in names],
                yerr=[np.sqrt(reports[n].var_loss) for n in names],
                color=["seagreen", "indianred"], capsize=4)
    axes[1].set_ylabel("mean loss")
    fig.tight_layout()
    fig.savefig(os.path.join(workdir, "random_vs_real.png"), dpi=120)
    plt.close(fig)
    return reports


def write_normality_per_cluster(workdir: str, artifacts: TrainedArtifacts) -> list[tuple]:
    vocab = artifacts.dataset.vocabulary
    rows = []
    ordered = sorted(artifacts.cluster_splits, key=lambda cid: artifacts.cluster_sizes()[cid])
    for cid in ordered:
        test = [s for s in artifacts.cluster_splits[cid].split_part("test").sessions
                if s.length >= 2]
        if not test:
            continue
        variants: dict[str, list[tuple[float, float]]] = {}
        for s in test:
            per_model = {"own": artifacts.cluster_lms[cid]}
            voted = assign_cluster_vote15(s.actions, artifacts.cluster_ocsvms, vocab.size)
            per_model["routed_vote15"] = artifacts.cluster_lms[voted]
            if artifacts.global_lm is not None:
                per_model["global"] = artifacts.global_lm
            if cid in artifacts.size_matched_lms:
                per_model["size_matched"] = artifacts.size_matched_lms[cid]
            for variant, model in per_model.items():
                variants.setdefault(variant, []).append(
                    (session_likelihood(model, s), session_loss(model, s)))
        for variant, vals in variants.items():
            rows.append((cid, variant, len(vals),
                         float(np.mean([v[0] for v in vals])),
                         float(np.mean([v[1] for v in vals]))))
    _write_csv(
        os.path.join(workdir, "normality_per_cluster.csv"),
        ["cluster_id", "variant", "sessions", "mean_likelihood", "mean_loss"],
        rows,
    )

    variants = sorted({r[1] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(ordered))
    width = 0.8 / max(len(variants), 1)
    for metric_idx, (ax, label) in enumerate(zip(axes, ("mean likelihood", "mean loss"))):
        for k, variant in enumerate(variants):
            vals = []
            for cid in ordered:
                match = [r for r in rows if r[0] == cid and r[1] == variant]
                vals.append(match[0][3 + metric_idx] if match else np.nan)
            ax.bar(x + (k - (len(variants) - 1) / 2) * width, vals, width, label=variant)
        ax.set_xticks(x)
        ax.set_xticklabels([str(c) for c in ordered])
        ax.set_xlabel("cluster (ascending size)")
        ax.set_ylabel(label)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(workdir, "normality_per_cluster.png"), dpi=120)
    plt.close(fig)
    return rows


def write_eval_reports(workdir: str, artifacts: TrainedArtifacts, *,
                       random_count: int = 1000, seed: int = 0,
                       max_t: int = 300, max_trace_sessions: int = 200) -> dict:
    """Full evaluation bundle: comparison table, online traces, random
    baseline, per-cluster normality; CSVs plus figures."""
    os.makedirs(workdir, exist_ok=True)
    eval_rows = write_cluster_vs_global(workdir, artifacts)
    trace_rows = write_online_traces(workdir, artifacts, max_t=max_t,
                                     max_sessions=max_trace_sessions, seed=seed)
    reports = write_random_vs_real(workdir, artifacts, random_count=random_count, seed=seed)
    normality_rows = write_normality_per_cluster(workdir, artifacts)
    return {
        "cluster_vs_global": eval_rows,
        "online_traces": trace_rows,
        "random_vs_real": reports,
        "normality_per_cluster": normality_rows,
    }
