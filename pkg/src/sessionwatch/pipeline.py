"""Training orchestration and artifact persistence.

Trains the per-cluster OC-SVMs and language models plus the two global
baselines (one model on all training data, one size-matched random-subset
model per cluster), and persists everything to a working directory so the
service and CLI can reload it.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import scoring
from .clusterer import (
    ClusterAssignment,
    OcSvmModel,
    featurize,
    load_assignment,
    ocsvm_from_json,
    ocsvm_to_json,
    save_assignment,
    train_ocsvm,
)
from .corpus import SessionDataset, fingerprint, make_personas, split
from .lm import LstmModel, TrainingWindow, encode_windows, load_lstm, save_lstm, train
from .serialize import dump_json, read_json


@dataclass(frozen=True)
class LmConfig:
    hidden: int = 256
    dropout: float = 0.4
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    patience: int = 5
    clip_norm: float = 5.0


@dataclass(frozen=True)
class OcsvmConfig:
    nu: float = 0.05
    # Frequency features live on a small-diameter simplex; gamma near 1
    # gives the RBF kernel usable contrast there (1/d is nearly flat).
    gamma: float = 1.0
    tol: float = 1e-4


@dataclass
class TrainedArtifacts:
    dataset: SessionDataset
    assignment: ClusterAssignment
    cluster_splits: dict[int, SessionDataset]
    cluster_lms: dict[int, LstmModel]
    cluster_ocsvms: dict[int, OcSvmModel]
    size_matched_lms: dict[int, LstmModel]
    global_lm: LstmModel | None
    reference_likelihood: dict[int, float]
    lm_config: LmConfig
    ocsvm_config: OcsvmConfig
    seed: int
    loss_curves: dict[str, list[tuple[int, float, float | None]]] = field(default_factory=dict)

    def cluster_sizes(self) -> dict[int, int]:
        return {c.cluster_id: c.size for c in self.assignment.clusters}

    def cluster_names(self) -> dict[int, str]:
        return {c.cluster_id: c.name for c in self.assignment.clusters}

    def test_windows(self) -> dict[int, list[TrainingWindow]]:
        return {cid: _windows_of(ds.split_part("test")) for cid, ds in self.cluster_splits.items()}


def _windows_of(dataset: SessionDataset) -> list[TrainingWindow]:
    out: list[TrainingWindow] = []
    for s in dataset.sessions:
        if s.length >= 2:
            out.extend(encode_windows(s))
    return out


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)).generate_state(1)[0])


def _train_lm(dataset: SessionDataset, d: int, cfg: LmConfig, seed: int):
    train_w = _windows_of(dataset.split_part("train"))
    val_w = _windows_of(dataset.split_part("validation"))
    if not train_w:
        raise ValueError("no usable training windows (all sessions shorter than 2 actions?)")
    model = LstmModel.initialize(d, hidden=cfg.hidden, dropout_rate=cfg.dropout, seed=seed)
    result = train(
        model, train_w, val_windows=val_w or None, epochs=cfg.epochs,
        batch_size=cfg.batch_size, lr=cfg.lr, seed=seed,
        patience=cfg.patience, clip_norm=cfg.clip_norm,
    )
    return model, result


def train_all(dataset: SessionDataset, assignment: ClusterAssignment, *,
              lm_config: LmConfig = LmConfig(), ocsvm_config: OcsvmConfig = OcsvmConfig(),
              seed: int = 0, with_baselines: bool = True,
              ratios=(0.70, 0.15, 0.15),
              progress: Callable[[float, str], None] | None = None) -> TrainedArtifacts:
    """Train every per-cluster artifact (and baselines) from one corpus.

    Each cluster's sessions are split 70/15/15 with a seed derived from
    (seed, cluster id); the global model trains on the union of the
    cluster training parts.
    """
    assignment.validate_partition(dataset)
    vocab = dataset.vocabulary
    members = assignment.members(dataset)
    k = assignment.k
    n_stages = 2 * k + (1 + k if with_baselines else 0)
    done = 0

    def tick(msg: str):
        nonlocal done
        done += 1
        if progress:
            progress(done / n_stages, msg)

    cluster_splits: dict[int, SessionDataset] = {}
    cluster_lms: dict[int, LstmModel] = {}
    cluster_ocsvms: dict[int, OcSvmModel] = {}
    reference: dict[int, float] = {}
    curves: dict[str, list] = {}

    for cid, part in sorted(members.items()):
        cluster_splits[cid] = split(part, ratios, seed=_derived_seed(seed, 1, cid))

    for cid, labelled in sorted(cluster_splits.items()):
        feats = np.array([
            featurize(s, vocab) for s in labelled.split_part("train").sessions
        ])
        cluster_ocsvms[cid] = train_ocsvm(
            feats, nu=ocsvm_config.nu, gamma=ocsvm_config.gamma, tol=ocsvm_config.tol)
        tick(f"ocsvm cluster {cid}")

    for cid, labelled in sorted(cluster_splits.items()):
        model, result = _train_lm(labelled, vocab.size, lm_config, _derived_seed(seed, 2, cid))
        cluster_lms[cid] = model
        curves[f"cluster_{cid}"] = result.curve_rows()
        val_sessions = [s for s in labelled.split_part("validation").sessions if s.length >= 2]
        pool = val_sessions or [s for s in labelled.split_part("train").sessions if s.length >= 2]
        reference[cid] = float(np.mean([scoring.session_likelihood(model, s) for s in pool]))
        tick(f"lstm cluster {cid}")

    size_matched: dict[int, LstmModel] = {}
    global_lm = None
    if with_baselines:
        union_sessions = []
        union_labels = []
        for labelled in cluster_splits.values():
            union_sessions.extend(labelled.sessions)
            union_labels.extend(labelled.split_labels)
        union = SessionDataset(vocab, tuple(union_sessions), tuple(union_labels))
        global_lm, result = _train_lm(union, vocab.size, lm_config, _derived_seed(seed, 3))
        curves["global"] = result.curve_rows()
        tick("lstm global")

        all_ids = np.arange(dataset.m)
        for cid, part in sorted(members.items()):
            rng = np.random.Generator(np.random.PCG64(_derived_seed(seed, 4, cid)))
            chosen = rng.choice(all_ids, size=part.m, replace=False)
            subset = dataset.subset(sorted(int(i) for i in chosen))
            labelled = split(subset, ratios, seed=_derived_seed(seed, 5, cid))
            model, result = _train_lm(labelled, vocab.size, lm_config, _derived_seed(seed, 6, cid))
            size_matched[cid] = model
            curves[f"size_matched_{cid}"] = result.curve_rows()
            tick(f"lstm size-matched {cid}")

    return TrainedArtifacts(
        dataset=dataset, assignment=assignment, cluster_splits=cluster_splits,
        cluster_lms=cluster_lms, cluster_ocsvms=cluster_ocsvms,
        size_matched_lms=size_matched, global_lm=global_lm,
        reference_likelihood=reference, lm_config=lm_config,
        ocsvm_config=ocsvm_config, seed=seed, loss_curves=curves,
    )


def evaluate_artifacts(artifacts: TrainedArtifacts) -> list[scoring.EvalRow]:
    return scoring.evaluate_cluster_vs_global(
        artifacts.cluster_lms, artifacts.test_windows(), artifacts.global_lm,
        artifacts.size_matched_lms, artifacts.cluster_sizes(), artifacts.cluster_names(),
    )


# ---------------------------------------------------------------------------
# Persistence


def save_artifacts(workdir: str, artifacts: TrainedArtifacts) -> None:
    models_dir = os.path.join(workdir, "models")
    os.makedirs(models_dir, exist_ok=True)
    save_assignment(artifacts.assignment, os.path.join(workdir, "assignment.json"))
    for cid, model in artifacts.cluster_ocsvms.items():
        dump_json(os.path.join(models_dir, f"ocsvm_{cid}.json"), ocsvm_to_json(model))
    for cid, model in artifacts.cluster_lms.items():
        save_lstm(model, os.path.join(models_dir, f"lstm_cluster_{cid}.npz"))
    for cid, model in artifacts.size_matched_lms.items():
        save_lstm(model, os.path.join(models_dir, f"lstm_sizematched_{cid}.npz"))
    if artifacts.global_lm is not None:
        save_lstm(artifacts.global_lm, os.path.join(models_dir, "lstm_global.npz"))

    splits_payload = {
        "version": 1,
        "seed": artifacts.seed,
        "clusters": {
            str(cid): {
                label: [s.session_id for s, lab in zip(ds.sessions, ds.split_labels) if lab == label]
                for label in ("train", "validation", "test")
            }
            for cid, ds in artifacts.cluster_splits.items()
        },
    }
    dump_json(os.path.join(workdir, "splits.json"), splits_payload)
    dump_json(os.path.join(workdir, "train_meta.json"), {
        "version": 1,
        "seed": artifacts.seed,
        "lm_config": asdict(artifacts.lm_config),
        "ocsvm_config": asdict(artifacts.ocsvm_config),
        "reference_likelihood": {str(c): v for c, v in artifacts.reference_likelihood.items()},
        "corpus_fingerprint": fingerprint(artifacts.dataset),
    })
    with open(os.path.join(workdir, "loss_curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "epoch", "train_loss", "val_loss"])
        for name in sorted(artifacts.loss_curves):
            for epoch, train_loss, val_loss in artifacts.loss_curves[name]:
                writer.writerow([name, epoch, repr(train_loss),
                                 "" if val_loss is None else repr(val_loss)])


def load_artifacts(workdir: str, dataset: SessionDataset) -> TrainedArtifacts:
    models_dir = os.path.join(workdir, "models")
    meta = read_json(os.path.join(workdir, "train_meta.json"))
    if meta.get("version") != 1:
        raise ValueError("unsupported train_meta version")
    if meta.get("corpus_fingerprint") != fingerprint(dataset):
        raise ValueError("artifacts were trained on a different corpus")
    assignment = load_assignment(os.path.join(workdir, "assignment.json"))
    assignment.validate_partition(dataset)
    splits_payload = read_json(os.path.join(workdir, "splits.json"))

    by_id = {s.session_id: i for i, s in enumerate(dataset.sessions)}
    cluster_splits: dict[int, SessionDataset] = {}
    for cid_str, parts in splits_payload["clusters"].items():
        ids, labels = [], []
        for label in ("train", "validation", "test"):
            for sid in parts[label]:
                ids.append(by_id[sid])
                labels.append(label)
        order = np.argsort(ids)
        cluster_splits[int(cid_str)] = SessionDataset(
            dataset.vocabulary,
            tuple(dataset.sessions[ids[i]] for i in order),
            tuple(labels[i] for i in order),
        )

    cluster_lms = {}
    cluster_ocsvms = {}
    size_matched = {}
    for c in assignment.clusters:
        cid = c.cluster_id
        cluster_ocsvms[cid] = ocsvm_from_json(read_json(os.path.join(models_dir, f"ocsvm_{cid}.json")))
        cluster_lms[cid] = load_lstm(os.path.join(models_dir, f"lstm_cluster_{cid}.npz"))
        sm_path = os.path.join(models_dir, f"lstm_sizematched_{cid}.npz")
        if os.path.exists(sm_path):
            size_matched[cid] = load_lstm(sm_path)
    global_path = os.path.join(models_dir, "lstm_global.npz")
    global_lm = load_lstm(global_path) if os.path.exists(global_path) else None

    return TrainedArtifacts(
        dataset=dataset, assignment=assignment, cluster_splits=cluster_splits,
        cluster_lms=cluster_lms, cluster_ocsvms=cluster_ocsvms,
        size_matched_lms=size_matched, global_lm=global_lm,
        reference_likelihood={int(c): v for c, v in meta["reference_likelihood"].items()},
        lm_config=LmConfig(**meta["lm_config"]), ocsvm_config=OcsvmConfig(**meta["ocsvm_config"]),
        seed=meta["seed"],
    )


# ---------------------------------------------------------------------------
# Benchmarks


def planted4_config(seed: int = 0):
    """Four personas with 20% vocabulary overlap and sizes spanning a
    production-like smallest-to-largest cluster range.  Transitions are fairly
    deterministic (low Dirichlet concentration), matching the semantically
    coherent behavior groups the expert clustering is meant to isolate."""
    return make_personas(
        4, 60, [150, 400, 1200, 3000], overlap=0.2, mean_length=15.0,
        long_fraction=0.015, long_mean_length=120.0, concentration=0.12, seed=seed,
    )


def planted2_config(seed: int = 0):
    """Two personas on disjoint vocabularies; the LDA recovery benchmark."""
    return make_personas(2, 16, [250, 250], overlap=0.0, mean_length=10.0, seed=seed)


BENCHMARKS = {
    "planted4": planted4_config,
    "planted2": planted2_config,
}
