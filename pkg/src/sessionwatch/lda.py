"""Ensemble of LDA topic models over sessions-as-documents.

Each session is treated as a document whose words are actions.  Inference
is collapsed Gibbs sampling; phi (topic-action) and theta (document-topic)
are posterior-mean estimates with Dirichlet smoothing.  Topic geometry
(shared actions, medoid, 2-D projection) backs the expert interface.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import SessionDataset, fingerprint
from .tsne import tsne


class TopicRef(NamedTuple):
    run: int
    topic: int


@dataclass(frozen=True)
class TopicModel:
    """One LDA run: phi is K x d, theta is m x K, rows are distributions."""

    K: int
    phi: np.ndarray
    theta: np.ndarray
    alpha: float
    beta: float
    seed: int
    iterations: int

    def __post_init__(self):
        for name, mat in (("phi", self.phi), ("theta", self.theta)):
            if np.any(mat <= 0):
                raise ValueError(f"{name} must be strictly positive (smoothed)")
            if np.any(np.abs(mat.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"{name} rows must sum to 1")
        if self.phi.shape[0] != self.K or self.theta.shape[1] != self.K:
            raise ValueError("phi/theta shapes inconsistent with K")


@dataclass(frozen=True)
class LdaEnsemble:
    runs: tuple[TopicModel, ...]
    corpus_fingerprint: str

    @property
    def total_topics(self) -> int:
        return sum(r.K for r in self.runs)

    def topic_refs(self) -> list[TopicRef]:
        return [TopicRef(r, t) for r, run in enumerate(self.runs) for t in range(run.K)]

    def phi_row(self, ref) -> np.ndarray:
        ref = TopicRef(*ref)
        self.validate_ref(ref)
        return self.runs[ref.run].phi[ref.topic]

    def validate_ref(self, ref) -> None:
        ref = TopicRef(*ref)
        if not (0 <= ref.run < len(self.runs)) or not (0 <= ref.topic < self.runs[ref.run].K):
            raise ValueError(f"invalid topic reference {tuple(ref)}")


def fit_lda(dataset: SessionDataset, K: int, *, alpha: float | None = None,
            beta: float = 0.01, iterations: int = 1000, seed: int = 0,
            conservation_check: bool = False) -> TopicModel:
    """Collapsed Gibbs sampling, deterministic for a fixed seed.

    alpha defaults to 50/K.  With ``conservation_check`` the sampler
    asserts after every sweep that topic-action and document-topic counts
    both still sum to the corpus token total.
    """
    if dataset.m == 0:
        raise ValueError("cannot fit LDA on an empty dataset")
    if K < 1 or iterations < 1:
        raise ValueError("K and iterations must be >= 1")
    if alpha is None:
        alpha = 50.0 / K
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")

    d = dataset.vocabulary.size
    docs = [np.asarray(s.actions, dtype=np.int64) for s in dataset.sessions]
    m = len(docs)
    total_tokens = sum(len(doc) for doc in docs)

    rng = np.random.Generator(np.random.PCG64(seed))
    n_dk = np.zeros((m, K), dtype=np.int64)
    n_kw = np.zeros((K, d), dtype=np.int64)
    n_k = np.zeros(K, dtype=np.int64)
    assignments = []
    for di, doc in enumerate(docs):
        z = rng.integers(0, K, size=len(doc))
        assignments.append(z)
        np.add.at(n_dk[di], z, 1)
        np.add.at(n_kw, (z, doc), 1)
        np.add.at(n_k, z, 1)

    dbeta = d * beta
    for _ in range(iterations):
        for di, doc in enumerate(docs):
            z = assignments[di]
            row = n_dk[di]
            for pos in range(len(doc)):
                w = doc[pos]
                k_old = z[pos]
                row[k_old] -= 1
                n_kw[k_old, w] -= 1
                n_k[k_old] -= 1
                p = (row + alpha) * (n_kw[:, w] + beta) / (n_k + dbeta)
                cum = np.cumsum(p)
                k_new = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
                if k_new == K:  # guard against float round-up at the edge
                    k_new = K - 1
                z[pos] = k_new
                row[k_new] += 1
                n_kw[k_new, w] += 1
                n_k[k_new] += 1
        if conservation_check:
            assert n_dk.sum() == total_tokens and n_kw.sum() == total_tokens, \
                "Gibbs count conservation violated"

    phi = (n_kw + beta) / (n_k[:, None] + dbeta)
    doc_lengths = np.array([len(doc) for doc in docs], dtype=np.float64)
    theta = (n_dk + alpha) / (doc_lengths[:, None] + K * alpha)
    return TopicModel(K=K, phi=phi, theta=theta, alpha=alpha, beta=beta,
                      seed=seed, iterations=iterations)


def _fit_one(args):
    dataset, K, alpha, beta, iterations, seed = args
    return fit_lda(dataset, K, alpha=alpha, beta=beta, iterations=iterations, seed=seed)


def fit_ensemble(dataset: SessionDataset, K_list: Sequence[int], *, seeds_per_K: int = 2,
                 alpha: float | None = None, beta: float = 0.01, iterations: int = 1000,
                 base_seed: int = 0, n_workers: int = 1) -> LdaEnsemble:
    """Fit one run per (K, seed) pair; run seeds are base_seed + run index."""
    if not K_list:
        raise ValueError("K_list must be nonempty")
    jobs = []
    idx = 0
    for K in K_list:
        for _ in range(seeds_per_K):
            jobs.append((dataset, K, alpha, beta, iterations, base_seed + idx))
            idx += 1
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            runs = list(pool.map(_fit_one, jobs))
    else:
        runs = [_fit_one(j) for j in jobs]
    return LdaEnsemble(runs=tuple(runs), corpus_fingerprint=fingerprint(dataset))


# ---------------------------------------------------------------------------
# Topic geometry


def topic_fan_size(ref: TopicRef, ensemble: LdaEnsemble, threshold: float = 0.01) -> int:
    """Number of actions belonging to the topic (phi >= threshold)."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    return int(np.count_nonzero(ensemble.phi_row(ref) >= threshold))


def shared_action_count(t1: TopicRef, t2: TopicRef, ensemble: LdaEnsemble,
                        threshold: float = 0.01) -> int:
    """Count actions whose probability meets the threshold in both topics."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    a = ensemble.phi_row(t1) >= threshold
    b = ensemble.phi_row(t2) >= threshold
    return int(np.count_nonzero(a & b))


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; symmetric and bounded by ln 2."""
    mid = 0.5 * (p + q)
    kl_p = float(np.sum(p * (np.log(p) - np.log(mid))))
    kl_q = float(np.sum(q * (np.log(q) - np.log(mid))))
    return 0.5 * kl_p + 0.5 * kl_q


def medoid_topic(selection: Sequence[TopicRef], ensemble: LdaEnsemble) -> TopicRef:
    """Member minimizing summed JS divergence to the rest; ties take the
    lowest (run, topic)."""
    if not selection:
        raise ValueError("selection must be nonempty")
    refs = [TopicRef(*r) for r in selection]
    rows = [ensemble.phi_row(r) for r in refs]
    n = len(refs)
    totals = np.zeros(n)
    for i in range(n):
        for j in range(i + 1, n):
            dist = js_divergence(rows[i], rows[j])
            totals[i] += dist
            totals[j] += dist
    best = min(range(n), key=lambda i: (totals[i], refs[i]))
    return refs[best]


def project_topics(ensemble: LdaEnsemble, *, perplexity: float = 10.0,
                   iterations: int = 1000, seed: int = 0) -> list[tuple[TopicRef, float, float]]:
    """Exact t-SNE of all topics using JS divergence as squared distance.

    Coordinates are normalized per axis to [-1, 1]; deterministic for a
    fixed seed.
    """
    refs = ensemble.topic_refs()
    n = len(refs)
    if n < 3:
        raise ValueError("need at least 3 topics to project")
    if perplexity >= n:
        raise ValueError(f"perplexity {perplexity} must be below the topic count {n}")
    rows = np.stack([ensemble.phi_row(r) for r in refs])
    sq = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sq[i, j] = sq[j, i] = js_divergence(rows[i], rows[j])
    coords = tsne(sq, perplexity=perplexity, iterations=iterations, seed=seed)
    return [(ref, float(x), float(y)) for ref, (x, y) in zip(refs, coords)]


# ---------------------------------------------------------------------------
# Serialization


def ensemble_to_json(ensemble: LdaEnsemble) -> dict:
    return {
        "version": 1,
        "runs": [
            {
                "K": run.K,
                "seed": run.seed,
                "alpha": run.alpha,
                "beta": run.beta,
                "iterations": run.iterations,
                "phi": run.phi.tolist(),
                "theta": run.theta.tolist(),
            }
            for run in ensemble.runs
        ],
        "corpus_fingerprint": ensemble.corpus_fingerprint,
    }


def ensemble_from_json(payload: dict) -> LdaEnsemble:
    if payload.get("version") != 1:
        raise ValueError(f"unsupported ensemble version {payload.get('version')!r}")
    runs = tuple(
        TopicModel(
            K=r["K"],
            phi=np.asarray(r["phi"], dtype=np.float64),
            theta=np.asarray(r["theta"], dtype=np.float64),
            alpha=r["alpha"],
            beta=r["beta"],
            seed=r["seed"],
            iterations=r.get("iterations", 0),
        )
        for r in payload["runs"]
    )
    return LdaEnsemble(runs=runs, corpus_fingerprint=payload["corpus_fingerprint"])


def save_ensemble(ensemble: LdaEnsemble, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_to_json(ensemble), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_ensemble(path: str) -> LdaEnsemble:
    with open(path, encoding="utf-8") as fh:
        return ensemble_from_json(json.load(fh))
