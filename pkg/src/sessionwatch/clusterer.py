"""Expert-driven session clustering and per-cluster one-class SVM routing.

The expert's topic selection is materialized into a partition of the
corpus; each cluster gets a nu-OC-SVM over normalized bag-of-action
features whose decision value serves as the cluster-membership score.
Online routing votes over the first actions of a session and then freezes,
sidestepping the long-session outlier artifact of one-class scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .corpus import Session, SessionDataset, Vocabulary
from .lda import LdaEnsemble, TopicRef


class EmptyClusterError(ValueError):
    """A selection produced clusters with no member sessions."""

    def __init__(self, cluster_ids: Sequence[int]):
        self.cluster_ids = tuple(cluster_ids)
        super().__init__(
            "selection leaves clusters empty: "
            + ", ".join(str(c) for c in self.cluster_ids)
            + " (revise the topic selection)"
        )


class SolverError(RuntimeError):
    """SMO failed to reach the KKT tolerance within the iteration cap."""


@dataclass(frozen=True)
class ClusterSelection:
    cluster_id: int
    name: str
    topics: tuple[TopicRef, ...]


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    name: str
    topics: tuple[TopicRef, ...]
    session_ids: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.session_ids)


@dataclass(frozen=True)
class ClusterAssignment:
    """A partition of the corpus: disjoint, covering, every cluster nonempty."""

    clusters: tuple[Cluster, ...]
    residual_policy: str = "argmax"

    @property
    def k(self) -> int:
        return len(self.clusters)

    def validate_partition(self, dataset: SessionDataset) -> None:
        seen: set[str] = set()
        for c in self.clusters:
            if not c.session_ids:
                raise EmptyClusterError([c.cluster_id])
            overlap = seen & set(c.session_ids)
            if overlap:
                raise ValueError(f"session {overlap.pop()!r} assigned to multiple clusters")
            seen |= set(c.session_ids)
        all_ids = {s.session_id for s in dataset.sessions}
        if seen != all_ids:
            missing = all_ids - seen
            extra = seen - all_ids
            raise ValueError(
                "assignment does not cover the corpus "
                f"({len(missing)} sessions missing, {len(extra)} unknown)")

    def members(self, dataset: SessionDataset) -> dict[int, SessionDataset]:
        by_id = {s.session_id: i for i, s in enumerate(dataset.sessions)}
        return {
            c.cluster_id: dataset.subset([by_id[sid] for sid in c.session_ids])
            for c in self.clusters
        }


def assign_sessions(ensemble: LdaEnsemble, selections: Sequence[ClusterSelection],
                    dataset: SessionDataset) -> ClusterAssignment:
    """Send each session to the cluster with the highest selected-topic mass.

    The score of cluster c for session s is the sum of theta over c's
    selected topics, averaged over the ensemble runs those topics come
    from.  Ties go to the lowest cluster id.
    """
    if not selections:
        raise ValueError("selections must be nonempty")
    seen_topics: set[TopicRef] = set()
    for sel in selections:
        for ref in sel.topics:
            ensemble.validate_ref(ref)
            if ref in seen_topics:
                raise ValueError(f"topic {tuple(ref)} selected by more than one cluster")
            seen_topics.add(ref)

    m = dataset.m
    ordered = sorted(selections, key=lambda s: s.cluster_id)
    scores = np.zeros((m, len(ordered)))
    for ci, sel in enumerate(ordered):
        by_run: dict[int, list[int]] = {}
        for ref in sel.topics:
            by_run.setdefault(ref.run, []).append(ref.topic)
        if not by_run:
            raise ValueError(f"cluster {sel.cluster_id} selects no topics")
        per_run = [ensemble.runs[r].theta[:, cols].sum(axis=1) for r, cols in by_run.items()]
        scores[:, ci] = np.mean(per_run, axis=0)

    winner = scores.argmax(axis=1)  # argmax takes the first (lowest ci) on ties
    members: dict[int, list[str]] = {sel.cluster_id: [] for sel in ordered}
    for si, ci in enumerate(winner):
        members[ordered[ci].cluster_id].append(dataset.sessions[si].session_id)

    empty = [cid for cid, ids in members.items() if not ids]
    if empty:
        raise EmptyClusterError(sorted(empty))
    assignment = ClusterAssignment(tuple(
        Cluster(sel.cluster_id, sel.name, tuple(sel.topics), tuple(members[sel.cluster_id]))
        for sel in ordered
    ))
    assignment.validate_partition(dataset)
    return assignment


def assignment_from_labels(dataset: SessionDataset, labels: Sequence[int],
                           names: Mapping[int, str] | None = None) -> ClusterAssignment:
    """Build an assignment from per-session integer labels (e.g. a synthetic
    ground-truth sidecar standing in for the expert)."""
    members: dict[int, list[str]] = {}
    for s, lab in zip(dataset.sessions, labels):
        members.setdefault(int(lab), []).append(s.session_id)
    clusters = tuple(
        Cluster(cid, (names or {}).get(cid, f"cluster-{cid}"), (), tuple(ids))
        for cid, ids in sorted(members.items())
    )
    assignment = ClusterAssignment(clusters, residual_policy="ground_truth")
    assignment.validate_partition(dataset)
    return assignment


# ---------------------------------------------------------------------------
# Features


def featurize(session: Session, vocabulary: Vocabulary) -> np.ndarray:
    """Normalized action frequencies; order-free and length-independent."""
    x = np.zeros(vocabulary.size)
    for a in session.actions:
        x[a] += 1.0
    return x / len(session.actions)


def featurize_indices(indices: Sequence[int], d: int) -> np.ndarray:
    x = np.zeros(d)
    for a in indices:
        x[a] += 1.0
    n = len(indices)
    return x / n if n else x


# ---------------------------------------------------------------------------
# nu-OC-SVM with an SMO solver


@dataclass(frozen=True)
class OcSvmModel:
    """Dual solution of the nu-OC-SVM with RBF kernel.

    Decision function f(x) = sum_i alpha_i K(x_i, x) - rho; f >= 0 means
    inlier.  Only vectors with alpha > 0 are stored.
    """

    support_vectors: np.ndarray   # (n_sv, d)
    alphas: np.ndarray            # (n_sv,), each in (0, 1/(nu*l)]
    rho: float
    gamma: float
    nu: float

    def __post_init__(self):
        if abs(self.alphas.sum() - 1.0) > 1e-6:
            raise ValueError("alphas must sum to 1")
        if np.any(self.alphas <= 0):
            raise ValueError("stored alphas must be positive")

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]


def _rbf(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    sq = np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)
    return np.exp(-gamma * sq)


def train_ocsvm(features: Sequence[np.ndarray] | np.ndarray, *, nu: float = 0.05,
                gamma: float | None = None, tol: float = 1e-4,
                max_iter: int | None = None) -> OcSvmModel:
    """Solve the nu-OC-SVM dual by SMO with maximal-violation pair selection.

    Dual: min 1/2 a'Qa  s.t.  0 <= a_i <= 1/(nu*l),  sum a_i = 1, with
    Q the RBF Gram matrix.  Initialization spreads mass over the first
    floor(nu*l)+1 points, the LIBSVM convention.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least 2 training vectors")
    ell, d = X.shape
    if not 0 < nu <= 1:
        raise ValueError("nu must be in (0, 1]")
    if gamma is None:
        gamma = 1.0 / d
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if max_iter is None:
        max_iter = 100_000 * ell

    C = 1.0 / (nu * ell)
    Q = _rbf(X, X, gamma)

    alpha = np.zeros(ell)
    n_full = int(nu * ell)
    alpha[:n_full] = C
    rest = 1.0 - C * n_full
    if rest > 0:
        alpha[n_full] = rest
    G = Q @ alpha

    violation = np.inf
    for _ in range(max_iter):
        can_up = alpha < C - 1e-12
        can_down = alpha > 1e-12
        g_up = np.where(can_up, G, np.inf)
        g_down = np.where(can_down, G, -np.inf)
        i = int(np.argmin(g_up))
        j = int(np.argmax(g_down))
        violation = G[j] - G[i]
        if violation <= tol:
            break
        eta = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        if eta <= 1e-15:
            delta = min(C - alpha[i], alpha[j])
        else:
            delta = min((G[j] - G[i]) / eta, C - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        G += delta * (Q[:, i] - Q[:, j])
    else:
        raise SolverError(
            f"SMO did not converge in {max_iter} iterations (KKT residual {violation:.3e})")

    free = (alpha > 1e-8) & (alpha < C - 1e-8)
    if np.any(free):
        rho = float(G[free].mean())
    else:
        lo = G[alpha < C - 1e-12].min() if np.any(alpha < C - 1e-12) else G.max()
        hi = G[alpha > 1e-12].max()
        rho = float((lo + hi) / 2.0)

    keep = alpha > 1e-10
    alphas = alpha[keep]
    return OcSvmModel(
        support_vectors=X[keep].copy(),
        alphas=alphas / alphas.sum(),  # renormalize away solver round-off
        rho=rho, gamma=gamma, nu=nu,
    )


def score(model: OcSvmModel, features: np.ndarray) -> float:
    """Decision value f(x); >= 0 means the session looks like the cluster."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"feature dimension {x.shape} does not match model dimension {model.dim}")
    k = _rbf(model.support_vectors, x[None, :], model.gamma)[:, 0]
    return float(model.alphas @ k - model.rho)


def score_many(model: OcSvmModel, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    k = _rbf(model.support_vectors, X, model.gamma)
    return model.alphas @ k - model.rho


def route_features(features: np.ndarray, models: Mapping[int, OcSvmModel]) -> tuple[int, dict[int, float]]:
    if not models:
        raise ValueError("need at least one model to route")
    scores = {cid: score(models[cid], features) for cid in sorted(models)}
    # strict > keeps ties at the lowest cluster id
    best = sorted(scores)[0]
    for cid in sorted(scores):
        if scores[cid] > scores[best]:
            best = cid
    return best, scores


def route(session: Session, models: Mapping[int, OcSvmModel],
          vocabulary: Vocabulary) -> tuple[int, dict[int, float]]:
    """Argmax of per-cluster scores; ties go to the lowest cluster id."""
    return route_features(featurize(session, vocabulary), models)


class OnlineVote(NamedTuple):
    voted: int
    instantaneous: int


class OnlineRouter:
    """Per-session routing state: cumulative prefix votes, frozen after the
    vote horizon.

    The vote at step t is the most frequent routing decision over prefixes
    1..t; ties go to the most recently chosen cluster.  For t beyond the
    horizon the voted cluster stays at its horizon value.
    """

    def __init__(self, models: Mapping[int, OcSvmModel], d: int, vote_horizon: int = 15):
        if vote_horizon < 1:
            raise ValueError("vote_horizon must be >= 1")
        self.models = dict(models)
        self.d = d
        self.vote_horizon = vote_horizon
        self._counts = np.zeros(d)
        self._n = 0
        self._t = 0
        self._tally: dict[int, int] = {}
        self._last_seen: dict[int, int] = {}
        self._voted: int | None = None
        self._instant: int | None = None

    def feed(self, action_index: int) -> OnlineVote:
        self._t += 1
        self._counts[action_index] += 1.0
        self._n += 1
        self._instant, _ = route_features(self._counts / self._n, self.models)
        if self._t <= self.vote_horizon:
            self._tally[self._instant] = self._tally.get(self._instant, 0) + 1
            self._last_seen[self._instant] = self._t
            best = max(self._tally, key=lambda c: (self._tally[c], self._last_seen[c]))
            self._voted = best
        assert self._voted is not None
        return OnlineVote(self._voted, self._instant)

    @property
    def voted(self) -> int | None:
        return self._voted

    @property
    def instantaneous(self) -> int | None:
        return self._instant


def online_route(actions: Sequence[int], models: Mapping[int, OcSvmModel], d: int,
                 vote_horizon: int = 15) -> list[OnlineVote]:
    router = OnlineRouter(models, d, vote_horizon)
    return [router.feed(a) for a in actions]


# ---------------------------------------------------------------------------
# Serialization


def ocsvm_to_json(model: OcSvmModel) -> dict:
    return {
        "version": 1,
        "nu": model.nu,
        "gamma": model.gamma,
        "rho": model.rho,
        "support_vectors": model.support_vectors.tolist(),
        "alphas": model.alphas.tolist(),
    }


def ocsvm_from_json(payload: dict) -> OcSvmModel:
    if payload.get("version") != 1:
        raise ValueError(f"unsupported ocsvm version {payload.get('version')!r}")
    return OcSvmModel(
        support_vectors=np.asarray(payload["support_vectors"], dtype=np.float64),
        alphas=np.asarray(payload["alphas"], dtype=np.float64),
        rho=payload["rho"], gamma=payload["gamma"], nu=payload["nu"],
    )


def assignment_to_json(assignment: ClusterAssignment) -> dict:
    return {
        "clusters": [
            {
                "id": c.cluster_id,
                "name": c.name,
                "topics": [{"run": t.run, "topic": t.topic} for t in c.topics],
                "sessions": list(c.session_ids),
            }
            for c in assignment.clusters
        ]
    }


def assignment_from_json(payload: dict) -> ClusterAssignment:
    clusters = tuple(
        Cluster(
            cluster_id=c["id"],
            name=c["name"],
            topics=tuple(TopicRef(t["run"], t["topic"]) for t in c["topics"]),
            session_ids=tuple(c["sessions"]),
        )
        for c in payload["clusters"]
    )
    return ClusterAssignment(clusters)


def save_assignment(assignment: ClusterAssignment, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(assignment_to_json(assignment), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_assignment(path: str) -> ClusterAssignment:
    with open(path, encoding="utf-8") as fh:
        return assignment_from_json(json.load(fh))
