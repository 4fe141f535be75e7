"""Session-log data model: ingestion, statistics, splitting, synthetic
generation and frequent-pattern mining.

A session is an ordered sequence of actions drawn from a fixed vocabulary.
Datasets are immutable after construction and safe to share between
concurrent consumers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class IngestError(ValueError):
    """Raised on malformed input files; message carries the line number."""


@dataclass(frozen=True)
class Vocabulary:
    """Fixed action set with a name<->index bijection.

    Actions are kept in first-appearance order.  A vocabulary of fewer
    than two actions is rejected: a language model over one symbol is
    degenerate.
    """

    actions: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.actions)) != len(self.actions):
            raise ValueError("duplicate action names in vocabulary")
        if len(self.actions) < 2:
            raise ValueError("vocabulary needs at least 2 actions")
        object.__setattr__(self, "_index", {a: i for i, a in enumerate(self.actions)})

    @property
    def size(self) -> int:
        return len(self.actions)

    def index(self, name: str) -> int:
        return self._index[name]

    def name(self, index: int) -> str:
        return self.actions[index]

    def __contains__(self, name: str) -> bool:
        return name in self._index


@dataclass(frozen=True)
class Session:
    """One logged interaction: an ordered tuple of vocabulary indices."""

    session_id: str
    actions: tuple[int, ...]
    user: str | None = None
    started_at: str | None = None

    def __post_init__(self):
        if len(self.actions) < 1:
            raise ValueError(f"empty session {self.session_id!r}")

    @property
    def length(self) -> int:
        return len(self.actions)

    def action_names(self, vocabulary: Vocabulary) -> tuple[str, ...]:
        return tuple(vocabulary.name(i) for i in self.actions)


SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class SessionDataset:
    """A corpus of sessions over one shared vocabulary.

    ``split_labels``, when present, aligns with ``sessions`` and holds one
    of ``train``/``validation``/``test`` per session.
    """

    vocabulary: Vocabulary
    sessions: tuple[Session, ...]
    split_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        d = self.vocabulary.size
        for s in self.sessions:
            bad = [i for i in s.actions if not (0 <= i < d)]
            if bad:
                raise ValueError(f"session {s.session_id!r} has out-of-range action index {bad[0]}")
        if self.split_labels is not None:
            if len(self.split_labels) != len(self.sessions):
                raise ValueError("split_labels length must match session count")
            unknown = set(self.split_labels) - set(SPLIT_NAMES)
            if unknown:
                raise ValueError(f"unknown split label {unknown.pop()!r}")

    @property
    def m(self) -> int:
        return len(self.sessions)

    def subset(self, indices: Sequence[int]) -> "SessionDataset":
        labels = None
        if self.split_labels is not None:
            labels = tuple(self.split_labels[i] for i in indices)
        return SessionDataset(self.vocabulary, tuple(self.sessions[i] for i in indices), labels)

    def split_part(self, label: str) -> "SessionDataset":
        if self.split_labels is None:
            raise ValueError("dataset has no split labels")
        idx = [i for i, lab in enumerate(self.split_labels) if lab == label]
        return SessionDataset(self.vocabulary, tuple(self.sessions[i] for i in idx))

    def by_id(self) -> dict[str, Session]:
        return {s.session_id: s for s in self.sessions}


# ---------------------------------------------------------------------------
# Ingestion / emission


def _session_from_record(rec: dict, names_to_index: dict[str, int], order: list[str], lineno: int) -> Session:
    try:
        sid = rec["session_id"]
        actions = rec["actions"]
    except (KeyError, TypeError):
        raise IngestError(f"line {lineno}: missing session_id or actions") from None
    if not isinstance(actions, list) or not all(isinstance(a, str) for a in actions):
        raise IngestError(f"line {lineno}: actions must be a list of strings")
    if len(actions) == 0:
        raise IngestError(f"empty session at line {lineno}")
    idx = []
    for a in actions:
        if a not in names_to_index:
            names_to_index[a] = len(order)
            order.append(a)
        idx.append(names_to_index[a])
    return Session(
        session_id=str(sid),
        actions=tuple(idx),
        user=rec.get("user"),
        started_at=rec.get("started_at"),
    )


def _ingest_jsonl(path: str) -> tuple[list[Session], list[str]]:
    sessions: list[Session] = []
    names_to_index: dict[str, int] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"line {lineno}: invalid JSON ({e.msg})") from None
            sessions.append(_session_from_record(rec, names_to_index, order, lineno))
    return sessions, order


def _ingest_csv(path: str) -> tuple[list[Session], list[str]]:
    # Rows for one session must be contiguous, ordinal strictly 0..n-1.
    sessions: list[Session] = []
    names_to_index: dict[str, int] = {}
    order: list[str] = []
    seen_ids: set[str] = set()
    current_id: str | None = None
    current: list[int] = []
    meta: dict = {}

    def flush():
        if current_id is not None:
            sessions.append(Session(current_id, tuple(current),
                                    user=meta.get("user"), started_at=meta.get("started_at")))

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"session_id", "action", "ordinal"} <= set(reader.fieldnames):
            raise IngestError("line 1: CSV header must include session_id, action, ordinal")
        lineno = 1
        for row in reader:
            lineno += 1
            sid, action = row.get("session_id"), row.get("action")
            try:
                ordinal = int(row["ordinal"])
            except (KeyError, TypeError, ValueError):
                raise IngestError(f"line {lineno}: bad ordinal {row.get('ordinal')!r}") from None
            if not sid or not action:
                raise IngestError(f"line {lineno}: missing session_id or action")
            if sid != current_id:
                flush()
                if sid in seen_ids:
                    raise IngestError(f"line {lineno}: session {sid!r} rows are not contiguous")
                seen_ids.add(sid)
                current_id, current, meta = sid, [], {k: row[k] for k in ("user", "started_at") if row.get(k)}
            if ordinal != len(current):
                raise IngestError(f"line {lineno}: ordinal {ordinal} out of order (expected {len(current)})")
            if action not in names_to_index:
                names_to_index[action] = len(order)
                order.append(action)
            current.append(names_to_index[action])
        flush()
    return sessions, order


def ingest(path: str, format: str = "jsonl") -> SessionDataset:
    """Read a session log into a dataset.

    The vocabulary is built from the union of observed action names in
    first-appearance order; sessions preserve file order.
    """
    if format == "jsonl":
        sessions, order = _ingest_jsonl(path)
    elif format == "csv":
        sessions, order = _ingest_csv(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    if not sessions:
        raise IngestError("empty file: no sessions found")
    return SessionDataset(Vocabulary(tuple(order)), tuple(sessions))


def session_record(session: Session, vocabulary: Vocabulary) -> dict:
    rec: dict = {"session_id": session.session_id,
                 "actions": list(session.action_names(vocabulary))}
    if session.user is not None:
        rec["user"] = session.user
    if session.started_at is not None:
        rec["started_at"] = session.started_at
    return rec


def emit(dataset: SessionDataset, path: str) -> None:
    """Write a dataset in the JSONL session format (inverse of ingest)."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.sessions:
            fh.write(json.dumps(session_record(s, dataset.vocabulary), sort_keys=True))
            fh.write("\n")


def fingerprint(dataset: SessionDataset) -> str:
    """Hex digest identifying the corpus contents (names, order, sessions)."""
    h = hashlib.sha256()
    h.update(json.dumps(list(dataset.vocabulary.actions)).encode())
    for s in dataset.sessions:
        h.update(json.dumps([s.session_id, list(s.actions)]).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Statistics / filtering / splitting


class FilterResult(NamedTuple):
    dataset: SessionDataset
    removed: int


def filter_short(dataset: SessionDataset) -> FilterResult:
    """Drop sessions with fewer than two actions.

    A length-1 session has no observed and predicted part, so the language
    models cannot use it.
    """
    keep = [i for i, s in enumerate(dataset.sessions) if s.length >= 2]
    return FilterResult(dataset.subset(keep), dataset.m - len(keep))


@dataclass(frozen=True)
class LengthStats:
    lengths: tuple[int, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.lengths))

    @property
    def max(self) -> int:
        return int(max(self.lengths))

    def percentile(self, p: float) -> int:
        """Nearest-rank percentile: the ceil(p/100 * m)-th order statistic."""
        if not 0 < p <= 100:
            raise ValueError("percentile p must be in (0, 100]")
        ordered = sorted(self.lengths)
        k = math.ceil(p / 100.0 * len(ordered))
        return int(ordered[k - 1])


def length_stats(dataset: SessionDataset) -> LengthStats:
    if dataset.m == 0:
        raise ValueError("length_stats of an empty dataset")
    return LengthStats(tuple(s.length for s in dataset.sessions))


def split_counts(m: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor-based split counts; the remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    if len(ratios) != 3:
        raise ValueError("expected three ratios (train, validation, test)")
    floors = [math.floor(r * m) for r in ratios]
    floors[0] += m - sum(floors)
    return tuple(floors)  # type: ignore[return-value]


def split(dataset: SessionDataset, ratios: Sequence[float] = (0.70, 0.15, 0.15),
          seed: int = 0) -> SessionDataset:
    """Label each session train/validation/test; deterministic in the seed."""
    m = dataset.m
    if m < 3:
        raise ValueError("need at least 3 sessions to split")
    n_train, n_val, n_test = split_counts(m, ratios)
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(m)
    labels = [""] * m
    for pos, i in enumerate(perm):
        if pos < n_train:
            labels[i] = "train"
        elif pos < n_train + n_val:
            labels[i] = "validation"
        else:
            labels[i] = "test"
    return SessionDataset(dataset.vocabulary, dataset.sessions, tuple(labels))


# ---------------------------------------------------------------------------
# Synthetic personas


@dataclass(frozen=True)
class Persona:
    """A first-order Markov behavior over a subset of the action set."""

    persona_id: int
    actions: tuple[str, ...]
    transition: np.ndarray          # row-stochastic, len(actions) square
    initial: np.ndarray             # distribution over actions
    session_count: int
    mean_length: float = 15.0
    long_fraction: float = 0.0      # share of sessions drawn from the long tail
    long_mean_length: float = 160.0
    fixed_length: int | None = None

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=float)
        if t.shape != (len(self.actions), len(self.actions)):
            raise ValueError("transition matrix shape must match persona action count")
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError(f"persona {self.persona_id}: transition matrix is not row-stochastic")
        init = np.asarray(self.initial, dtype=float)
        if init.shape != (len(self.actions),) or np.any(init < 0) or abs(init.sum() - 1.0) > 1e-9:
            raise ValueError(f"persona {self.persona_id}: initial distribution invalid")


@dataclass(frozen=True)
class SyntheticConfig:
    personas: tuple[Persona, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.personas:
            raise ValueError("need at least one persona")

    @property
    def session_count(self) -> int:
        return sum(p.session_count for p in self.personas)

    def vocabulary(self) -> Vocabulary:
        order: list[str] = []
        seen = set()
        for p in self.personas:
            for a in p.actions:
                if a not in seen:
                    seen.add(a)
                    order.append(a)
        return Vocabulary(tuple(order))


class SyntheticCorpus(NamedTuple):
    dataset: SessionDataset
    persona_labels: tuple[int, ...]   # ground truth, aligned with sessions

    def sidecar_records(self) -> list[dict]:
        return [{"session_id": s.session_id, "persona": p}
                for s, p in zip(self.dataset.sessions, self.persona_labels)]


def _draw_length(persona: Persona, rng: np.random.Generator) -> int:
    if persona.fixed_length is not None:
        return persona.fixed_length
    mean = persona.mean_length
    if persona.long_fraction > 0 and rng.random() < persona.long_fraction:
        mean = persona.long_mean_length
    return int(rng.geometric(1.0 / mean))


def generate_synthetic(config: SyntheticConfig) -> SyntheticCorpus:
    """Markov-chain walks per persona; bit-reproducible for a fixed seed.

    Persona labels are returned separately so training code never sees
    them; they exist only for evaluation.
    """
    vocab = config.vocabulary()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    sessions: list[Session] = []
    labels: list[int] = []
    for persona in config.personas:
        glob = np.array([vocab.index(a) for a in persona.actions])
        cum = np.cumsum(np.asarray(persona.transition, dtype=float), axis=1)
        cum_init = np.cumsum(np.asarray(persona.initial, dtype=float))
        for j in range(persona.session_count):
            n = _draw_length(persona, rng)
            walk = np.empty(n, dtype=np.int64)
            cur = int(np.searchsorted(cum_init, rng.random(), side="right"))
            cur = min(cur, len(glob) - 1)
            walk[0] = cur
            for t in range(1, n):
                cur = int(np.searchsorted(cum[cur], rng.random(), side="right"))
                cur = min(cur, len(glob) - 1)
                walk[t] = cur
            sessions.append(Session(
                session_id=f"synth-p{persona.persona_id:02d}-{j:05d}",
                actions=tuple(int(i) for i in glob[walk]),
                user=f"user-{persona.persona_id:02d}-{int(rng.integers(0, max(2, persona.session_count // 10))):04d}",
            ))
            labels.append(persona.persona_id)
    return SyntheticCorpus(SessionDataset(vocab, tuple(sessions)), tuple(labels))


def make_personas(persona_count: int, vocabulary_size: int, session_counts: Sequence[int],
                  *, overlap: float = 0.2, mean_length: float = 15.0,
                  long_fraction: float = 0.0, long_mean_length: float = 160.0,
                  concentration: float = 0.3, seed: int = 0) -> SyntheticConfig:
    """Build a persona config with partially overlapping action subsets.

    A shared pool of ``round(overlap * vocabulary_size)`` actions is visible
    to every persona; the rest is split into private cores, so persona
    vocabularies union to the full action set.  Transition rows are
    Dirichlet(concentration) draws, giving sparse, learnable dynamics.
    """
    if len(session_counts) != persona_count:
        raise ValueError("session_counts must have persona_count entries")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    names = [f"action_{i:03d}" for i in range(vocabulary_size)]
    n_shared = int(round(overlap * vocabulary_size))
    shared = names[:n_shared]
    private = names[n_shared:]
    chunks = np.array_split(np.arange(len(private)), persona_count)
    personas = []
    for pid in range(persona_count):
        acts = tuple(private[i] for i in chunks[pid]) + tuple(shared)
        k = len(acts)
        if k < 2:
            raise ValueError("persona action subset too small; increase vocabulary_size")
        transition = rng.dirichlet(np.full(k, concentration), size=k)
        initial = rng.dirichlet(np.full(k, 1.0))
        personas.append(Persona(
            persona_id=pid, actions=acts, transition=transition, initial=initial,
            session_count=int(session_counts[pid]), mean_length=mean_length,
            long_fraction=long_fraction, long_mean_length=long_mean_length,
        ))
    return SyntheticConfig(personas=tuple(personas), seed=seed)


def default_config(seed: int = 0) -> SyntheticConfig:
    """Full-scale default corpus: 13 personas, ~15k sessions, 300 actions.

    Persona sizes grow geometrically from 177 to ~3500 sessions.  Session
    lengths mix a short geometric with a rare long tail so the corpus
    matches the target envelope (mean ~15, p98 ~91, max > 800).
    """
    sizes = [int(round(177 * (3500 / 177) ** (i / 12))) for i in range(13)]
    return make_personas(
        13, 300, sizes, overlap=0.2, mean_length=9.75,
        long_fraction=0.035, long_mean_length=160.0, seed=seed,
    )


# ---------------------------------------------------------------------------
# Frequent action-set mining


def mine_frequent_actionsets(dataset: SessionDataset, min_support: float,
                             *, closed_only: bool = False) -> list[tuple[tuple[str, ...], float]]:
    """Apriori over the set-of-actions view of each session.

    Returns (action names, support) sorted by support descending, ties by
    lexicographic names.  ``closed_only`` drops itemsets that have a
    superset with equal support.
    """
    if not 0 < min_support <= 1:
        raise ValueError("min_support must be in (0, 1]")
    baskets = [frozenset(s.actions) for s in dataset.sessions]
    m = len(baskets)
    if m == 0:
        return []
    min_count = min_support * m

    counts: dict[frozenset, int] = {}
    for b in baskets:
        for a in b:
            key = frozenset((a,))
            counts[key] = counts.get(key, 0) + 1
    frequent: dict[frozenset, int] = {k: c for k, c in counts.items() if c >= min_count}
    all_frequent = dict(frequent)
    while frequent:
        # Join step: union pairs differing by one item, prune by subsets.
        prev = sorted(frequent, key=lambda s: sorted(s))
        size = len(next(iter(frequent))) + 1
        candidates = set()
        for i, j in combinations(range(len(prev)), 2):
            union = prev[i] | prev[j]
            if len(union) == size and all(frozenset(c) in frequent
                                          for c in combinations(union, size - 1)):
                candidates.add(union)
        frequent = {}
        for cand in candidates:
            c = sum(1 for b in baskets if cand <= b)
            if c >= min_count:
                frequent[cand] = c
        all_frequent.update(frequent)

    if closed_only:
        all_frequent = {
            s: c for s, c in all_frequent.items()
            if not any(len(t) == len(s) + 1 and s < t and ct == c
                       for t, ct in all_frequent.items())
        }

    vocab = dataset.vocabulary
    named = [(tuple(sorted(vocab.name(i) for i in s)), c / m) for s, c in all_frequent.items()]
    named.sort(key=lambda item: (-item[1], item[0]))
    return named
