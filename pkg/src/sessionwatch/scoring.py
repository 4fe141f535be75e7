"""Normality metrics, online monitoring with alarms, the random-session
baseline, and the cluster-vs-global evaluation harness.

A session's normality is the average predicted probability of its
realized actions under its cluster's language model (equivalently the
average cross-entropy loss, or its exponential, the perplexity).  The
first action of a session has no observed prefix in the windowed encoding
and is excluded from all averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clusterer import OcSvmModel, OnlineRouter
from .corpus import Session, SessionDataset, Vocabulary
from .lm import LstmModel, TrainingWindow, batch_probs, encode_windows, forward


def _window_probs(model: LstmModel, session: Session) -> np.ndarray:
    windows = encode_windows(session)
    probs = batch_probs(model, windows)
    targets = np.array([w.target for w in windows])
    return probs[np.arange(len(windows)), targets]


def session_likelihood(model: LstmModel, session: Session) -> float:
    """Mean probability of each observed action given its prefix."""
    return float(np.mean(_window_probs(model, session)))


def session_loss(model: LstmModel, session: Session) -> float:
    """Mean cross-entropy of each observed action given its prefix."""
    return float(np.mean(-np.log(_window_probs(model, session))))


def perplexity(model: LstmModel, session: Session) -> float:
    return float(np.exp(session_loss(model, session)))


def windows_accuracy_and_loss(model: LstmModel, windows: Sequence[TrainingWindow]) -> tuple[float, float]:
    probs = batch_probs(model, windows)
    targets = np.array([w.target for w in windows])
    acc = float(np.mean(probs.argmax(axis=1) == targets))
    ce = float(np.mean(-np.log(probs[np.arange(len(windows)), targets])))
    return acc, ce


def generate_random_sessions(count: int, vocabulary: Vocabulary,
                             length_range: tuple[int, int] = (5, 25),
                             seed: int = 0) -> SessionDataset:
    """Uniform-length, uniform-action sessions: the abnormality baseline."""
    lo, hi = length_range
    if lo < 2:
        raise ValueError("length_range must start at 2 or above")
    rng = np.random.Generator(np.random.PCG64(seed))
    d = vocabulary.size
    sessions = []
    for i in range(count):
        n = int(rng.integers(lo, hi + 1))
        sessions.append(Session(f"random-{i:05d}", tuple(int(a) for a in rng.integers(0, d, n))))
    return SessionDataset(vocabulary, tuple(sessions))


# ---------------------------------------------------------------------------
# Online monitoring


@dataclass(frozen=True)
class MonitorConfig:
    """Alarm rule: running mean of the last ``alarm_patience`` scored
    probabilities below the threshold raises an event.

    The threshold is either absolute (``alarm_threshold``) or derived as
    ``threshold_factor`` times the monitored cluster's validation mean
    likelihood.  With neither given, only out-of-vocabulary alarms fire.
    """

    vote_horizon: int = 15
    alarm_patience: int = 5
    alarm_threshold: float | None = None
    reference_likelihood: Mapping[int, float] | None = None
    threshold_factor: float = 0.1

    def threshold_for(self, cluster_id: int | None) -> float | None:
        if self.alarm_threshold is not None:
            return self.alarm_threshold
        if self.reference_likelihood is not None and cluster_id in self.reference_likelihood:
            return self.threshold_factor * self.reference_likelihood[cluster_id]
        return None


@dataclass(frozen=True)
class ActionRecord:
    t: int
    action: str
    oov: bool
    instantaneous_cluster: int | None
    voted_cluster: int | None
    likelihood: float | None
    loss: float | None
    running_mean_likelihood: float | None
    running_mean_loss: float | None

    def to_json(self) -> dict:
        return {
            "t": self.t, "action": self.action, "oov": self.oov,
            "instantaneous_cluster": self.instantaneous_cluster,
            "voted_cluster": self.voted_cluster,
            "likelihood": self.likelihood, "loss": self.loss,
            "running_mean_likelihood": self.running_mean_likelihood,
            "running_mean_loss": self.running_mean_loss,
        }


@dataclass(frozen=True)
class AlarmEvent:
    t: int
    reason: str

    def to_json(self) -> dict:
        return {"t": self.t, "reason": self.reason}


@dataclass
class ScoreTrace:
    session_id: str
    records: list[ActionRecord] = field(default_factory=list)
    alarms: list[AlarmEvent] = field(default_factory=list)

    @property
    def scored(self) -> list[ActionRecord]:
        return [r for r in self.records if not r.oov]

    def mean_likelihood(self) -> float | None:
        vals = [r.likelihood for r in self.scored]
        return float(np.mean(vals)) if vals else None

    def mean_loss(self) -> float | None:
        vals = [r.loss for r in self.scored]
        return float(np.mean(vals)) if vals else None


class SessionMonitor:
    """Online scorer for one session; one instance per monitored session.

    Per incoming action: the routing vote is updated first (the vote uses
    the prefix including the new action), then the action is scored under
    the voted cluster's model given the prefix before it.  Unknown action
    names raise an alarm, are skipped in averages, and are left out of the
    model context.
    """

    def __init__(self, cluster_lms: Mapping[int, LstmModel],
                 ocsvms: Mapping[int, OcSvmModel], vocabulary: Vocabulary,
                 config: MonitorConfig = MonitorConfig()):
        if set(cluster_lms) != set(ocsvms):
            raise ValueError("cluster model and router cluster ids differ")
        self.lms = dict(cluster_lms)
        self.vocabulary = vocabulary
        self.config = config
        self._router = OnlineRouter(ocsvms, vocabulary.size, config.vote_horizon)
        self._context: list[int] = []
        self._t = 0
        self._p: list[float] = []
        self._losses: list[float] = []
        self.trace = ScoreTrace(session_id="")

    def feed(self, action: str) -> ActionRecord | None:
        self._t += 1
        t = self._t
        if action not in self.vocabulary:
            self.trace.alarms.append(AlarmEvent(t, "out_of_vocabulary"))
            if t == 1:
                return None
            record = ActionRecord(
                t=t, action=action, oov=True,
                instantaneous_cluster=self._router.instantaneous,
                voted_cluster=self._router.voted,
                likelihood=None, loss=None,
                running_mean_likelihood=float(np.mean(self._p)) if self._p else None,
                running_mean_loss=float(np.mean(self._losses)) if self._losses else None,
            )
            self.trace.records.append(record)
            return record

        idx = self.vocabulary.index(action)
        vote = self._router.feed(idx)
        if t == 1:
            self._context.append(idx)
            return None

        model = self.lms[vote.voted]
        rows = TrainingWindow(tuple(self._context[-99:]), idx).matrix(self.vocabulary.size)
        p = float(forward(model, rows)[idx])
        self._context.append(idx)
        self._p.append(p)
        self._losses.append(-math.log(p))

        threshold = self.config.threshold_for(vote.voted)
        if threshold is not None and len(self._p) >= self.config.alarm_patience:
            window_mean = float(np.mean(self._p[-self.config.alarm_patience:]))
            if window_mean < threshold:
                self.trace.alarms.append(AlarmEvent(t, "low_likelihood"))

        record = ActionRecord(
            t=t, action=action, oov=False,
            instantaneous_cluster=vote.instantaneous, voted_cluster=vote.voted,
            likelihood=p, loss=-math.log(p),
            running_mean_likelihood=float(np.mean(self._p)),
            running_mean_loss=float(np.mean(self._losses)),
        )
        self.trace.records.append(record)
        return record


def monitor(actions: Sequence[str], cluster_lms: Mapping[int, LstmModel],
            ocsvms: Mapping[int, OcSvmModel], vocabulary: Vocabulary,
            config: MonitorConfig = MonitorConfig(), session_id: str = "") -> ScoreTrace:
    mon = SessionMonitor(cluster_lms, ocsvms, vocabulary, config)
    mon.trace.session_id = session_id
    for a in actions:
        mon.feed(a)
    return mon.trace


def assign_cluster_vote15(session_actions: Sequence[int], ocsvms: Mapping[int, OcSvmModel],
                          d: int, vote_horizon: int = 15) -> int:
    """Cluster chosen by the most frequent routing over the first actions."""
    router = OnlineRouter(ocsvms, d, vote_horizon)
    voted = None
    for a in session_actions[:vote_horizon]:
        voted = router.feed(a).voted
    if voted is None:
        raise ValueError("cannot route an empty session")
    return voted


# ---------------------------------------------------------------------------
# Normality reports


@dataclass(frozen=True)
class SessionScore:
    session_id: str
    likelihood: float | None
    loss: float | None
    perplexity: float | None
    cluster: int | None
    oov_count: int = 0

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id, "likelihood": self.likelihood,
            "loss": self.loss, "perplexity": self.perplexity,
            "cluster": self.cluster, "oov_count": self.oov_count,
        }


@dataclass(frozen=True)
class NormalityReport:
    rows: tuple[SessionScore, ...]
    mean_likelihood: float
    var_likelihood: float
    mean_loss: float
    var_loss: float
    mean_perplexity: float

    @classmethod
    def from_rows(cls, rows: Sequence[SessionScore]) -> "NormalityReport":
        liks = [r.likelihood for r in rows if r.likelihood is not None]
        losses = [r.loss for r in rows if r.loss is not None]
        perps = [r.perplexity for r in rows if r.perplexity is not None]
        return cls(
            rows=tuple(rows),
            mean_likelihood=float(np.mean(liks)) if liks else float("nan"),
            var_likelihood=float(np.var(liks)) if liks else float("nan"),
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            var_loss=float(np.var(losses)) if losses else float("nan"),
            mean_perplexity=float(np.mean(perps)) if perps else float("nan"),
        )

    def to_json(self) -> dict:
        def finite(v):
            return v if v is not None and math.isfinite(v) else None

        return {
            "version": 1,
            "sessions": [r.to_json() for r in self.rows],
            "mean_likelihood": finite(self.mean_likelihood),
            "var_likelihood": finite(self.var_likelihood),
            "mean_loss": finite(self.mean_loss),
            "var_loss": finite(self.var_loss),
            "mean_perplexity": finite(self.mean_perplexity),
        }


def score_session_names(session_id: str, actions: Sequence[str],
                        cluster_lms: Mapping[int, LstmModel],
                        ocsvms: Mapping[int, OcSvmModel], vocabulary: Vocabulary,
                        config: MonitorConfig = MonitorConfig()) -> SessionScore:
    """Batch scoring through the same vote-then-score path as monitoring."""
    trace = monitor(actions, cluster_lms, ocsvms, vocabulary, config, session_id)
    cluster = None
    for r in reversed(trace.records):
        if r.voted_cluster is not None:
            cluster = r.voted_cluster
            break
    mean_lik = trace.mean_likelihood()
    mean_loss = trace.mean_loss()
    return SessionScore(
        session_id=session_id,
        likelihood=mean_lik,
        loss=mean_loss,
        perplexity=float(np.exp(mean_loss)) if mean_loss is not None else None,
        cluster=cluster,
        oov_count=sum(1 for a in trace.alarms if a.reason == "out_of_vocabulary"),
    )


def score_dataset(sessions: Sequence[Session], cluster_lms: Mapping[int, LstmModel],
                  ocsvms: Mapping[int, OcSvmModel], vocabulary: Vocabulary,
                  vote_horizon: int = 15) -> NormalityReport:
    """Score in-vocabulary sessions: route by the first-15 vote, then take
    the session metrics under the voted cluster's model."""
    rows = []
    for s in sessions:
        if s.length < 2:
            continue
        cluster = assign_cluster_vote15(s.actions, ocsvms, vocabulary.size, vote_horizon)
        model = cluster_lms[cluster]
        lik = session_likelihood(model, s)
        ce = session_loss(model, s)
        rows.append(SessionScore(s.session_id, lik, ce, float(np.exp(ce)), cluster))
    return NormalityReport.from_rows(rows)


# ---------------------------------------------------------------------------
# Evaluation tables


@dataclass(frozen=True)
class EvalRow:
    cluster_id: int
    name: str
    size: int
    own_test_accuracy: float
    mean_other_test_accuracy: float
    global_accuracy: float
    size_matched_accuracy: float
    own_test_loss: float
    mean_other_test_loss: float
    global_loss: float
    size_matched_loss: float


def evaluate_cluster_vs_global(
    cluster_lms: Mapping[int, LstmModel],
    test_windows: Mapping[int, Sequence[TrainingWindow]],
    global_lm: LstmModel | None,
    size_matched_lms: Mapping[int, LstmModel],
    sizes: Mapping[int, int],
    names: Mapping[int, str] | None = None,
) -> list[EvalRow]:
    """Own-vs-other-vs-global comparison table, ascending cluster size."""
    rows = []
    ordered = sorted(cluster_lms, key=lambda cid: (sizes[cid], cid))
    for cid in ordered:
        own_acc, own_loss = windows_accuracy_and_loss(cluster_lms[cid], test_windows[cid])
        others = [c for c in ordered if c != cid and len(test_windows[c])]
        if others:
            other_stats = [windows_accuracy_and_loss(cluster_lms[cid], test_windows[c]) for c in others]
            mean_other_acc = float(np.mean([a for a, _ in other_stats]))
            mean_other_loss = float(np.mean([l for _, l in other_stats]))
        else:
            mean_other_acc = mean_other_loss = float("nan")
        if global_lm is not None:
            glob_acc, glob_loss = windows_accuracy_and_loss(global_lm, test_windows[cid])
        else:
            glob_acc = glob_loss = float("nan")
        if cid in size_matched_lms:
            sm_acc, sm_loss = windows_accuracy_and_loss(size_matched_lms[cid], test_windows[cid])
        else:
            sm_acc = sm_loss = float("nan")
        rows.append(EvalRow(
            cluster_id=cid, name=(names or {}).get(cid, f"cluster-{cid}"), size=sizes[cid],
            own_test_accuracy=own_acc, mean_other_test_accuracy=mean_other_acc,
            global_accuracy=glob_acc, size_matched_accuracy=sm_acc,
            own_test_loss=own_loss, mean_other_test_loss=mean_other_loss,
            global_loss=glob_loss, size_matched_loss=sm_loss,
        ))
    return rows


def online_trace_table(cluster_lms: Mapping[int, LstmModel],
                       ocsvms: Mapping[int, OcSvmModel], vocabulary: Vocabulary,
                       sessions: Sequence[Session], *, max_t: int = 300,
                       vote_horizon: int = 15) -> list[dict]:
    """Per-step mean likelihood across sessions for two routing baselines:
    the instantaneous max-score cluster and the frozen first-15 vote."""
    d = vocabulary.size
    sums_inst = np.zeros(max_t + 1)
    sums_vote = np.zeros(max_t + 1)
    counts = np.zeros(max_t + 1, dtype=np.int64)
    for s in sessions:
        if s.length < 2:
            continue
        router = OnlineRouter(ocsvms, d, vote_horizon)
        votes = [router.feed(a) for a in s.actions[:max_t]]
        windows = encode_windows(s)[:max_t - 1]
        probs_by_cluster = {
            cid: batch_probs(lm, windows) for cid, lm in cluster_lms.items()
        }
        for k, w in enumerate(windows):
            t = k + 2  # window k predicts action index k+1 (1-based t)
            if t > max_t:
                break
            vote = votes[t - 1]
            sums_inst[t] += probs_by_cluster[vote.instantaneous][k, w.target]
            sums_vote[t] += probs_by_cluster[vote.voted][k, w.target]
            counts[t] += 1
    out = []
    for t in range(2, max_t + 1):
        if counts[t] == 0:
            continue
        out.append({
            "t": t,
            "mean_likelihood_max_route": sums_inst[t] / counts[t],
            "mean_likelihood_vote15": sums_vote[t] / counts[t],
            "sessions": int(counts[t]),
        })
    return out
