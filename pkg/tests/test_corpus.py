import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sessionwatch import corpus
from sessionwatch.corpus import (
    IngestError,
    Persona,
    Session,
    SessionDataset,
    SyntheticConfig,
    Vocabulary,
    default_config,
    emit,
    filter_short,
    fingerprint,
    generate_synthetic,
    ingest,
    length_stats,
    make_personas,
    mine_frequent_actionsets,
    split,
    split_counts,
)


def make_dataset(action_lists, names=("A", "B", "C")):
    vocab = Vocabulary(tuple(names))
    sessions = tuple(
        Session(f"s{i}", tuple(vocab.index(a) for a in acts))
        for i, acts in enumerate(action_lists)
    )
    return SessionDataset(vocab, sessions)


class TestVocabulary:
    def test_bijection(self):
        v = Vocabulary(("x", "y", "z"))
        for i, name in enumerate(v.actions):
            assert v.index(name) == i
            assert v.name(i) == name

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary(("a", "a"))

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError, match="at least 2"):
            Vocabulary(("only",))


class TestIngest:
    def test_three_line_jsonl(self, tmp_path):
        p = tmp_path / "log.jsonl"
        p.write_text(
            '{"session_id":"1","actions":["A","B"]}\n'
            '{"session_id":"2","actions":["B","C"]}\n'
            '{"session_id":"3","actions":["A"]}\n'
        )
        ds = ingest(str(p))
        assert ds.vocabulary.size == 3
        assert ds.m == 3
        assert ds.vocabulary.actions == ("A", "B", "C")  # first appearance order
        assert ds.sessions[2].actions == (0,)

    def test_empty_session_names_line(self, tmp_path):
        p = tmp_path / "log.jsonl"
        p.write_text('{"session_id":"1","actions":["A","B"]}\n{"session_id":"2","actions":[]}\n')
        with pytest.raises(IngestError, match="empty session at line 2"):
            ingest(str(p))

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "log.jsonl"
        p.write_text('{"session_id":"1","actions":["A","B"]}\nnot json\n')
        with pytest.raises(IngestError, match="line 2"):
            ingest(str(p))

    def test_empty_file(self, tmp_path):
        p = tmp_path / "log.jsonl"
        p.write_text("")
        with pytest.raises(IngestError, match="empty file"):
            ingest(str(p))

    def test_unknown_keys_ignored(self, tmp_path):
        p = tmp_path / "log.jsonl"
        p.write_text('{"session_id":"1","actions":["A","B"],"extra":42}\n')
        ds = ingest(str(p))
        assert ds.sessions[0].actions == (0, 1)

    def test_csv_roundtrip(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text(
            "session_id,action,ordinal\n"
            "s1,A,0\ns1,B,1\n"
            "s2,B,0\ns2,C,1\ns2,C,2\n"
        )
        ds = ingest(str(p), format="csv")
        assert ds.m == 2
        assert ds.sessions[1].action_names(ds.vocabulary) == ("B", "C", "C")

    def test_csv_bad_ordinal(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("session_id,action,ordinal\ns1,A,0\ns1,B,3\n")
        with pytest.raises(IngestError, match="line 3"):
            ingest(str(p), format="csv")

    def test_ingest_emit_identity(self, tmp_path):
        ds = make_dataset([["A", "B"], ["B", "C", "A"], ["C"]])
        out = tmp_path / "out.jsonl"
        emit(ds, str(out))
        again = ingest(str(out))
        assert again.vocabulary.actions == ds.vocabulary.actions
        assert [s.actions for s in again.sessions] == [s.actions for s in ds.sessions]
        assert [s.session_id for s in again.sessions] == [s.session_id for s in ds.sessions]
        # and emit is stable
        out2 = tmp_path / "out2.jsonl"
        emit(again, str(out2))
        assert out.read_bytes() == out2.read_bytes()


class TestFilterShort:
    def test_drops_singletons(self):
        ds = make_dataset([["A"], ["A", "B"], ["A", "B", "C", "A", "B"], ["C"]])
        result = filter_short(ds)
        assert [s.length for s in result.dataset.sessions] == [2, 5]
        assert result.removed == 2

    def test_identity_when_clean(self):
        ds = make_dataset([["A", "B"], ["B", "C"]])
        result = filter_short(ds)
        assert result.removed == 0
        assert result.dataset.sessions == ds.sessions

    def test_idempotent(self):
        ds = make_dataset([["A"], ["A", "B"]])
        once = filter_short(ds).dataset
        twice = filter_short(once)
        assert twice.removed == 0
        assert twice.dataset.sessions == once.sessions


class TestLengthStats:
    def test_basic(self):
        ds = make_dataset([["A"], ["A", "B"], ["A", "B", "C"]])
        st_ = length_stats(ds)
        assert st_.mean == 2
        assert st_.max == 3

    def test_constant_percentile(self):
        ds = make_dataset([["A"] * 5] * 100)
        assert length_stats(ds).percentile(98) == 5

    def test_nearest_rank(self):
        ds = make_dataset([["A"] * n for n in range(1, 11)])
        # ceil(0.25*10)=3rd order statistic
        assert length_stats(ds).percentile(25) == 3

    def test_empty_errors(self):
        vocab = Vocabulary(("A", "B"))
        with pytest.raises(ValueError):
            length_stats(SessionDataset(vocab, ()))


class TestSplit:
    def test_exact_counts_100(self):
        ds = make_dataset([["A", "B"]] * 100)
        labelled = split(ds, seed=7)
        counts = {lab: labelled.split_labels.count(lab) for lab in ("train", "validation", "test")}
        assert counts == {"train": 70, "validation": 15, "test": 15}

    def test_remainder_to_train(self):
        assert split_counts(10, (0.7, 0.15, 0.15)) == (8, 1, 1)

    def test_deterministic(self):
        ds = make_dataset([["A", "B"]] * 40)
        assert split(ds, seed=3).split_labels == split(ds, seed=3).split_labels

    def test_bad_ratios(self):
        ds = make_dataset([["A", "B"]] * 10)
        with pytest.raises(ValueError, match="sum to 1"):
            split(ds, ratios=(0.5, 0.2, 0.2))

    @given(m=st.integers(3, 400), r=st.integers(0, 60), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_partition_property(self, m, r, seed):
        ratios = (0.7 - r / 1000, 0.15, 0.15 + r / 1000)
        ds = make_dataset([["A", "B"]] * m)
        labelled = split(ds, ratios=ratios, seed=seed)
        floors = [math.floor(x * m) for x in ratios]
        expect_train = floors[0] + (m - sum(floors))
        assert labelled.split_labels.count("train") == expect_train
        assert labelled.split_labels.count("validation") == floors[1]
        assert labelled.split_labels.count("test") == floors[2]
        assert len(labelled.split_labels) == m


class TestSynthetic:
    def test_deterministic_cycle(self):
        persona = Persona(
            persona_id=0, actions=("A", "B", "C"),
            transition=np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float),
            initial=np.array([1.0, 0, 0]),
            session_count=1, fixed_length=6,
        )
        corpus_ = generate_synthetic(SyntheticConfig((persona,), seed=1))
        names = corpus_.dataset.sessions[0].action_names(corpus_.dataset.vocabulary)
        assert names == ("A", "B", "C", "A", "B", "C")

    def test_disjoint_supports(self):
        cfg = make_personas(2, 10, [500, 500], overlap=0.0, mean_length=6.0, seed=5)
        out = generate_synthetic(cfg)
        subsets = {p.persona_id: {out.dataset.vocabulary.index(a) for a in p.actions}
                   for p in cfg.personas}
        for session, label in zip(out.dataset.sessions, out.persona_labels):
            assert set(session.actions) <= subsets[label]

    def test_rejects_non_stochastic(self):
        with pytest.raises(ValueError, match="row-stochastic"):
            Persona(0, ("A", "B"), np.array([[0.5, 0.6], [1, 0]]), np.array([1.0, 0]), 1)

    def test_seed_reproducible(self):
        cfg = make_personas(3, 12, [20, 20, 20], seed=9)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        assert a.dataset.sessions == b.dataset.sessions
        assert a.persona_labels == b.persona_labels

    def test_default_config_counts(self):
        cfg = default_config(seed=0)
        assert len(cfg.personas) == 13
        sizes = [p.session_count for p in cfg.personas]
        assert sizes[0] == 177
        assert 3400 <= sizes[-1] <= 3600
        assert 14500 <= sum(sizes) <= 16000
        assert cfg.vocabulary().size == 300

    @pytest.mark.slow
    def test_default_corpus_envelope(self):
        # full-scale envelope: ~15k sessions, ~300 actions, mean length
        # ~15, p98 near 91, max beyond 800
        out = generate_synthetic(default_config(seed=0))
        per_persona = {}
        for label in out.persona_labels:
            per_persona[label] = per_persona.get(label, 0) + 1
        for p in default_config(seed=0).personas:
            assert abs(per_persona[p.persona_id] - p.session_count) <= 1
        stats = length_stats(out.dataset)
        assert 14000 <= out.dataset.m <= 16000
        assert 13.5 <= stats.mean <= 16.5
        assert 80 <= stats.percentile(98) <= 100
        assert stats.max > 800


class TestMining:
    def test_spec_example(self):
        ds = make_dataset([["A", "B"], ["A", "B"], ["A", "C"]])
        got = mine_frequent_actionsets(ds, 0.6)
        assert got[0] == (("A",), 1.0)
        assert got[1][0] == ("A", "B") and got[1][1] == pytest.approx(2 / 3)
        assert got[2][0] == ("B",) and got[2][1] == pytest.approx(2 / 3)
        assert len(got) == 3

    def test_full_support_intersection(self):
        ds = make_dataset([["A", "B"], ["A", "C"], ["A"]])
        got = mine_frequent_actionsets(ds, 1.0)
        assert got == [(("A",), 1.0)]

    def test_empty_when_threshold_high(self):
        ds = make_dataset([["A"], ["B"], ["C"]])
        assert mine_frequent_actionsets(ds, 0.9) == []

    def test_closed_only(self):
        ds = make_dataset([["A", "B"], ["A", "B"], ["A", "C"]])
        got = mine_frequent_actionsets(ds, 0.6, closed_only=True)
        assert (("B",), 2 / 3) not in [(s, pytest.approx(v)) for s, v in got]
        assert got[0] == (("A",), 1.0)

    def brute_force(self, ds, min_support):
        m = ds.m
        baskets = [set(s.actions) for s in ds.sessions]
        universe = sorted({a for b in baskets for a in b})
        out = []
        for r in range(1, len(universe) + 1):
            from itertools import combinations
            for combo in combinations(universe, r):
                sup = sum(1 for b in baskets if set(combo) <= b) / m
                if sup >= min_support:
                    out.append((tuple(sorted(ds.vocabulary.name(i) for i in combo)), sup))
        out.sort(key=lambda item: (-item[1], item[0]))
        return out

    @given(st.data())
    @settings(max_examples=25, deadline=None)
    def test_matches_brute_force(self, data):
        d = data.draw(st.integers(2, 6))
        m = data.draw(st.integers(1, 20))
        names = tuple(chr(ord("a") + i) for i in range(d))
        rows = data.draw(st.lists(
            st.lists(st.integers(0, d - 1), min_size=1, max_size=6), min_size=m, max_size=m))
        vocab = Vocabulary(names)
        ds = SessionDataset(vocab, tuple(
            Session(f"s{i}", tuple(r)) for i, r in enumerate(rows)))
        minsup = data.draw(st.sampled_from([0.2, 0.4, 0.6, 1.0]))
        got = mine_frequent_actionsets(ds, minsup)
        want = self.brute_force(ds, minsup)
        assert [(s, round(v, 12)) for s, v in got] == [(s, round(v, 12)) for s, v in want]


class TestFingerprint:
    def test_changes_with_content(self):
        a = make_dataset([["A", "B"], ["B", "C"]])
        b = make_dataset([["A", "B"], ["B", "B"]])
        assert fingerprint(a) != fingerprint(b)
        assert fingerprint(a) == fingerprint(make_dataset([["A", "B"], ["B", "C"]]))
