import numpy as np
import pytest

from sessionwatch.corpus import (
    Persona,
    Session,
    SyntheticConfig,
    generate_synthetic,
    split,
)
from sessionwatch.lm import (
    LstmModel,
    TrainingDiverged,
    TrainingWindow,
    accuracy,
    batch_probs,
    encode_windows,
    final_hidden,
    forward,
    gradient_check,
    load_lstm,
    loss,
    save_lstm,
    train,
)


def cycle_sessions(count, length, seed=0):
    """Sessions from the deterministic grammar A->B->C->A."""
    rng = np.random.Generator(np.random.PCG64(seed))
    sessions = []
    for i in range(count):
        start = int(rng.integers(0, 3))
        sessions.append(Session(f"c{i}", tuple((start + t) % 3 for t in range(length))))
    return sessions


def zero_model(d=3, hidden=4):
    H = hidden
    return LstmModel(d, H, np.zeros((4 * H, d + H)), np.zeros(4 * H),
                     np.zeros((d, H)), np.zeros(d), dropout_rate=0.0)


class TestEncodeWindows:
    def test_three_action_session(self):
        s = Session("x", (0, 1, 2))
        windows = encode_windows(s)
        assert len(windows) == 2
        assert windows[0].indices == (0,) and windows[0].target == 1
        assert windows[1].indices == (0, 1) and windows[1].target == 2
        m = windows[0].matrix(3)
        assert m.shape == (99, 3)
        assert np.all(m[:98] == 0)
        assert m[98, 0] == 1.0 and m[98].sum() == 1.0
        m2 = windows[1].matrix(3)
        assert np.all(m2[:97] == 0)
        assert m2[97, 0] == 1.0 and m2[98, 1] == 1.0

    def test_long_session_slides(self):
        s = Session("x", tuple(i % 5 for i in range(150)))
        windows = encode_windows(s)
        assert len(windows) == 149
        last = windows[-1]
        assert last.padding == 0
        # window 149 sees actions a_51..a_149 (1-based), i.e. indices 50..148
        assert last.indices == tuple(i % 5 for i in range(50, 149))
        assert last.target == 149 % 5

    def test_total_window_count(self):
        sessions = [Session(f"s{i}", tuple([0, 1] * n)) for i, n in enumerate((1, 2, 5))]
        total = sum(len(encode_windows(s)) for s in sessions)
        assert total == sum(s.length - 1 for s in sessions)

    def test_too_short(self):
        with pytest.raises(ValueError, match="too short"):
            encode_windows(Session("x", (0,)))

    def test_roundtrip_last_window(self):
        acts = tuple(int(x) for x in np.random.Generator(np.random.PCG64(3)).integers(0, 4, 130))
        s = Session("x", acts)
        w = encode_windows(s)[-1]
        n = s.length
        assert w.indices == acts[max(0, n - 1 - 99):n - 1]


class TestForward:
    def test_zero_weights_uniform(self):
        model = zero_model()
        for rows in (np.zeros((99, 3)), np.zeros((1, 3)), np.eye(3)):
            p = forward(model, rows)
            assert np.allclose(p, 1 / 3)

    def test_probability_vector(self):
        model = LstmModel.initialize(4, hidden=6, seed=1)
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(20):
            w = TrainingWindow(tuple(rng.integers(0, 4, int(rng.integers(0, 12)))), 0)
            p = forward(model, w.matrix(4))
            assert abs(p.sum() - 1.0) < 1e-9
            assert np.all(p > 0)

    def test_infer_deterministic(self):
        model = LstmModel.initialize(3, hidden=5, seed=2)
        rows = TrainingWindow((0, 1, 2, 1), 0).matrix(3)
        assert np.array_equal(forward(model, rows), forward(model, rows))

    def test_train_mode_seeded(self):
        model = LstmModel.initialize(3, hidden=5, dropout_rate=0.4, seed=2)
        rows = TrainingWindow((0, 1), 0).matrix(3)
        a = forward(model, rows, mode="train", seed=9)
        b = forward(model, rows, mode="train", seed=9)
        assert np.array_equal(a, b)
        with pytest.raises(ValueError, match="seed"):
            forward(model, rows, mode="train")

    def test_dimension_mismatch(self):
        model = zero_model(d=3)
        with pytest.raises(ValueError, match="dimension"):
            forward(model, np.zeros((5, 4)))

    def test_too_many_rows(self):
        model = zero_model(d=3)
        with pytest.raises(ValueError, match="at most"):
            forward(model, np.zeros((100, 3)))

    def test_gate_bounds(self):
        model = LstmModel.initialize(3, hidden=4, seed=5)
        rng = np.random.Generator(np.random.PCG64(1))
        h = np.zeros(4)
        c = np.zeros(4)
        from sessionwatch.lm import _step

        for _ in range(30):
            x = np.zeros(3)
            x[int(rng.integers(0, 3))] = 1.0
            h, c = _step(model, model.W[:, :3] @ x, h, c)
            assert np.all(np.abs(h) < 1.0)
            assert np.all(np.isfinite(c))

    def test_batch_matches_single(self):
        model = LstmModel.initialize(4, hidden=6, seed=7)
        rng = np.random.Generator(np.random.PCG64(2))
        windows = [
            TrainingWindow(tuple(rng.integers(0, 4, int(rng.integers(1, 99)))),
                           int(rng.integers(0, 4)))
            for _ in range(17)
        ]
        got = batch_probs(model, windows)
        for k, w in enumerate(windows):
            single = forward(model, w.matrix(4))
            assert np.allclose(got[k], single, atol=1e-12)


class TestLoss:
    def test_uniform(self):
        assert loss(np.full(7, 1 / 7), 3) == pytest.approx(np.log(7))

    def test_near_certain(self):
        p = np.array([1e-12, 1 - 1e-12])
        assert loss(p, 1) == pytest.approx(1e-12, abs=1e-9)

    def test_arithmetic(self):
        assert loss(np.array([0.2, 0.5, 0.3]), 1) == pytest.approx(-np.log(0.5))


class TestGradientCheck:
    def test_random_small_models(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for seed in range(6):
            model = LstmModel.initialize(4, hidden=5, dropout_rate=0.0, seed=seed)
            w = TrainingWindow(tuple(rng.integers(0, 4, 6)), int(rng.integers(0, 4)))
            err = gradient_check(model, w, epsilon=1e-5)
            assert err < 1e-4, f"seed {seed}: {err}"

    def test_zero_weight_dense_bias(self):
        model = zero_model(d=3, hidden=4)
        w = TrainingWindow((0, 1), 2)
        from sessionwatch.lm import _loss_and_grads

        _, grads = _loss_and_grads(model, [w], None)
        db_y = grads[3]
        expected = np.full(3, 1 / 3)
        expected[2] -= 1.0
        assert np.allclose(db_y, expected, atol=1e-12)

    def test_epsilon_halving(self):
        model = LstmModel.initialize(3, hidden=4, dropout_rate=0.0, seed=3)
        w = TrainingWindow((0, 1, 2, 0), 1)
        e1 = gradient_check(model, w, epsilon=1e-5)
        e2 = gradient_check(model, w, epsilon=5e-6)
        assert e2 <= max(4 * e1, 1e-9)

    def test_rejects_big_models(self):
        model = LstmModel.initialize(10, hidden=16)
        with pytest.raises(ValueError, match="small models"):
            gradient_check(model, TrainingWindow((0,), 1))


class TestTrain:
    def make_windows(self, sessions):
        out = []
        for s in sessions:
            out.extend(encode_windows(s))
        return out

    def test_learns_cycle(self):
        sessions = cycle_sessions(60, 8, seed=1)
        windows = self.make_windows(sessions[:50])
        val = self.make_windows(sessions[50:])
        model = LstmModel.initialize(3, hidden=16, dropout_rate=0.4, seed=0)
        result = train(model, windows, val_windows=val, epochs=30, seed=0)
        assert accuracy(model, val) >= 0.99
        assert result.history[-1].train_loss < result.history[0].train_loss

    def test_deterministic(self):
        sessions = cycle_sessions(12, 6, seed=2)
        windows = self.make_windows(sessions)
        runs = []
        for _ in range(2):
            model = LstmModel.initialize(3, hidden=8, dropout_rate=0.4, seed=4)
            train(model, windows, epochs=3, seed=11)
            runs.append(model.copy_weights())
        for a, b in zip(*runs):
            assert np.array_equal(a, b)

    def test_no_windows(self):
        model = zero_model()
        with pytest.raises(ValueError, match="no training windows"):
            train(model, [])

    def test_divergence_abort(self):
        model = zero_model(d=3, hidden=4)
        model.W_y[:] = 1e200  # force non-finite loss path
        model.b_y[:] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            train(model, [TrainingWindow((0,), 1)], epochs=1)
        assert err.value.epoch == 1

    def test_loss_curve_recorded(self):
        windows = self.make_windows(cycle_sessions(8, 5, seed=3))
        model = LstmModel.initialize(3, hidden=6, seed=1)
        result = train(model, windows, val_windows=windows[:4], epochs=4, seed=2)
        assert len(result.history) <= 4
        for st in result.history:
            assert st.val_loss is not None and np.isfinite(st.train_loss)


class TestAccuracy:
    def test_tie_rule_zero_model(self):
        model = zero_model(d=4, hidden=4)
        windows = [TrainingWindow((t,), t) for t in range(4)]
        # uniform output -> argmax index 0 -> only target 0 counts
        assert accuracy(model, windows) == 0.25

    def test_single_correct(self):
        model = zero_model(d=3)
        assert accuracy(model, [TrainingWindow((1,), 0)]) == 1.0

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            accuracy(zero_model(), [])


class TestDropout:
    def test_inverted_dropout_expectation(self):
        model = LstmModel.initialize(3, hidden=8, dropout_rate=0.4, seed=6)
        rows = TrainingWindow((0, 1, 2, 1, 0), 0).matrix(3)
        reference = final_hidden(model, rows, "infer")
        acc = np.zeros_like(reference)
        n = 10_000
        for s in range(n):
            acc += final_hidden(model, rows, "train", seed=s)
        mean = acc / n
        scale = np.abs(reference).mean()
        assert np.all(np.abs(mean - reference) <= 0.02 * max(scale, 1.0) + 0.02 * np.abs(reference))


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        model = LstmModel.initialize(4, hidden=6, dropout_rate=0.25, seed=9)
        p = tmp_path / "model.npz"
        save_lstm(model, str(p))
        back = load_lstm(str(p))
        assert back.d == 4 and back.hidden == 6 and back.dropout_rate == 0.25
        rows = TrainingWindow((0, 1, 2), 0).matrix(4)
        assert np.array_equal(forward(back, rows), forward(model, rows))

    def test_byte_deterministic(self, tmp_path):
        model = LstmModel.initialize(3, hidden=4, seed=2)
        a, b = tmp_path / "a.npz", tmp_path / "b.npz"
        save_lstm(model, str(a))
        save_lstm(model, str(b))
        assert a.read_bytes() == b.read_bytes()
