"""LSTM language model over action sequences, implemented from scratch.

Architecture: one-hot input -> single LSTM layer -> dropout -> dense ->
softmax over the action set.  Sessions become fixed-size training windows
through a length-100 moving window (99 inputs, 1 target) with an all-zero
padding prefix; the recurrence runs over every row, padding included,
from zero initial state.

The training path exploits two structural facts for speed without
changing the math: (1) the state trajectory through a run of zero rows
from the zero state depends only on the weights, so one shared chain per
batch covers every window's padding prefix (gradients are linear in the
adjoint, so prefix adjoints are summed and backpropagated once); (2) real
action steps are packed by descending length so each time step is one
dense matmul over the still-active windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import Session
from .serialize import load_arrays, save_arrays

WINDOW = 99  # visible context length; the window's 100th element is the target


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, grad_norm: float):
        self.epoch, self.batch, self.grad_norm = epoch, batch, grad_norm
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} (grad norm {grad_norm:.3e})")


@dataclass(frozen=True)
class TrainingWindow:
    """Compact window: visible action indices (zero padding implied in
    front up to 99 rows) and the next-action target."""

    indices: tuple[int, ...]
    target: int

    def __post_init__(self):
        if len(self.indices) > WINDOW:
            raise ValueError(f"window holds at most {WINDOW} actions")
        if self.target < 0 or any(i < 0 for i in self.indices):
            raise ValueError("negative action index")

    @property
    def padding(self) -> int:
        return WINDOW - len(self.indices)

    def matrix(self, d: int) -> np.ndarray:
        """Materialize the 99 x d one-hot/zero input matrix."""
        rows = np.zeros((WINDOW, d))
        for j, idx in enumerate(self.indices):
            rows[self.padding + j, idx] = 1.0
        return rows


def encode_windows(session: Session) -> list[TrainingWindow]:
    """Moving window of length 100: window i sees the last <=99 actions
    before position i+1 and targets action i+1."""
    n = session.length
    if n < 2:
        raise ValueError(f"session {session.session_id!r} too short to encode (n={n})")
    acts = session.actions
    return [
        TrainingWindow(indices=tuple(acts[max(0, i - WINDOW):i]), target=acts[i])
        for i in range(1, n)
    ]


class LstmModel:
    """Single-layer LSTM with dropout on the final hidden state.

    Gate weights are stored fused as W (4H x (d+H)) in f,i,o,g order with
    bias b (4H); the per-gate views W_f..b_g expose the conventional
    layout.  Inference is deterministic; dropout applies only in train
    mode (inverted scaling, so expectations match inference).
    """

    def __init__(self, d: int, hidden: int, W: np.ndarray, b: np.ndarray,
                 W_y: np.ndarray, b_y: np.ndarray, dropout_rate: float = 0.4,
                 meta: dict | None = None):
        if W.shape != (4 * hidden, d + hidden) or b.shape != (4 * hidden,):
            raise ValueError("gate weight shapes inconsistent")
        if W_y.shape != (d, hidden) or b_y.shape != (d,):
            raise ValueError("output layer shapes inconsistent")
        if not 0 <= dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.d = d
        self.hidden = hidden
        self.W = W.astype(np.float64)
        self.b = b.astype(np.float64)
        self.W_y = W_y.astype(np.float64)
        self.b_y = b_y.astype(np.float64)
        self.dropout_rate = float(dropout_rate)
        self.meta = dict(meta or {})

    # per-gate views (f, i, o, g blocks of the fused arrays)
    def _gate(self, k):
        H = self.hidden
        return self.W[k * H:(k + 1) * H]

    W_f = property(lambda self: self._gate(0))
    W_i = property(lambda self: self._gate(1))
    W_o = property(lambda self: self._gate(2))
    W_g = property(lambda self: self._gate(3))
    b_f = property(lambda self: self.b[0:self.hidden])
    b_i = property(lambda self: self.b[self.hidden:2 * self.hidden])
    b_o = property(lambda self: self.b[2 * self.hidden:3 * self.hidden])
    b_g = property(lambda self: self.b[3 * self.hidden:4 * self.hidden])

    @classmethod
    def initialize(cls, d: int, hidden: int = 256, dropout_rate: float = 0.4,
                   seed: int = 0) -> "LstmModel":
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, forget bias +1."""
        rng = np.random.Generator(np.random.PCG64(seed))
        lim = 1.0 / np.sqrt(d + hidden)
        W = rng.uniform(-lim, lim, size=(4 * hidden, d + hidden))
        b = np.zeros(4 * hidden)
        b[0:hidden] = 1.0
        lim_y = 1.0 / np.sqrt(hidden)
        W_y = rng.uniform(-lim_y, lim_y, size=(d, hidden))
        b_y = np.zeros(d)
        return cls(d, hidden, W, b, W_y, b_y, dropout_rate, meta={"seed": seed})

    def params(self) -> list[np.ndarray]:
        return [self.W, self.b, self.W_y, self.b_y]

    def copy_weights(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def set_weights(self, weights: Sequence[np.ndarray]) -> None:
        self.W, self.b, self.W_y, self.b_y = (w.copy() for w in weights)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(p: np.ndarray, target: int) -> float:
    """Cross entropy against a one-hot target: -log p[target]."""
    if not 0 <= target < p.shape[-1]:
        raise ValueError("target out of range")
    return float(-np.log(p[target]))


def _step(model: LstmModel, x_part: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One LSTM cell step; x_part is the input contribution W[:, :d] @ x."""
    H = model.hidden
    pre = x_part + h @ model.W[:, model.d:].T + model.b
    sig = 1.0 / (1.0 + np.exp(-pre[..., :3 * H]))
    f, i, o = sig[..., :H], sig[..., H:2 * H], sig[..., 2 * H:3 * H]
    g = np.tanh(pre[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def final_hidden(model: LstmModel, rows: np.ndarray, mode: str = "infer",
                 seed: int | None = None) -> np.ndarray:
    """Hidden state after the full recurrence (post-dropout in train mode)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.size == 0:
        rows = rows.reshape(0, model.d)
    if rows.shape[1] != model.d:
        raise ValueError(f"input rows have dimension {rows.shape[1]}, expected {model.d}")
    if rows.shape[0] > WINDOW:
        raise ValueError(f"at most {WINDOW} input rows")
    h = np.zeros(model.hidden)
    c = np.zeros(model.hidden)
    Wx = model.W[:, :model.d]
    for t in range(rows.shape[0]):
        h, c = _step(model, Wx @ rows[t], h, c)
    if mode == "train":
        if model.dropout_rate > 0:
            if seed is None:
                raise ValueError("train mode needs a seed for the dropout mask")
            rng = np.random.Generator(np.random.PCG64(seed))
            keep = 1.0 - model.dropout_rate
            h = h * (rng.random(model.hidden) < keep) / keep
    elif mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    return h


def forward(model: LstmModel, rows: np.ndarray, mode: str = "infer",
            seed: int | None = None) -> np.ndarray:
    """Probability distribution over the next action given <=99 input rows."""
    h = final_hidden(model, rows, mode, seed)
    return _softmax(model.W_y @ h + model.b_y)


# ---------------------------------------------------------------------------
# Packed batch machinery


class _Batch(NamedTuple):
    order: np.ndarray        # sort permutation (descending real length)
    inverse: np.ndarray
    q: np.ndarray            # real lengths, sorted order
    pads: np.ndarray         # padding lengths, sorted order
    idx_pad: np.ndarray      # (B, qmax) action indices, -1 beyond q
    targets: np.ndarray      # sorted order


def _pack(windows: Sequence[TrainingWindow]) -> _Batch:
    q = np.array([len(w.indices) for w in windows], dtype=np.int64)
    order = np.argsort(-q, kind="stable")
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    q_sorted = q[order]
    qmax = int(q_sorted[0]) if len(q_sorted) else 0
    idx_pad = np.full((len(windows), max(qmax, 1)), -1, dtype=np.int64)
    for row, w_idx in enumerate(order):
        w = windows[w_idx]
        idx_pad[row, :len(w.indices)] = w.indices
    pads = np.array([windows[i].padding for i in order], dtype=np.int64)
    targets = np.array([windows[i].target for i in order], dtype=np.int64)
    return _Batch(order, inverse, q_sorted, pads, idx_pad, targets)


def _zero_chain(model: LstmModel, length: int, want_cache: bool):
    """States after t zero-input steps from zero state, t = 0..length."""
    H = model.hidden
    Zh = np.zeros((length + 1, H))
    Zc = np.zeros((length + 1, H))
    cache = {"gates": np.zeros((length, 4 * H)), "tanh_c": np.zeros((length, H))} if want_cache else None
    h = np.zeros(H)
    c = np.zeros(H)
    Wh_T = model.W[:, model.d:].T
    for t in range(1, length + 1):
        pre = h @ Wh_T + model.b
        sig = 1.0 / (1.0 + np.exp(-pre[:3 * H]))
        f, i, o = sig[:H], sig[H:2 * H], sig[2 * H:3 * H]
        g = np.tanh(pre[3 * H:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        Zh[t], Zc[t] = h, c
        if want_cache:
            cache["gates"][t - 1, :H] = f
            cache["gates"][t - 1, H:2 * H] = i
            cache["gates"][t - 1, 2 * H:3 * H] = o
            cache["gates"][t - 1, 3 * H:] = g
            cache["tanh_c"][t - 1] = tc
    return Zh, Zc, cache


def _forward_packed(model: LstmModel, batch: _Batch, want_cache: bool):
    """Run the packed recurrence; returns final hidden states (sorted
    order) plus caches for backward when requested."""
    H, d = model.hidden, model.d
    B = len(batch.q)
    qmax = int(batch.q[0]) if B else 0
    pmax = int(batch.pads.max()) if B else 0

    Zh, Zc, chain_cache = _zero_chain(model, pmax, want_cache)
    Hc = Zh[batch.pads].copy()
    Cc = Zc[batch.pads].copy()

    Wx_T = np.ascontiguousarray(model.W[:, :d].T)
    Wh_T = np.ascontiguousarray(model.W[:, d:].T)

    steps = []
    for j in range(1, qmax + 1):
        n = int(np.searchsorted(-batch.q, -j, side="right"))
        ids = batch.idx_pad[:n, j - 1]
        h_prev = Hc[:n]
        c_prev = Cc[:n]
        pre = Wx_T[ids] + h_prev @ Wh_T + model.b
        sig = 1.0 / (1.0 + np.exp(-pre[:, :3 * H]))
        f, i, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:3 * H]
        g = np.tanh(pre[:, 3 * H:])
        c_new = f * c_prev + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if want_cache:
            steps.append({"n": n, "ids": ids, "h_prev": h_prev.copy(),
                          "c_prev": c_prev.copy(), "gates": np.concatenate([f, i, o, g], axis=1),
                          "tanh_c": tc})
        Hc[:n] = h_new
        Cc[:n] = c_new
    return Hc, Cc, steps, (Zh, Zc, chain_cache)


def _cell_backward(model: LstmModel, dh, dc_carry, gates, tanh_c, c_prev):
    H = model.hidden
    f, i, o, g = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:3 * H], gates[..., 3 * H:]
    do = dh * tanh_c
    dc = dc_carry + dh * o * (1.0 - tanh_c * tanh_c)
    df = dc * c_prev
    di = dc * g
    dg = dc * i
    dc_prev = dc * f
    dpre = np.concatenate([
        df * f * (1.0 - f),
        di * i * (1.0 - i),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ], axis=-1)
    dh_prev = dpre @ model.W[:, model.d:]
    return dpre, dh_prev, dc_prev


def batch_probs(model: LstmModel, windows: Sequence[TrainingWindow],
                chunk: int = 256) -> np.ndarray:
    """Inference-mode next-action distributions, one row per window."""
    out = np.empty((len(windows), model.d))
    for start in range(0, len(windows), chunk):
        part = windows[start:start + chunk]
        batch = _pack(part)
        Hc, _, _, _ = _forward_packed(model, batch, want_cache=False)
        logits = Hc @ model.W_y.T + model.b_y
        out[start:start + len(part)] = _softmax(logits)[batch.inverse]
    return out


def _loss_and_grads(model: LstmModel, windows: Sequence[TrainingWindow],
                    dropout_mask: np.ndarray | None):
    """Mean cross-entropy over the batch and gradients for all parameters.

    dropout_mask, when given, is (B, hidden) already divided by the keep
    probability (inverted dropout) and in the ORIGINAL window order.
    """
    H, d = model.hidden, model.d
    B = len(windows)
    batch = _pack(windows)
    Hc, _, steps, (Zh, Zc, chain_cache) = _forward_packed(model, batch, want_cache=True)

    mask = None
    if dropout_mask is not None:
        mask = dropout_mask[batch.order]
        H_drop = Hc * mask
    else:
        H_drop = Hc
    logits = H_drop @ model.W_y.T + model.b_y
    probs = _softmax(logits)
    mean_loss = float(-np.mean(np.log(probs[np.arange(B), batch.targets])))

    dlogits = probs.copy()
    dlogits[np.arange(B), batch.targets] -= 1.0
    dlogits /= B
    dW_y = dlogits.T @ H_drop
    db_y = dlogits.sum(axis=0)
    dH = dlogits @ model.W_y
    if mask is not None:
        dH = dH * mask
    dC = np.zeros_like(dH)

    dWx_T = np.zeros((d, 4 * H))
    dpre_rows, hprev_rows = [], []
    for step in reversed(steps):
        n = step["n"]
        dpre, dh_prev, dc_prev = _cell_backward(
            model, dH[:n], dC[:n], step["gates"], step["tanh_c"], step["c_prev"])
        np.add.at(dWx_T, step["ids"], dpre)
        dpre_rows.append(dpre)
        hprev_rows.append(step["h_prev"])
        dH[:n] = dh_prev
        dC[:n] = dc_prev

    # adjoints entering each window's padding prefix, summed per chain depth
    pmax = int(batch.pads.max()) if B else 0
    if pmax > 0:
        inj_h = np.zeros((pmax + 1, H))
        inj_c = np.zeros((pmax + 1, H))
        padded = batch.pads > 0
        np.add.at(inj_h, batch.pads[padded], dH[padded])
        np.add.at(inj_c, batch.pads[padded], dC[padded])
        dh = np.zeros(H)
        dc = np.zeros(H)
        for t in range(pmax, 0, -1):
            dh += inj_h[t]
            dc += inj_c[t]
            c_prev = Zc[t - 1]
            dpre, dh, dc = _cell_backward(
                model, dh, dc, chain_cache["gates"][t - 1], chain_cache["tanh_c"][t - 1], c_prev)
            dpre_rows.append(dpre[None, :])
            hprev_rows.append(Zh[t - 1][None, :])

    if dpre_rows:
        dpre_all = np.concatenate(dpre_rows, axis=0)
        hprev_all = np.concatenate(hprev_rows, axis=0)
        dWh = dpre_all.T @ hprev_all
        db = dpre_all.sum(axis=0)
    else:
        dWh = np.zeros((4 * H, H))
        db = np.zeros(4 * H)

    dW = np.concatenate([dWx_T.T, dWh], axis=1)
    return mean_loss, [dW, db, dW_y, db_y]


# ---------------------------------------------------------------------------
# Training


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float | None


@dataclass
class TrainResult:
    model: LstmModel
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None

    def curve_rows(self) -> list[tuple[int, float, float | None]]:
        return [(e.epoch, e.train_loss, e.val_loss) for e in self.history]


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def train(model: LstmModel, windows: Sequence[TrainingWindow], *,
          val_windows: Sequence[TrainingWindow] | None = None,
          epochs: int = 100, batch_size: int = 32, lr: float = 0.001,
          seed: int = 0, patience: int = 5, clip_norm: float = 5.0) -> TrainResult:
    """Minibatch BPTT with Adam; deterministic for a fixed seed.

    Shuffles windows each epoch, clips the global gradient norm, and when
    validation windows are given early-stops after ``patience`` epochs
    without improvement, restoring the best weights.
    """
    if not windows:
        raise ValueError("no training windows")
    rng = np.random.Generator(np.random.PCG64(seed))
    params = model.params()
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    keep = 1.0 - model.dropout_rate

    result = TrainResult(model=model)
    best_val = np.inf
    best_weights = None
    stale = 0
    n = len(windows)

    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, batch_size)):
            part = [windows[i] for i in perm[start:start + batch_size]]
            mask = None
            if model.dropout_rate > 0:
                mask = (rng.random((len(part), model.hidden)) < keep) / keep
            batch_loss, grads = _loss_and_grads(model, part, mask)
            norm = _global_norm(grads)
            if not np.isfinite(batch_loss) or not np.isfinite(norm):
                raise TrainingDiverged(epoch, bi, norm)
            if norm > clip_norm:
                scale = clip_norm / norm
                grads = [g * scale for g in grads]
            step += 1
            bc1 = 1.0 - beta1 ** step
            bc2 = 1.0 - beta2 ** step
            for p, g, ms, vs in zip(params, grads, m_state, v_state):
                ms *= beta1
                ms += (1 - beta1) * g
                vs *= beta2
                vs += (1 - beta2) * g * g
                p -= lr * (ms / bc1) / (np.sqrt(vs / bc2) + eps)
            total += batch_loss * len(part)
        train_loss = total / n

        val_loss = None
        if val_windows:
            probs = batch_probs(model, val_windows)
            targets = np.array([w.target for w in val_windows])
            val_loss = float(-np.mean(np.log(probs[np.arange(len(val_windows)), targets])))
        result.history.append(EpochStats(epoch, train_loss, val_loss))

        if val_loss is not None:
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                best_weights = model.copy_weights()
                result.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break

    if best_weights is not None:
        model.set_weights(best_weights)
    model.meta.update({
        "epochs_trained": result.history[-1].epoch if result.history else 0,
        "lr": lr, "batch_size": batch_size, "train_seed": seed,
    })
    return result


def accuracy(model: LstmModel, windows: Sequence[TrainingWindow]) -> float:
    """Fraction of windows whose argmax prediction hits the target
    (argmax ties resolve to the lowest index)."""
    if not windows:
        raise ValueError("no windows")
    probs = batch_probs(model, windows)
    predicted = probs.argmax(axis=1)
    targets = np.array([w.target for w in windows])
    return float(np.mean(predicted == targets))


def gradient_check(model: LstmModel, window: TrainingWindow,
                   epsilon: float = 1e-5) -> float:
    """Max relative error between analytic BPTT gradients and central
    finite differences, over every parameter."""
    if model.hidden > 8 or model.d > 5:
        raise ValueError("gradient_check is for small models (hidden <= 8, d <= 5)")
    _, grads = _loss_and_grads(model, [window], None)
    params = model.params()
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        g_flat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up, _ = _loss_and_grads(model, [window], None)
            flat[idx] = orig - epsilon
            down, _ = _loss_and_grads(model, [window], None)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            rel = abs(g_flat[idx] - numeric) / max(abs(g_flat[idx]), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Serialization


def save_lstm(model: LstmModel, path: str) -> None:
    arrays = {
        "version": np.int64(1),
        "d": np.int64(model.d),
        "hidden": np.int64(model.hidden),
        "dropout_rate": np.float64(model.dropout_rate),
        "W_f": model.W_f, "W_i": model.W_i, "W_o": model.W_o, "W_g": model.W_g,
        "b_f": model.b_f, "b_i": model.b_i, "b_o": model.b_o, "b_g": model.b_g,
        "W_y": model.W_y, "b_y": model.b_y,
        "meta_epochs": np.int64(model.meta.get("epochs_trained", 0)),
        "meta_lr": np.float64(model.meta.get("lr", 0.0)),
        "meta_seed": np.int64(model.meta.get("seed", model.meta.get("train_seed", 0))),
    }
    save_arrays(path, arrays)


def load_lstm(path: str) -> LstmModel:
    arrays = load_arrays(path)
    if int(arrays["version"]) != 1:
        raise ValueError(f"unsupported model version {int(arrays['version'])}")
    d, hidden = int(arrays["d"]), int(arrays["hidden"])
    W = np.concatenate([arrays["W_f"], arrays["W_i"], arrays["W_o"], arrays["W_g"]])
    b = np.concatenate([arrays["b_f"], arrays["b_i"], arrays["b_o"], arrays["b_g"]])
    return LstmModel(
        d, hidden, W, b, arrays["W_y"], arrays["b_y"],
        dropout_rate=float(arrays["dropout_rate"]),
        meta={"epochs_trained": int(arrays["meta_epochs"]), "lr": float(arrays["meta_lr"]),
              "seed": int(arrays["meta_seed"])},
    )
