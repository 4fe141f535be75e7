"""Exact t-SNE on a precomputed squared-distance matrix.

Small-N implementation (hundreds of points): full O(N^2) affinities and
gradient, early exaggeration, momentum with adaptive gains.  Deterministic
for a fixed seed.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def _conditional_probs(sq_distances: np.ndarray, perplexity: float) -> np.ndarray:
    """Per-row Gaussian affinities calibrated to the target perplexity by
    bisection on the precision."""
    n = sq_distances.shape[0]
    target_entropy = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(sq_distances[i], i)
        lo, hi = 1e-20, 1e20
        beta = 1.0
        for _ in range(64):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                beta = lo = lo * 0.5
                continue
            p = w / total
            entropy = -np.sum(p * np.log(np.maximum(p, _EPS)))
            if entropy > target_entropy:
                lo = beta
            else:
                hi = beta
            beta = 2 * beta if hi >= 1e20 else 0.5 * (lo + hi)
        row = np.exp(-sq_distances[i] * beta)
        row[i] = 0.0
        P[i] = row / max(row.sum(), _EPS)
    return P


def tsne(sq_distances: np.ndarray, *, perplexity: float, iterations: int = 1000,
         seed: int = 0, learning_rate: float = 200.0,
         early_exaggeration: float = 12.0, exaggeration_iters: int = 250) -> np.ndarray:
    """Embed points into 2-D; coordinates normalized per axis to [-1, 1]."""
    sq = np.asarray(sq_distances, dtype=np.float64)
    n = sq.shape[0]
    if sq.shape != (n, n):
        raise ValueError("squared-distance matrix must be square")
    if not 0 < perplexity < n:
        raise ValueError("perplexity must be in (0, point count)")

    cond = _conditional_probs(sq, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, _EPS)

    rng = np.random.Generator(np.random.PCG64(seed))
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)

    for it in range(iterations):
        factor = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8

        diff = Y[:, None, :] - Y[None, :, :]
        sq_y = np.sum(diff * diff, axis=2)
        inv = 1.0 / (1.0 + sq_y)
        np.fill_diagonal(inv, 0.0)
        Q = np.maximum(inv / max(inv.sum(), _EPS), _EPS)

        PQ = (factor * P - Q) * inv
        grad = 4.0 * np.einsum("ij,ijk->ik", PQ, diff)

        sign_match = np.sign(grad) == np.sign(velocity)
        gains = np.where(sign_match, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)

    lo, hi = Y.min(axis=0), Y.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return 2.0 * (Y - lo) / span - 1.0
