"""Exact t-SNE (O(N^2) affinities, plain gradient descent with momentum)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0
    log_every: int = 50


@dataclass
class TsneResult:
    points: np.ndarray
    kl_history: list = field(default_factory=list)  # (iteration, KL(P||Q))

    @property
    def initial_kl(self) -> float:
        return self.kl_history[0][1]

    @property
    def final_kl(self) -> float:
        return self.kl_history[-1][1]


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_affinities(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-stochastic P(j|i) whose entropies match log(perplexity) (nats)."""
    n = d2.shape[0]
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()  # shift for stability; does not change the row distribution
        beta, lo, hi = 1.0, 0.0, math.inf
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            s = w.sum()
            h = math.log(s) + beta * float((di * w).sum()) / s
            if abs(h - target) < tol:
                break
            if h > target:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == math.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        p[i, np.arange(n) != i] = w / s
    return p


def joint_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    p = conditional_affinities(squared_distances(x), perplexity)
    p = (p + p.T) / (2.0 * p.shape[0])
    return np.maximum(p, 1e-12)


def _q(y):
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, np.maximum(num / num.sum(), 1e-12)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = ~np.eye(len(p), dtype=bool)
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def tsne(embeddings, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Embed rows of ``embeddings`` in 2-D. KL is recorded at iteration 0,
    every ``log_every`` iterations and at the end."""
    x = np.asarray(embeddings, dtype=float)
    n = x.shape[0]
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-d array")
    if n > 5000:
        raise ValueError("exact t-SNE is limited to 5000 points")
    if cfg.perplexity <= 0 or n < 3 * cfg.perplexity + 1:
        raise ValueError(f"perplexity {cfg.perplexity} infeasible for {n} points (need N >= 3*perplexity + 1)")

    p = joint_affinities(x, cfg.perplexity)
    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    history = [(0, kl_divergence(p, _q(y)[1]))]

    for it in range(cfg.iterations):
        exaggerate = it < cfg.exaggeration_iters
        pe = p * cfg.exaggeration if exaggerate else p
        momentum = 0.5 if exaggerate else 0.8
        num, q = _q(y)
        w = (pe - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - cfg.learning_rate * gains * grad
        y = y + velocity
        y -= y.mean(axis=0)
        done = it + 1
        if done % cfg.log_every == 0 or done == cfg.iterations:
            history.append((done, kl_divergence(p, _q(y)[1])))
    return TsneResult(y, history)


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances."""
    labels = np.asarray(labels)
    d = np.sqrt(squared_distances(np.asarray(points, dtype=float)))
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two clusters")
    scores = np.zeros(len(labels))
    for i in range(len(labels)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, labels == c].mean() for c in classes if c != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())
