"""Training objectives with analytic gradients.

All three losses use batch-mean reduction and return a :class:`LossOutput`
whose ``grad`` is the derivative of ``value`` with respect to the primary
input (logits, the three embedding blocks, or the contrastive embeddings).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from gslab.errors import FiniteValueError

DEFAULT_TEMPERATURE = 0.07
DEFAULT_MARGIN = 1.0


@dataclass
class LossOutput:
    value: float
    grad: Union[np.ndarray, tuple]

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FiniteValueError(f"loss value is not finite: {self.value}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> LossOutput:
    """Mean of ``-log softmax(logits)[label]``; grad is ``(softmax - onehot)/N``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects (N, K) logits and N labels, got {logits.shape} / {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    value = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return LossOutput(value, grad / n)


def triplet_loss(anchor, positive, negative, margin: float = DEFAULT_MARGIN) -> LossOutput:
    """Mean hinge ``max(0, |a-p| - |a-n| + margin)`` with Euclidean distances.

    ``grad`` is the tuple ``(d_anchor, d_positive, d_negative)``. At a hinge
    point or a zero distance the subgradient 0 is used.
    """
    a, p, ng = (np.asarray(v, dtype=float) for v in (anchor, positive, negative))
    if a.ndim != 2 or a.shape != p.shape or a.shape != ng.shape:
        raise ValueError(f"anchor/positive/negative shapes differ: {a.shape}, {p.shape}, {ng.shape}")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    n = a.shape[0]
    diff_p, diff_n = a - p, a - ng
    d_p = np.sqrt((diff_p ** 2).sum(axis=1))
    d_n = np.sqrt((diff_n ** 2).sum(axis=1))
    hinge = d_p - d_n + margin
    active = hinge > 0
    value = float(np.where(active, hinge, 0.0).mean())

    with np.errstate(invalid="ignore", divide="ignore"):
        unit_p = np.where(d_p[:, None] > 0, diff_p / d_p[:, None], 0.0)
        unit_n = np.where(d_n[:, None] > 0, diff_n / d_n[:, None], 0.0)
    w = active[:, None] / n
    g_pos = -unit_p * w
    g_neg = unit_n * w
    g_anchor = -(g_pos + g_neg)
    return LossOutput(value, (g_anchor, g_pos, g_neg))


@dataclass
class ContrastiveBatchLayout:
    """2N embeddings laid out as interleaved pairs ``[a1, b1, a2, b2, ...]``."""

    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] % 2:
            raise ValueError(f"expected (2N, D) embeddings, got {self.embeddings.shape}")

    @property
    def pairs(self) -> int:
        return self.embeddings.shape[0] // 2

    @property
    def partner(self) -> np.ndarray:
        return np.arange(self.embeddings.shape[0]) ^ 1


def info_nce(layout: ContrastiveBatchLayout, temperature: float = DEFAULT_TEMPERATURE) -> LossOutput:
    """NT-Xent over cosine similarities, averaged over all 2N anchors.

    For anchor i the positive is ``partner(i)`` and the denominator sums over
    every j != i. The gradient is taken w.r.t. the unnormalised embeddings.
    """
    if not isinstance(layout, ContrastiveBatchLayout):
        layout = ContrastiveBatchLayout(layout)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if layout.pairs < 2:
        raise ValueError("InfoNCE needs at least two pairs so every anchor has a negative")
    z = layout.embeddings
    m = z.shape[0]
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if (norms == 0).any():
        raise FiniteValueError("zero-length embedding cannot be normalised")
    u = z / norms
    logits = (u @ u.T) / temperature
    np.fill_diagonal(logits, -np.inf)
    logp = log_softmax(logits)
    rows, pos = np.arange(m), layout.partner
    value = float(-logp[rows, pos].mean())

    # d(value)/d(logits) = (softmax - onehot(partner)) / m, diagonal excluded
    g = np.exp(logp)
    g[rows, pos] -= 1.0
    g /= m
    # logits = S / t with S symmetric in u, so dS = (g + g^T) / t
    du = ((g + g.T) @ u) / temperature
    dz = (du - u * (du * u).sum(axis=1, keepdims=True)) / norms
    return LossOutput(value, dz)
