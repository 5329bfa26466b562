"""The combined identification + verification objective.

Identification is softmax cross-entropy over subject ids; verification is a
margin-hinge contrastive cost over embedding pairs sampled online within each
minibatch (pairs never cross batches). The two are balanced by a weight alpha
applied to the mean contrastive term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float
    margin: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")


@dataclass
class PairBatch:
    """A minibatch plus the genuine/impostor pair indices sampled inside it."""

    images: list[np.ndarray]
    labels: list[int]
    pairs: list[tuple[int, int, bool]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must align")
        n = len(self.labels)
        for i, j, genuine in self.pairs:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"pair index ({i}, {j}) outside batch of {n}")
            if genuine != (self.labels[i] == self.labels[j]):
                raise ValueError(f"pair ({i}, {j}) genuine flag disagrees"
                                 " with labels")


def softmax_loss(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against `label`, max-stabilized.

    Returns (loss, gradient); the gradient is softmax(logits) - one_hot(label)
    and sums to zero over classes.
    """
    c = logits.shape[0]
    if not 0 <= label < c:
        raise ValueError(f"label {label} out of range for {c} classes")
    shifted = logits - np.max(logits)
    exp = np.exp(shifted)
    z = np.sum(exp)
    loss = float(np.log(z) - shifted[label])
    grad = exp / z
    grad[label] -= 1.0
    return loss, grad


def contrastive_loss(e1: np.ndarray, e2: np.ndarray, genuine: bool,
                     margin: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Pull genuine pairs together, push impostors past `margin`.

    Genuine: 0.5 * ||e1 - e2||^2.  Impostor: 0.5 * max(0, margin - d)^2 with
    d = ||e1 - e2||; at d = 0 the (sub)gradient 0 is used.
    """
    if e1.shape != e2.shape:
        raise ShapeError("embedding lengths differ", expected=e1.shape,
                         actual=e2.shape)
    diff = e1 - e2
    if genuine:
        loss = 0.5 * float(diff @ diff)
        return loss, diff.copy(), -diff
    d = float(np.sqrt(diff @ diff))
    if d >= margin:
        zero = np.zeros_like(e1)
        return 0.0, zero, zero.copy()
    loss = 0.5 * (margin - d) ** 2
    if d == 0.0:
        zero = np.zeros_like(e1)
        return loss, zero, zero.copy()
    g = -(margin - d) / d * diff
    return loss, g, -g


@dataclass
class CombinedLoss:
    total: float
    softmax_mean: float
    contrastive_mean: float
    grad_logits: list[np.ndarray]
    grad_embeddings: list[np.ndarray]


def combined_loss(logits: list[np.ndarray], labels: list[int],
                  embeddings: list[np.ndarray],
                  pairs: list[tuple[int, int, bool]],
                  config: ObjectiveConfig) -> CombinedLoss:
    """Mean softmax loss + alpha * mean contrastive loss, with gradients.

    Gradients carry the batch/pair averaging and the alpha weight, so they can
    be accumulated directly. With alpha = 0 (or no pairs) this is exactly
    softmax-only training.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    grad_logits = []
    soft_total = 0.0
    for lg, lb in zip(logits, labels):
        loss, g = softmax_loss(lg, lb)
        soft_total += loss
        grad_logits.append(g / n)
    soft_mean = soft_total / n

    grad_emb = [np.zeros_like(e) for e in embeddings]
    con_mean = 0.0
    if pairs:
        scale = config.alpha / len(pairs)
        total = 0.0
        for i, j, genuine in pairs:
            loss, g1, g2 = contrastive_loss(embeddings[i], embeddings[j],
                                            genuine, config.margin)
            total += loss
            grad_emb[i] += scale * g1
            grad_emb[j] += scale * g2
        con_mean = total / len(pairs)
    return CombinedLoss(soft_mean + config.alpha * con_mean, soft_mean,
                        con_mean, grad_logits, grad_emb)


def sample_pairs(labels: list[int], seed, positives_per_batch: int,
                 negatives_per_batch: int) -> list[tuple[int, int, bool]]:
    """Sample genuine/impostor index pairs uniformly without replacement from
    the within-batch eligible sets; deterministic per seed.

    Degenerate batches yield fewer (possibly zero) pairs, never an error.
    """
    if not labels:
        raise ValueError("empty batch")
    lab = np.asarray(labels)
    n = len(lab)
    iu, ju = np.triu_indices(n, k=1)
    same = lab[iu] == lab[ju]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    rng = np.random.default_rng(seed)
    picked = []
    for pool, want, genuine in ((pos, positives_per_batch, True),
                                (neg, negatives_per_batch, False)):
        k = min(want, pool.size)
        if k > 0:
            sel = rng.choice(pool, size=k, replace=False)
            picked.extend((int(iu[s]), int(ju[s]), genuine) for s in sel)
    return picked
