"""Heads and losses: smoothed cross-entropy, supervised contrastive loss, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fslab import tensor as T
from fslab.tensor import Tensor


class DegenerateBatchError(ValueError):
    """No anchor in the batch has a same-class partner."""


class LabelError(ValueError):
    pass


@dataclass
class ClassificationHead:
    W: Tensor  # (num_classes, feat_dim)
    b: Tensor
    dropout: float = 0.0

    @classmethod
    def init(cls, num_classes, feat_dim, rng, dropout=0.0, std=0.02):
        return cls(
            Tensor(rng.normal(0.0, std, size=(num_classes, feat_dim)), requires_grad=True, name="head.cls.W"),
            Tensor(np.zeros(num_classes), requires_grad=True, name="head.cls.b"),
            dropout,
        )

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, feat, training=False, rng=None):
        return head_forward(self, feat, training, rng)


@dataclass
class ProjectionHead:
    W1: Tensor  # (hidden, feat_dim)
    b1: Tensor
    W2: Tensor  # (proj_dim, hidden)
    b2: Tensor

    @classmethod
    def init(cls, feat_dim, hidden, proj_dim, rng):
        w1 = rng.normal(0.0, 1.0 / np.sqrt(feat_dim), size=(hidden, feat_dim))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(proj_dim, hidden))
        return cls(
            Tensor(w1, requires_grad=True, name="head.proj.W1"),
            Tensor(np.zeros(hidden), requires_grad=True, name="head.proj.b1"),
            Tensor(w2, requires_grad=True, name="head.proj.W2"),
            Tensor(np.zeros(proj_dim), requires_grad=True, name="head.proj.b2"),
        )

    def parameters(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def __call__(self, feat, training=False, rng=None):
        return head_forward(self, feat, training, rng)


def default_projection_dim(n_shot):
    return 128 if n_shot <= 5 else 256


def head_forward(head, feat, training=False, rng=None):
    """Logits for a :class:`ClassificationHead`, unit vectors for a :class:`ProjectionHead`."""
    feat = T.as_tensor(feat)
    single = feat.ndim == 1
    if single:
        feat = T.reshape(feat, (1, feat.shape[0]))
    if isinstance(head, ClassificationHead):
        if feat.shape[-1] != head.W.shape[1]:
            raise T.DimensionError(f"head expects width {head.W.shape[1]}, got {feat.shape[-1]}")
        x = T.dropout(feat, head.dropout, rng, training=training and rng is not None)
        out = T.linear(x, T.transpose(head.W), head.b)
    else:
        if feat.shape[-1] != head.W1.shape[1]:
            raise T.DimensionError(f"projection head expects width {head.W1.shape[1]}, got {feat.shape[-1]}")
        h = T.relu(T.linear(feat, T.transpose(head.W1), head.b1))
        out = T.l2_normalize(T.linear(h, T.transpose(head.W2), head.b2))
    return T.reshape(out, (out.shape[-1],)) if single else out


def smoothed_targets(labels, num_classes, eps):
    labels = np.asarray(labels, dtype=int)
    if num_classes < 2:
        raise LabelError("cross-entropy needs at least 2 classes")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes})")
    q = np.full((labels.size, num_classes), eps / (num_classes - 1))
    q[np.arange(labels.size), labels] = 1.0 - eps
    return q


def cross_entropy_smoothed(logits, labels, eps=0.0):
    """Mean over rows of ``-sum_c q_c log softmax(logits)_c``.

    Target ``q`` puts ``1 - eps`` on the label and ``eps / (C - 1)`` elsewhere.
    ``logits`` may be ``(C,)`` with an int label or ``(B, C)`` with a label array.
    """
    logits = T.as_tensor(logits)
    if not 0.0 <= eps <= 0.5:
        raise ValueError(f"label smoothing must lie in [0, 0.5], got {eps}")
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(labels)
    if labels.size != logits.shape[0]:
        raise T.DimensionError(f"{labels.size} labels for {logits.shape[0]} rows")
    q = smoothed_targets(labels, logits.shape[1], eps)
    return (T.log_softmax(logits) * Tensor(q)).sum() * (-1.0 / logits.shape[0])


def supcon_loss(z, labels, temperature, include_self=False):
    """Supervised contrastive loss over unit-norm rows of ``z``.

    For each anchor with at least one positive, averages
    ``-log(exp(z_i.z_p/t) / sum_a exp(z_i.z_a/t))`` over its positives; the
    result is the mean over those anchors. The denominator runs over every
    other sample, or over the whole batch when ``include_self`` is set.
    """
    z = T.as_tensor(z)
    labels = np.asarray(labels)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = z.shape[0]
    if labels.shape != (n,):
        raise T.DimensionError(f"{labels.shape} labels for {n} projections")
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("supcon_loss expects unit-norm projections")
    eye = np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    counts = positives.sum(axis=1)
    valid = counts > 0
    if not valid.any():
        raise DegenerateBatchError("no anchor has a positive pair; use a stratified sampler")
    denom_mask = np.ones((n, n), dtype=bool) if include_self else ~eye
    logits = T.matmul(z, T.transpose(z)) * (1.0 / temperature)
    logprob = T.log_softmax(logits, mask=denom_mask)
    weights = np.zeros((n, n))
    weights[valid] = positives[valid] / counts[valid, None]
    return (logprob * Tensor(weights)).sum() * (-1.0 / valid.sum())


def hybrid_loss(ce, supcon, lam):
    """``ce + lam * supcon``."""
    if lam < 0:
        raise ValueError("contrastive weight must be non-negative")
    return ce + supcon * float(lam)
