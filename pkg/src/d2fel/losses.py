"""Cross-entropy, batch-hard triplet and center losses, summed over heads.

Each loss returns ``(value, grads...)`` with gradients of the batch-mean
loss so that the training loop can feed them straight into backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


class ProtocolError(ValueError):
    """Raised when a batch does not satisfy the sampling contract of a loss."""


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    triplet: float = 1.0
    center: float = 0.0005

    def __post_init__(self):
        if min(self.ce, self.triplet, self.center) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TripletBatchLayout:
    P: int
    K: int

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError("a P x K batch needs P >= 2 identities and K >= 2 instances")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


def cross_entropy(features, labels, classifier):
    """Mean ``-log softmax(features @ classifier.T)[label]``.

    Returns ``(loss, dfeatures, dclassifier)``.
    """
    features = np.atleast_2d(features)
    labels = np.atleast_1d(np.asarray(labels))
    C = classifier.shape[0]
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range for {C} classes")
    logits = features @ classifier.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = len(labels)
    loss = -log_p[np.arange(n), labels].mean()
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits @ classifier, dlogits.T @ features


def _pairwise_euclidean(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1)), diff


def triplet_batch_hard(features, labels, margin: float = 0.0,
                       layout: Optional[TripletBatchLayout] = None):
    """Batch-hard triplet loss with Euclidean distance.

    For every anchor the farthest positive and the nearest negative in the
    batch are selected; the loss is ``mean([margin + d_ap - d_an]_+)``.
    Returns ``(loss, dfeatures)``.
    """
    labels = np.asarray(labels)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if layout is not None and len(labels) != layout.batch_size:
        raise ProtocolError(f"batch of {len(labels)} does not match layout {layout.P}x{layout.K}")
    _, counts = np.unique(labels, return_counts=True)
    if counts.min() < 2 or len(counts) < 2:
        raise ProtocolError("every identity needs >= 2 instances and the batch >= 2 identities")
    n = len(labels)
    dist, diff = _pairwise_euclidean(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    d_ap_all = np.where(pos_mask, dist, -np.inf)
    d_an_all = np.where(~same, dist, np.inf)
    p_idx = d_ap_all.argmax(axis=1)
    n_idx = d_an_all.argmin(axis=1)
    rows = np.arange(n)
    d_ap, d_an = dist[rows, p_idx], dist[rows, n_idx]
    hinge = margin + d_ap - d_an
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())

    grad = np.zeros_like(features)
    w = active / n
    with np.errstate(invalid="ignore", divide="ignore"):
        u_ap = np.where(d_ap[:, None] > 0, diff[rows, p_idx] / d_ap[:, None], 0.0)
        u_an = np.where(d_an[:, None] > 0, diff[rows, n_idx] / d_an[:, None], 0.0)
    # d||a-p||/da = (a-p)/||a-p||, and the opposite sign lands on p
    np.add.at(grad, rows, w[:, None] * (u_ap - u_an))
    np.add.at(grad, p_idx, -w[:, None] * u_ap)
    np.add.at(grad, n_idx, w[:, None] * u_an)
    return loss, grad


def center_loss(features, labels, centroids, squared: bool = False):
    """Mean distance from each feature to its class centroid.

    ``squared=False`` uses the plain L2 norm; ``squared=True`` uses half
    the squared norm (the classical formulation).  Returns
    ``(loss, dfeatures, dcentroids)``.
    """
    features = np.atleast_2d(features)
    labels = np.atleast_1d(np.asarray(labels))
    C = centroids.shape[0]
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"no centroid for label; {C} centroids available")
    diff = features - centroids[labels]
    n = len(labels)
    if squared:
        loss = 0.5 * (diff ** 2).sum(axis=1).mean()
        dfeat = diff / n
    else:
        norm = np.sqrt((diff ** 2).sum(axis=1))
        loss = norm.mean()
        safe = np.where(norm > 0, norm, 1.0)
        dfeat = np.where(norm[:, None] > 0, diff / safe[:, None], 0.0) / n
    dcent = np.zeros_like(centroids)
    np.add.at(dcent, labels, -dfeat)
    return float(loss), dfeat, dcent


@dataclass
class LossBreakdown:
    total: float
    per_head: List[Dict[str, float]] = field(default_factory=list)
    dfeatures: List[np.ndarray] = field(default_factory=list)
    dclassifiers: List[np.ndarray] = field(default_factory=list)
    dcentroids: List[np.ndarray] = field(default_factory=list)


def total_loss(features: Sequence[np.ndarray], labels, classifiers: Sequence[np.ndarray],
               centroids: Sequence[np.ndarray], weights: LossWeights = LossWeights(),
               margin: float = 0.0, squared_center: bool = False) -> LossBreakdown:
    """Weighted sum of the three losses over every head, each head on its own features."""
    out = LossBreakdown(total=0.0)
    for feat, clf, cen in zip(features, classifiers, centroids):
        terms = {"ce": 0.0, "triplet": 0.0, "center": 0.0}
        dfeat = np.zeros_like(feat)
        dclf = np.zeros_like(clf)
        dcen = np.zeros_like(cen)
        if weights.ce:
            terms["ce"], df, dc = cross_entropy(feat, labels, clf)
            dfeat += weights.ce * df
            dclf += weights.ce * dc
        if weights.triplet:
            terms["triplet"], df = triplet_batch_hard(feat, labels, margin)
            dfeat += weights.triplet * df
        if weights.center:
            terms["center"], df, dc = center_loss(feat, labels, cen, squared_center)
            dfeat += weights.center * df
            dcen += weights.center * dc
        head_total = weights.ce * terms["ce"] + weights.triplet * terms["triplet"] + weights.center * terms["center"]
        terms["total"] = head_total
        out.total += head_total
        out.per_head.append(terms)
        out.dfeatures.append(dfeat)
        out.dclassifiers.append(dclf)
        out.dcentroids.append(dcen)
    return out
