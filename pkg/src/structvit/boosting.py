"""Batch-level losses over the assembled image features.

Features are the concatenated cls vectors of the last three encoder
layers (or a single cls vector when multi-level fusion is off). The
classifier head gives softmax predictions for cross-entropy. The
contrastive term pulls same-class features together and pushes only the
hard negatives apart: a negative pair contributes in proportion to
max(0, margin + its similarity - the anchor's average positive
similarity), so easy negatives are filtered out entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

PROB_FLOOR = 1e-12


@dataclass
class LossReport:
    """Scalar summary of one training batch."""

    loss_ce: float
    loss_cl: float
    loss_total: float
    n_filtered_negatives: int
    accuracy_batch: float


def classify(features: list[Tensor], head_w: Tensor, head_b: Tensor):
    """Stack per-image feature rows, apply the linear head, softmax rows.

    Returns (logits, pred), both (B, C); every pred row is a probability
    vector.
    """
    if head_w.shape[1] < 2:
        raise ContractError("classifier needs at least 2 classes")
    rows = [ad.reshape(f, (1, f.size)) for f in features]
    logits = ad.add(ad.matmul(ad.concat_rows(rows), head_w), head_b)
    return logits, ad.softmax_rows(logits)


def cross_entropy(pred: Tensor, labels) -> Tensor:
    """Mean over the batch of -log(pred[label]), floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = pred.shape
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")
    if (labels < 0).any() or (labels >= c).any():
        raise ContractError(f"label outside [0, {c})")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.mul(ad.log(ad.clamp_min(pred, PROB_FLOOR)), Tensor(onehot))
    return ad.mul_scalar(ad.sum_all(picked), -1.0 / b)


def contrastive_loss(features: list[Tensor], labels, alpha: float):
    """Hard-negative-filtered contrastive loss over one batch.

    For each ordered pair (i, j), i != j: a positive pair (same label)
    contributes 1 - sim; a negative pair contributes indicator * sim with
    indicator = max(0, alpha + sim - avg_pos(i)), where avg_pos(i) is the
    mean cosine similarity of anchor i to its positives. Anchors with no
    positive in the batch use avg_pos = 0, keeping the hard-negative
    pressure instead of dividing by zero. The double sum is divided by
    the squared batch size.

    Returns (loss tensor, count of filtered ordered negative pairs).
    Summation order is fixed (anchors ascending, partners ascending) so
    runs are reproducible.
    """
    b = len(features)
    if b < 2:
        raise ContractError(f"contrastive loss needs a batch of >= 2, got {b}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")

    sims: dict[tuple[int, int], Tensor] = {}
    for i in range(b):
        for j in range(i + 1, b):
            s = ad.cosine_similarity(features[i], features[j])
            sims[i, j] = s
            sims[j, i] = s

    avg_pos: list[Tensor | None] = []
    for i in range(b):
        pos = [sims[i, j] for j in range(b) if j != i and labels[j] == labels[i]]
        if not pos:
            avg_pos.append(None)
            continue
        total = pos[0]
        for s in pos[1:]:
            total = ad.add(total, s)
        avg_pos.append(ad.mul_scalar(total, 1.0 / len(pos)))

    n_filtered = 0
    terms = []
    for i in range(b):
        for j in range(b):
            if j == i:
                continue
            s = sims[i, j]
            if labels[j] == labels[i]:
                terms.append(ad.add_scalar(ad.mul_scalar(s, -1.0), 1.0))
            else:
                shifted = ad.add_scalar(s, alpha)
                raw = shifted if avg_pos[i] is None else ad.sub(shifted, avg_pos[i])
                if raw.item() <= 0.0:
                    n_filtered += 1
                terms.append(ad.mul(ad.relu(raw), s))

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul_scalar(total, 1.0 / (b * b)), n_filtered


def total_loss(loss_ce: Tensor, loss_cl: Tensor) -> Tensor:
    """Plain sum of the two objectives; no weighting coefficient."""
    return ad.add(loss_ce, loss_cl)


def batch_accuracy(pred: Tensor, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    return float((pred.data.argmax(axis=1) == labels).mean())
