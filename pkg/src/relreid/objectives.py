"""Training objectives: identity cross-entropy and batch-hard triplet.

The cross-entropy supervises every feature in the person representation
through its own classifier; the triplet term acts on the concatenated
representation, selecting per anchor the farthest same-identity and the
nearest different-identity embedding inside the batch. The combined loss is
``triplet + ce_weight * cross_entropy``; both terms are sums over the
batch, not means.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .head import Affine, _init_affine
from .tensor import (
    Tensor,
    concat,
    constant,
    cross_entropy_logits,
    linear,
    pairwise_distances,
    reduce_max,
    reduce_sum,
    relu,
    scale,
)


class ClassifierBank:
    """One affine classifier (c -> K logits) per feature in the representation."""

    def __init__(self, embed_dim: int, n_classes: int, n_features: int,
                 rng: np.random.Generator):
        if n_classes < 2:
            raise ConfigError(f"classifier bank needs at least 2 identities, got {n_classes}")
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.items: list[Affine] = [_init_affine(rng, embed_dim, n_classes)
                                    for _ in range(n_features)]

    def __len__(self):
        return len(self.items)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, aff in enumerate(self.items):
            out.append((f"cls.{i}.w", aff.w))
            out.append((f"cls.{i}.b", aff.b))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        expected = dict(self.named_parameters())
        if set(arrays) != set(expected):
            raise ConfigError("classifier bank names do not match the checkpoint")
        for name, value in arrays.items():
            if expected[name].data.shape != value.shape:
                raise ConfigError(
                    f"classifier {name}: shape {value.shape} != {expected[name].data.shape}")
            expected[name].data = value.astype(np.float32)


def cross_entropy_loss(features: list[Tensor], labels: np.ndarray,
                       bank: ClassifierBank) -> Tensor:
    """Summed softmax cross-entropy over all images and all features.

    Each feature goes through its own classifier; the per-feature logit
    blocks are stacked row-wise so one fused call scores them all.
    """
    if len(features) != len(bank):
        raise ConfigError(
            f"representation has {len(features)} features, bank has {len(bank)} classifiers")
    labels = np.asarray(labels, dtype=np.int64)
    logits = [linear(feat, aff.w, aff.b) for feat, aff in zip(features, bank.items)]
    if len(logits) == 1:
        return cross_entropy_logits(logits[0], labels)
    return cross_entropy_logits(concat(logits, axis=0), np.tile(labels, len(logits)))


def batch_hard_triplet(embeddings: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    """Batch-hard triplet loss with plain (unsquared) Euclidean distances.

    Every image is an anchor once; its positive set is all same-identity
    images in the batch (itself included, at distance zero) and its
    negative set is everything else. The hinge ``[margin + hardest_pos -
    hardest_neg]_+`` is summed over anchors.
    """
    labels = np.asarray(labels)
    n = embeddings.data.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    same = labels[:, None] == labels[None, :]
    if same.all():
        raise ValueError("triplet loss needs at least 2 identities in the batch")

    dist = pairwise_distances(embeddings)
    # Push masked-out entries far below / above every real distance so the
    # max/min selections never see them. The offsets are constants, so the
    # gradient still flows only through the selected distances.
    big = float(dist.data.max()) + margin + 1.0
    pos_off = constant(np.where(same, 0.0, -big).astype(dist.data.dtype))
    neg_off = constant(np.where(same, -big, 0.0).astype(dist.data.dtype))

    hardest_pos = reduce_max(dist + pos_off, axis=1)
    hardest_neg = scale(reduce_max(scale(dist, -1.0) + neg_off, axis=1), -1.0)
    margins = constant(np.full(n, margin, dtype=dist.data.dtype))
    return reduce_sum(relu(hardest_pos - hardest_neg + margins))


def combined_loss(features: list[Tensor], embeddings: Tensor, labels: np.ndarray,
                  bank: ClassifierBank, margin: float, ce_weight: float,
                  ) -> tuple[Tensor, dict[str, float]]:
    """Triplet plus weighted cross-entropy; per-term values for logging."""
    triplet = batch_hard_triplet(embeddings, labels, margin)
    ce = cross_entropy_loss(features, labels, bank)
    total = triplet + scale(ce, ce_weight)
    return total, {"triplet": float(triplet.data), "cross_entropy": float(ce.data),
                   "total": float(total.data)}
