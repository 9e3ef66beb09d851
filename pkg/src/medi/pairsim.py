"""Pairwise pseudo-labels from ranking statistics and the pair BCE loss.

Two embeddings count as "same class" when the index sets of their top-k
magnitude dimensions coincide. Those binary labels supervise a binary
cross-entropy over classifier-output inner products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ConfigError, NumericError

CLAMP_EPS = 1e-7


@dataclass
class PairLabelMatrix:
    s: np.ndarray  # (N, N) uint8, symmetric, unit diagonal
    topk: int

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.uint8)
        n = self.s.shape[0]
        if self.s.shape != (n, n):
            raise ConfigError("pair label matrix must be square")


def default_topk(embed_dim):
    """10 when the embedding is wide enough, else half the width."""
    return 10 if embed_dim >= 10 else max(1, embed_dim // 2)


def topk_index_sets(Z, topk, ordered=False):
    """Per-row indices of the top-k |z| dimensions.

    Magnitude ties break toward the lower dimension index. Rows are sorted
    ascending unless ``ordered`` keeps rank order (ablation mode).
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    n, h = Z.shape
    if topk > h:
        raise ConfigError(f"topk={topk} exceeds embedding width {h}")
    if topk < 1:
        raise ConfigError("topk must be at least 1")
    if not np.isfinite(Z).all():
        raise NumericError("embeddings contain non-finite values")
    # lexsort: primary key -|z| (descending magnitude), tie key dimension index
    cols = np.broadcast_to(np.arange(h), (n, h))
    order = np.lexsort((cols, -np.abs(Z)), axis=1)
    picked = order[:, :topk]
    if ordered:
        return picked.astype(np.int64)
    return np.sort(picked, axis=1).astype(np.int64)


def ranking_similarity(Z, topk, ordered=False):
    """PairLabelMatrix with s_ij = 1 iff top-k index sets match."""
    sets = topk_index_sets(Z, topk, ordered=ordered)
    return PairLabelMatrix(kernels.pair_rows_equal(sets), topk)


def pair_scores_tensors(probs):
    """Same-class scores as inner products of probability rows."""
    return ad.matmul(probs, ad.transpose(probs))


def pair_scores(probs, normalized=False):
    """Score matrix over probability rows; optionally cosine-normalized."""
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    S = P @ P.T
    if normalized:
        norms = np.linalg.norm(P, axis=1, keepdims=True)
        S = S / np.clip(norms @ norms.T, 1e-12, None)
    return S


def pair_bce_tensors(scores, labels, eps=CLAMP_EPS):
    """Mean binary cross-entropy between score matrix and 0/1 labels."""
    s = ad.Tensor(np.asarray(labels, dtype=np.float64))
    p = ad.clip(scores, eps, 1.0 - eps)
    pos = ad.mul(s, ad.log(p))
    negt = ad.mul(ad.sub(ad.Tensor(1.0), s), ad.log(ad.sub(ad.Tensor(1.0), p)))
    return ad.neg(ad.tmean(ad.add(pos, negt)))


def pair_bce_loss(scores, labels, eps=CLAMP_EPS):
    """Scalar pair BCE; scores are clamped to [eps, 1-eps] before the log."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise NumericError("scores contain non-finite values")
    s = labels.s if isinstance(labels, PairLabelMatrix) else np.asarray(labels)
    if s.shape != scores.shape:
        raise ConfigError(f"label shape {s.shape} != score shape {scores.shape}")
    with ad.no_grad():
        out = pair_bce_tensors(ad.Tensor(scores), s, eps=eps)
    return float(out.data)
