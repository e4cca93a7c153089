"""Local/global mutual-information objective with attribute corruption."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def readout(embeddings):
    if embeddings.shape[0] < 1:
        raise ad.ShapeError("readout: empty batch")
    return ad.sigmoid(ad.mean_rows(embeddings))


def corruption_permutation(num_nodes, seed):
    """A non-identity permutation of ``range(num_nodes)``."""
    if num_nodes < 2:
        raise ValueError("corruption needs at least two nodes")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(num_nodes)
        if np.any(perm != np.arange(num_nodes)):
            return perm


def corrupt(attributes, seed):
    """Row-shuffled copy of the attribute matrix."""
    attributes = np.asarray(attributes)
    return attributes[corruption_permutation(attributes.shape[0], seed)]


def discriminate(e, w_b, r):
    return ad.sigmoid(ad.bilinear(e, w_b, r))


def contrastive_loss(pos_local, pos_global, neg_local, neg_global, w_b):
    """Four-term JSD loss for one graph's batch.

    Summaries come from the uncorrupted embeddings only.  The terms
    log D and log(1 - D) are evaluated as log-sigmoid of the bilinear score
    (and of its negation), which keeps a gradient when D saturates.
    """
    n = pos_local.shape[0]
    if not (pos_global.shape[0] == neg_local.shape[0] == neg_global.shape[0] == n):
        raise ad.ShapeError("contrastive_loss: all embedding blocks need the same row count")
    r_local = readout(pos_local)
    r_global = readout(pos_global)
    terms = [
        ad.log_sigmoid(ad.bilinear(pos_local, w_b, r_global)),
        ad.log_sigmoid(ad.bilinear(pos_global, w_b, r_local)),
        ad.log_sigmoid(-ad.bilinear(neg_local, w_b, r_global)),
        ad.log_sigmoid(-ad.bilinear(neg_global, w_b, r_local)),
    ]
    acc = ad.total(terms[0])
    for t in terms[1:]:
        acc = acc + ad.total(t)
    return ad.scalar_mul(acc, -1.0 / (4 * n))
