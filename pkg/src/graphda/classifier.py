"""Cosine-similarity node classifier and its two losses."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def predict(e, w_c, temperature):
    """Softmax over temperature-scaled cosine logits ``W_c^T e / |e|``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = ad.matmul(ad.l2_normalize(e), w_c)
    return ad.softmax(ad.scalar_mul(logits, 1.0 / temperature))


def nll(probs, labels):
    """Mean negative log-likelihood of ``labels`` under row-wise ``probs``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != probs.shape[0]:
        raise ValueError("one label per prediction row is required")
    if np.any(labels < 0):
        raise ValueError("cross-entropy needs known labels for every scored node")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = ad.sum_last(ad.mul(probs, ad.constant(onehot)))
    return ad.scalar_mul(ad.mean(ad.safe_log(picked)), -1.0)


def cross_entropy(source_probs, source_labels, target_probs=None, target_labels=None):
    loss = nll(source_probs, source_labels)
    if target_probs is not None and target_probs.shape[0] > 0:
        loss = loss + nll(target_probs, target_labels)
    return loss


def entropy_loss(probs):
    """Mean Shannon entropy (nats) of the rows of ``probs``."""
    plogp = ad.mul(probs, ad.safe_log(probs))
    return ad.scalar_mul(ad.mean(ad.sum_last(plogp)), -1.0)


def row_entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, ad.EPS, None)
    return -(probs * np.log(p)).sum(axis=-1)
