"""Pair and triplet losses on unit embeddings.

Every distance here is the squared L2 norm over the full embedding.
Functions accept numpy arrays or torch tensors, single vectors or batches
of rows; the hinge is applied per row.
"""

import numpy as np
import torch


def squared_distance(x, y):
    d = x - y
    return (d * d).sum(-1)


def _hinge(x):
    if isinstance(x, torch.Tensor):
        return x.clamp(min=0)
    return np.maximum(x, 0.0)


def positive_pair_loss(p, q):
    """Squared distance between same-subject embeddings (per row)."""
    return squared_distance(p, q)


def negative_pair_loss(p, q, beta: float):
    """Shortfall of a different-subject pair's squared distance below ``beta``."""
    return _hinge(beta - squared_distance(p, q))


def triplet_loss(a, p, n, beta: float):
    """``max(0, |a-p|^2 - |a-n|^2 + beta)`` per triplet row."""
    return _hinge(squared_distance(a, p) - squared_distance(a, n) + beta)


def mean_positive_pair_loss(p, q):
    return positive_pair_loss(p, q).mean()


def mean_negative_pair_loss(p, q, beta: float):
    return negative_pair_loss(p, q, beta).mean()


def batch_triplet_loss(a, p, n, beta: float):
    """Mean triplet loss over the rows of a batch."""
    return triplet_loss(a, p, n, beta).mean()
