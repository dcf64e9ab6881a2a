"""Soft thresholding and thresholding with support selection.

All functions accept a single vector or a 2-D batch with one vector per row;
for batches ``theta`` and ``p`` may be scalars or one value per row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ThresholdSpec:
    theta: float
    p: int

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if self.p < 0:
            raise ValueError("p must be nonnegative")


def soft_threshold(v, theta):
    """``sign(v) * max(0, |v| - theta)``, entrywise."""
    v = np.asarray(v, dtype=np.float64)
    theta = _per_row(theta, v)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def hard_threshold(v, theta):
    v = np.asarray(v, dtype=np.float64)
    theta = _per_row(theta, v)
    return np.where(np.abs(v) > theta, v, 0.0)


def top_p_support(v, p) -> np.ndarray:
    """Sorted indices of the ``p`` largest-magnitude entries of a vector.

    Ties are broken towards the lower index.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("top_p_support takes a single vector")
    p = int(p)
    if not 0 <= p <= v.size:
        raise ValueError(f"p={p} outside [0, {v.size}]")
    order = np.argsort(-np.abs(v), kind="stable")
    return np.sort(order[:p])


def top_p_mask(V, p) -> np.ndarray:
    """Boolean mask of :func:`top_p_support` for every row of ``V``."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    rows, n = V.shape
    p = np.broadcast_to(np.asarray(p, dtype=np.int64), (rows,))
    if np.any(p < 0) or np.any(p > n):
        raise ValueError("p outside [0, n]")
    mask = np.zeros(V.shape, dtype=bool)
    live = np.flatnonzero(p > 0)
    if live.size == 0:
        return mask
    a = np.abs(V[live])
    pl = p[live]
    # p-th largest magnitude per row, then resolve ties at that value by index
    kth = -np.sort(-a, axis=1)[np.arange(live.size), pl - 1]
    above = a > kth[:, None]
    at = a == kth[:, None]
    room = pl - above.sum(axis=1)
    mask[live] = above | (at & (np.cumsum(at, axis=1) <= room[:, None]))
    return mask


def support_select_threshold(v, theta, p):
    """Thresholding that trusts the ``p`` largest entries.

    Entries with ``|v_i| <= theta`` become zero. Of the rest, those among the
    ``p`` largest magnitudes pass unchanged and the others are
    soft-thresholded. ``p = 0`` gives soft thresholding, ``p = n`` hard
    thresholding.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = np.atleast_2d(v)
    th = _per_row(theta, V)
    keep = top_p_mask(V, p)
    big = np.abs(V) > th
    out = np.where(big, np.where(keep, V, V - np.sign(V) * th), 0.0)
    return out[0] if single else out


def apply_spec(v, spec: ThresholdSpec):
    return support_select_threshold(v, spec.theta, spec.p)


def _per_row(value, v):
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 1 and v.ndim == 2:
        return value[:, None]
    return value
