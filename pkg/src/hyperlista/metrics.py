"""NMSE in decibels and its batch aggregation conventions."""
from __future__ import annotations

import numpy as np

NMSE_FLOOR_DB = -320.0
NMSE_CEIL_DB = 100.0
CONVENTIONS = ("ratio", "mean_db")


def _clamp_db(db):
    return np.clip(db, NMSE_FLOOR_DB, NMSE_CEIL_DB)


def nmse_ratio(x_hat, x_star) -> np.ndarray:
    """``||x_hat - x*||^2 / ||x*||^2`` per row (or for a single vector)."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    ref = np.sum(x_star * x_star, axis=-1)
    if np.any(ref == 0.0):
        raise ValueError("NMSE undefined for an all-zero ground truth")
    diff = x_hat - x_star
    with np.errstate(over="ignore", invalid="ignore"):
        err = np.sum(diff * diff, axis=-1)
    # overflowed or NaN iterates count as the worst representable error
    return np.where(np.isfinite(err), err, np.inf) / ref


def ratio_to_db(ratio):
    ratio = np.asarray(ratio, dtype=np.float64)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(ratio)
    return _clamp_db(db)


def nmse_db(x_hat, x_star):
    """``10 log10(||x_hat - x*||^2 / ||x*||^2)`` clamped to [-320, 100] dB.

    Works on single vectors (returns a float) or row batches (returns one
    value per row).
    """
    db = ratio_to_db(nmse_ratio(x_hat, x_star))
    return float(db) if np.ndim(db) == 0 else db


def aggregate_db(ratios, convention: str = "ratio") -> float:
    """Collapse per-instance NMSE ratios into one dB figure.

    ``"ratio"`` takes the dB of the mean ratio, ``"mean_db"`` the mean of
    the per-instance dB values.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.size == 0:
        raise ValueError("no instances to aggregate")
    if convention == "ratio":
        return float(ratio_to_db(np.mean(ratios)))
    if convention == "mean_db":
        return float(np.mean(ratio_to_db(ratios)))
    raise ValueError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
