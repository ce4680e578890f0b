"""
Grouped FDR - Step-Up Engine
The crossing-point functional I(h), weighted rejection counting G_w and the
weighted (WBH) / multi-weighted (MWBH) Benjamini-Hochberg procedures.

Every threshold is alpha * u * w_g, compared with <=; a zero weight never
rejects (p / 0 = inf).
"""

import logging

import numpy as np

from models import (
    CostVector, GroupedPValues, MonotonicityError, RejectionSet,
    StepUpOutcome, WeightFunction, WeightVector,
)

logger = logging.getLogger(__name__)


def grid(m: int) -> np.ndarray:
    """u = k/m for k = 0..m."""
    return np.arange(m + 1) / m


def threshold(u, alpha: float, w):
    """alpha*u*w_g, always evaluated as (u*alpha)*w so scalar and grid paths round alike."""
    return (u * alpha) * w


def _last_crossing(above: np.ndarray) -> int:
    hits = np.flatnonzero(above[1:])
    return int(hits[-1]) + 1 if hits.size else 0


def crossing_point(h) -> float:
    """I(h) = largest grid point u = k/m with h(u) >= u, or 0.

    `h` holds the values of a nondecreasing function on k/m, k = 0..m, with h(0) = 0.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim != 1 or h.size < 2:
        raise ValueError("h must be given on a grid of at least two points")
    if h[0] != 0.0:
        raise ValueError("h(0) must be 0")
    if np.any(np.diff(h) < 0):
        raise MonotonicityError("crossing_point needs a nondecreasing grid function")
    m = h.size - 1
    return _last_crossing(h >= grid(m)) / m


# ─── Counting ────────────────────────────────────────────

def rejection_counts(data: GroupedPValues, w: WeightVector, alpha: float) -> np.ndarray:
    """m * G_w(k/m) for k = 0..m."""
    u = grid(data.m)
    counts = np.zeros(data.m + 1, dtype=int)
    for sorted_p, w_g in zip(data.sorted_groups, w.w):
        if w_g > 0:
            counts += np.searchsorted(sorted_p, threshold(u, alpha, w_g), side="right")
    return counts


def g_hat(data: GroupedPValues, w: WeightVector, u: float, alpha: float) -> float:
    """G_w(u) = m^-1 #{(g,i): p_gi <= alpha*u*w_g}."""
    total = 0
    for sorted_p, w_g in zip(data.sorted_groups, w.w):
        if w_g > 0:
            total += int(np.searchsorted(sorted_p, threshold(u, alpha, w_g), side="right"))
    return total / data.m


def weight_function_counts(data: GroupedPValues, W: WeightFunction, alpha: float) -> np.ndarray:
    """m * G_W(k/m) for a weight function, k = 0..m."""
    if W.m != data.m or W.weights.shape[1] != data.G:
        raise ValueError(f"weight function shape {W.weights.shape} does not fit m={data.m}, G={data.G}")
    u = grid(data.m)
    counts = np.zeros(data.m + 1, dtype=int)
    for g, sorted_p in enumerate(data.sorted_groups):
        w_g = W.weights[:, g]
        found = np.searchsorted(sorted_p, threshold(u, alpha, w_g), side="right")
        counts += np.where(w_g > 0, found, 0)
    return counts


def rejection_set(data: GroupedPValues, u: float, alpha: float, w: WeightVector) -> RejectionSet:
    """R_{u,w} = {(g,i): p_gi <= alpha*u*w_g}."""
    masks = [
        group.pvalues <= threshold(u, alpha, w_g) if w_g > 0 else np.zeros(group.size, dtype=bool)
        for group, w_g in zip(data.groups, w.w)
    ]
    return RejectionSet.from_masks(masks)


def in_weight_space(w: WeightVector, costs: CostVector, tol: float = 1e-9) -> bool:
    """w in K^m  <=>  sum_g c_g w_g <= 1 (up to `tol`)."""
    return w.budget(costs) <= 1.0 + tol


# ─── Procedures ──────────────────────────────────────────

def wbh(data: GroupedPValues, w: WeightVector, alpha: float,
        procedure: str = "wbh") -> StepUpOutcome:
    """Weighted BH: reject p_gi <= alpha * I(G_w) * w_g."""
    if w.w.size != data.G:
        raise ValueError(f"expected {data.G} weights, got {w.w.size}")
    counts = rejection_counts(data, w, alpha)
    k = _last_crossing(counts >= np.arange(data.m + 1))
    u_hat = k / data.m
    return StepUpOutcome(
        procedure=procedure,
        alpha=alpha,
        u_hat=u_hat,
        weights_at_u=w,
        rejections=rejection_set(data, u_hat, alpha, w),
    )


def bh(data: GroupedPValues, alpha: float) -> StepUpOutcome:
    """Benjamini-Hochberg, i.e. WBH with unit weights."""
    return wbh(data, WeightVector.ones(data.G), alpha, procedure="bh")


def mwbh(data: GroupedPValues, W: WeightFunction, alpha: float,
         procedure: str = "mwbh") -> StepUpOutcome:
    """Multi-weighted BH: u_hat = max{r/m : p^[r]_(r) <= alpha*r/m}.

    For each r the W(r/m)-weighted p-values p_gi / W_g(r/m) are tested at
    their r-th order statistic. That statistic is <= alpha*r/m exactly when
    at least r p-values satisfy p_gi <= alpha*(r/m)*W_g(r/m), so the sweep
    reads the counts m*G_W(r/m) and keeps the largest r reaching r.
    G_W must be nondecreasing on the grid.
    """
    counts = weight_function_counts(data, W, alpha)
    if np.any(np.diff(counts) < 0):
        first = int(np.flatnonzero(np.diff(counts) < 0)[0])
        raise MonotonicityError(f"G_W decreases between u={first}/{data.m} and u={first + 1}/{data.m}")
    k = _last_crossing(counts >= np.arange(data.m + 1))
    u_hat = k / data.m
    w_at = W.at(k)
    return StepUpOutcome(
        procedure=procedure,
        alpha=alpha,
        u_hat=u_hat,
        weights_at_u=w_at,
        rejections=rejection_set(data, u_hat, alpha, w_at),
    )
