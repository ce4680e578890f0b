"""
Grouped FDR - ADDOW Optimizer
Adaptive data-driven optimal weighting: for every threshold u the weights
maximize G_w(u) over K^m = {w >= 0 : sum_g c_g w_g <= 1}.

Rejecting k_g p-values in group g needs alpha*u*w_g >= p_(g,k_g), which costs
c_g * p_(g,k_g) / (alpha*u) of the budget. So

    max_{w in K^m} G_w(u) = max{ r/m : minCost[r] <= alpha*u },
    minCost[r] = min over k_1+...+k_G = r of sum_g c_g p_(g,k_g),

a multiple-choice knapsack over count splits. The profile does not depend
on u, so one dynamic program serves every threshold.
"""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import settings
from estimation import ecdf, lcm, ne_estimate
from models import (
    CostVector, GroupedPValues, MonotonicityError, NullEstimates, RejectionSet,
    StepUpOutcome, WeightFunction, WeightVector,
)
from stepup import grid, rejection_set, threshold

logger = logging.getLogger(__name__)


class MinCostProfile(BaseModel):
    """minCost[r] for r = 0..m with the optimal count split per r."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    min_cost: np.ndarray             # shape (m+1,)
    splits: np.ndarray               # shape (m+1, G), row r sums to r
    positions: list[np.ndarray]      # positions[g][k]: threshold reaching k rejections in group g

    @property
    def m(self) -> int:
        return self.min_cost.size - 1

    def split(self, r: int) -> np.ndarray:
        return self.splits[r]

    def position_at(self, ks: np.ndarray) -> np.ndarray:
        return np.array([pos[k] for pos, k in zip(self.positions, ks)])

    def affordable(self, budget: float) -> int:
        """Largest r with minCost[r] <= budget."""
        guarded = budget * (1.0 + settings.cost_tolerance)
        return int(np.searchsorted(self.min_cost, guarded, side="right")) - 1

    def threshold_count(self, alpha: float) -> int:
        """Largest r with minCost[r] <= alpha*r/m, or 0."""
        budget = threshold(grid(self.m), alpha, 1.0) * (1.0 + settings.cost_tolerance)
        hits = np.flatnonzero(self.min_cost[1:] <= budget[1:])
        return int(hits[-1]) + 1 if hits.size else 0


# ─── Profile kernels ─────────────────────────────────────

def count_split_profile(prefix_costs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Exact min-plus DP over groups with state = total count.

    prefix_costs[g][k] is the cost of k rejections in group g (entry 0 is 0).
    Ties keep the smaller count in the later group, so lower-indexed groups
    get the larger counts. Returns (min_cost, splits).
    """
    best = np.zeros(1)
    choices = []
    for pc in prefix_costs:
        n_prev, n_g = best.size - 1, pc.size - 1
        new = np.full(n_prev + n_g + 1, np.inf)
        arg = np.zeros(n_prev + n_g + 1, dtype=int)
        for k in range(n_g + 1):
            cand = best + pc[k]
            window = new[k:k + n_prev + 1]
            better = cand < window
            window[better] = cand[better]
            arg[k:k + n_prev + 1][better] = k
        choices.append(arg)
        best = new

    m = best.size - 1
    splits = np.zeros((m + 1, len(prefix_costs)), dtype=int)
    remaining = np.arange(m + 1)
    for g in reversed(range(len(prefix_costs))):
        k = choices[g][remaining]
        splits[:, g] = k
        remaining = remaining - k
    return best, splits


def greedy_profile(prefix_costs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Profile for convex prefix costs: take the r cheapest marginal units.

    Exact when each group's marginal costs are nondecreasing. Equal marginals
    are taken in group order. Returns (min_cost, splits).
    """
    marginals = np.concatenate([np.diff(pc) for pc in prefix_costs])
    owners = np.concatenate([np.full(pc.size - 1, g) for g, pc in enumerate(prefix_costs)])
    order = np.argsort(marginals, kind="stable")
    m = marginals.size
    min_cost = np.concatenate([[0.0], np.cumsum(marginals[order])])
    taken = np.zeros((m, len(prefix_costs)), dtype=int)
    taken[np.arange(m), owners[order]] = 1
    splits = np.vstack([np.zeros((1, len(prefix_costs)), dtype=int), np.cumsum(taken, axis=0)])
    return min_cost, splits


def _check_profile(min_cost: np.ndarray):
    if min_cost[0] != 0.0 or np.any(np.diff(min_cost) < 0):
        raise MonotonicityError("minCost profile must start at 0 and be nondecreasing")


def _costs_for(data: GroupedPValues, estimates: NullEstimates) -> CostVector:
    if list(estimates.group_sizes) != data.group_sizes.tolist():
        raise ValueError(f"estimates were made for group sizes {estimates.group_sizes}, "
                         f"data has {data.group_sizes.tolist()}")
    return CostVector.from_estimates(estimates)


def min_cost_profile(data: GroupedPValues, costs: CostVector) -> MinCostProfile:
    """Exact minCost profile for the empirical (step) objective."""
    if costs.c.size != data.G:
        raise ValueError(f"expected {data.G} costs, got {costs.c.size}")
    positions = [np.concatenate([[0.0], sorted_p]) for sorted_p in data.sorted_groups]
    min_cost, splits = count_split_profile([c_g * pos for c_g, pos in zip(costs.c, positions)])
    _check_profile(min_cost)
    return MinCostProfile(min_cost=min_cost, splits=splits, positions=positions)


def lcm_cost_profile(data: GroupedPValues, costs: CostVector) -> MinCostProfile:
    """minCost profile for the objective with each ecdf replaced by its concave majorant."""
    positions = []
    for g in range(data.G):
        majorant = lcm(ecdf(data, g))
        m_g = data.groups[g].size
        positions.append(majorant.inverse(np.arange(m_g + 1) / m_g))
    min_cost, splits = greedy_profile([c_g * pos for c_g, pos in zip(costs.c, positions)])
    _check_profile(min_cost)
    return MinCostProfile(min_cost=min_cost, splits=splits, positions=positions)


# ─── Weights ─────────────────────────────────────────────

def _weights_reaching(positions: np.ndarray, counts: np.ndarray,
                      u: float, alpha: float) -> WeightVector:
    """Smallest weights with alpha*u*w_g >= positions[g] wherever counts[g] > 0."""
    active = counts > 0
    w = np.zeros(counts.size)
    w[active] = np.maximum(positions[active], np.finfo(float).tiny) / (u * alpha)
    short = active & (threshold(u, alpha, w) < positions)
    while np.any(short):
        w[short] = np.nextafter(w[short], np.inf)
        short = active & (threshold(u, alpha, w) < positions)
    return WeightVector(w=w)


def argmax_weights_at(data: GroupedPValues, estimates: NullEstimates, alpha: float, u: float,
                      profile: Optional[MinCostProfile] = None) -> WeightVector:
    """W*(u): weights maximizing G_w(u) over K^m (minimal ones, zero off the support)."""
    if u <= 0.0:
        return WeightVector.zeros(data.G)
    if profile is None:
        profile = min_cost_profile(data, _costs_for(data, estimates))
    r = profile.affordable(alpha * u)
    ks = profile.split(r)
    return _weights_reaching(profile.position_at(ks), ks, u, alpha)


def addow_weight_function(data: GroupedPValues, estimates: NullEstimates, alpha: float,
                          profile: Optional[MinCostProfile] = None) -> WeightFunction:
    """W* materialized on the grid k/m (row 0 is the zero vector)."""
    if profile is None:
        profile = min_cost_profile(data, _costs_for(data, estimates))
    rows = [np.zeros(data.G)]
    for u in grid(data.m)[1:]:
        rows.append(argmax_weights_at(data, estimates, alpha, u, profile).w)
    return WeightFunction(weights=np.vstack(rows))


# ─── Procedures ──────────────────────────────────────────

def _run_profile(data: GroupedPValues, profile: MinCostProfile, alpha: float,
                 procedure: str) -> StepUpOutcome:
    r = profile.threshold_count(alpha)
    if r == 0:
        return StepUpOutcome(
            procedure=procedure,
            alpha=alpha,
            u_hat=0.0,
            weights_at_u=WeightVector.zeros(data.G),
            rejections=RejectionSet.empty(data.G),
        )
    u_hat = r / data.m
    ks = profile.split(r)
    w = _weights_reaching(profile.position_at(ks), ks, u_hat, alpha)
    return StepUpOutcome(
        procedure=procedure,
        alpha=alpha,
        u_hat=u_hat,
        weights_at_u=w,
        rejections=rejection_set(data, u_hat, alpha, w),
    )


def addow(data: GroupedPValues, estimates: NullEstimates, alpha: float,
          profile: Optional[MinCostProfile] = None, procedure: str = "addow") -> StepUpOutcome:
    """ADDOW = MWBH(W*); with NE estimates this is IHW."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0,1), got {alpha}")
    if profile is None:
        profile = min_cost_profile(data, _costs_for(data, estimates))
    outcome = _run_profile(data, profile, alpha, procedure)
    if outcome.n_rejections != round(outcome.u_hat * data.m):
        logger.warning(f"{procedure}: {outcome.n_rejections} rejections at u_hat={outcome.u_hat} "
                       f"(expected {round(outcome.u_hat * data.m)})")
    return outcome


def ihw(data: GroupedPValues, alpha: float,
        profile: Optional[MinCostProfile] = None) -> StepUpOutcome:
    """ADDOW without null proportion estimation."""
    return addow(data, ne_estimate(data), alpha, profile=profile, procedure="ihw")


def addow_lcm(data: GroupedPValues, estimates: NullEstimates, alpha: float) -> StepUpOutcome:
    """ADDOW with every group's ecdf replaced by its least concave majorant.

    Thresholds come from the regularized objective; rejections are the
    observed p-values under them, so |R| can fall below m*u_hat.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0,1), got {alpha}")
    profile = lcm_cost_profile(data, _costs_for(data, estimates))
    return _run_profile(data, profile, alpha, "addow-lcm")
