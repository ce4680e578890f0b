"""
Grouped FDR - Comparison Procedures
Adaptive BH (ABH), the HZZ weighting, and the two-stage Pro1/Pro2 procedures
that maximize G_w at the larger of the ABH/HZZ thresholds.
"""

import logging
from typing import Optional

import numpy as np

from addow import MinCostProfile, argmax_weights_at, min_cost_profile
from models import (
    CostVector, GroupedPValues, NullEstimates, StepUpOutcome,
    UndefinedWeightsError, WeightVector,
)
from stepup import rejection_set, wbh

logger = logging.getLogger(__name__)


def abh(data: GroupedPValues, estimates: NullEstimates, alpha: float) -> StepUpOutcome:
    """WBH with the constant weight 1/pi0_hat."""
    w = WeightVector(w=np.full(data.G, 1.0 / estimates.pi0_pooled))
    return wbh(data, w, alpha, procedure="abh")


def hzz_weights(estimates: NullEstimates) -> WeightVector:
    """w_g = pi1_hat_g / (pi0_hat_g * (1 - pi0_hat)); on the boundary of K^m."""
    pi0 = estimates.values
    pooled = estimates.pi0_pooled
    if pooled >= 1.0:
        raise UndefinedWeightsError(
            "HZZ weights are undefined when the pooled null proportion estimate is 1; use BH instead"
        )
    return WeightVector(w=(1.0 - pi0) / (pi0 * (1.0 - pooled)))


def hzz(data: GroupedPValues, estimates: NullEstimates, alpha: float) -> StepUpOutcome:
    return wbh(data, hzz_weights(estimates), alpha, procedure="hzz")


def pro1_pro2(data: GroupedPValues, estimates: NullEstimates, alpha: float,
              profile: Optional[MinCostProfile] = None) -> tuple[StepUpOutcome, StepUpOutcome]:
    """Two-stage procedures.

    Stage one takes u_M = max(u_hat(ABH), u_hat(HZZ)). Stage two picks
    W*(u_M); Pro1 rejects at u_M with those weights, Pro2 runs WBH with them.
    Pro1 is not step-up, so its rejection count need not equal m*u_M.
    """
    w_hzz = hzz_weights(estimates)
    u_m = max(abh(data, estimates, alpha).u_hat, wbh(data, w_hzz, alpha).u_hat)
    if profile is None:
        profile = min_cost_profile(data, CostVector.from_estimates(estimates))
    w_star = argmax_weights_at(data, estimates, alpha, u_m, profile)
    logger.debug(f"pro1/pro2 stage one u_M={u_m}, weights {w_star.w.tolist()}")

    pro1 = StepUpOutcome(
        procedure="pro1",
        alpha=alpha,
        u_hat=u_m,
        weights_at_u=w_star,
        rejections=rejection_set(data, u_m, alpha, w_star),
    )
    pro2 = wbh(data, w_star, alpha, procedure="pro2")
    return pro1, pro2
