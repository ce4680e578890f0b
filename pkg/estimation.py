"""
Grouped FDR - Null Proportion Estimation
Storey-type estimators of the per-group null proportions, per-group
empirical c.d.f.s and their least concave majorants.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from config import settings
from models import GroupedPValues, NullEstimates, Pi0Mode

logger = logging.getLogger(__name__)


# ─── Storey estimators ───────────────────────────────────

def storey_estimate(data: GroupedPValues, lam: float,
                    mode: Pi0Mode = Pi0Mode.FIXED_LAMBDA) -> NullEstimates:
    """pi0_hat_g(lam) = (1 - #{p_gi <= lam}/m_g + 1/m) / (1 - lam), clipped to 1."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0,1), got {lam}")
    m = data.m
    raw = np.array([
        (1.0 - np.count_nonzero(g.pvalues <= lam) / g.size + 1.0 / m) / (1.0 - lam)
        for g in data.groups
    ])
    clipped = np.minimum(raw, 1.0)
    if np.any(raw > 1.0):
        logger.debug(f"Storey estimates clipped at 1 for groups {np.flatnonzero(raw > 1.0).tolist()}")
    return NullEstimates(
        pi0_hat=clipped.tolist(),
        group_sizes=data.group_sizes.tolist(),
        mode=mode,
        lam=lam,
    )


def storey_schedule(data: GroupedPValues, exponent: Optional[float] = None) -> NullEstimates:
    """Storey estimate at lam_m = 1 - m^(-exponent), 0 < exponent < 1/2."""
    exponent = settings.schedule_exponent if exponent is None else exponent
    if not 0.0 < exponent < 0.5:
        raise ValueError(f"schedule exponent must lie in (0, 1/2), got {exponent}")
    if data.m < 2:
        raise ValueError("the lambda schedule needs m >= 2")
    lam = 1.0 - data.m ** (-exponent)
    return storey_estimate(data, lam, mode=Pi0Mode.SCHEDULE)


def ne_estimate(data: GroupedPValues) -> NullEstimates:
    """Non-estimation: every pi0_hat_g = 1."""
    return NullEstimates(
        pi0_hat=[1.0] * data.G,
        group_sizes=data.group_sizes.tolist(),
        mode=Pi0Mode.NE,
    )


def oracle_estimate(data: GroupedPValues, values: Sequence[float]) -> NullEstimates:
    """Supplied proportions (typically the true ones)."""
    if len(values) != data.G:
        raise ValueError(f"expected {data.G} oracle proportions, got {len(values)}")
    return NullEstimates(
        pi0_hat=[float(v) for v in values],
        group_sizes=data.group_sizes.tolist(),
        mode=Pi0Mode.ORACLE,
    )


def parse_pi0_mode(text: str, data: GroupedPValues,
                   truth: Optional[Sequence[float]] = None) -> NullEstimates:
    """Build estimates from `ne`, `storey[:lam]`, `schedule[:e]` or `oracle[:v1,v2,...]`."""
    name, _, arg = text.strip().partition(":")
    name = name.lower()
    try:
        if name == Pi0Mode.NE.value:
            return ne_estimate(data)
        if name == Pi0Mode.FIXED_LAMBDA.value:
            return storey_estimate(data, float(arg) if arg else settings.storey_lambda)
        if name == Pi0Mode.SCHEDULE.value:
            return storey_schedule(data, float(arg) if arg else None)
        if name == Pi0Mode.ORACLE.value:
            if arg:
                return oracle_estimate(data, [float(v) for v in arg.split(",")])
            if truth is None:
                raise ValueError("oracle mode needs values (oracle:v1,v2,...)")
            return oracle_estimate(data, truth)
    except ValueError as e:
        raise ValueError(f"invalid pi0 mode {text!r}: {e}") from e
    raise ValueError(f"unknown pi0 mode {text!r} (expected ne|storey:lam|schedule:e|oracle:v1,...)")


# ─── Empirical c.d.f. and least concave majorant ────────

class StepFunction(BaseModel):
    """Right-continuous nondecreasing step function on [0,1], zero before the first knot."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    knots: np.ndarray
    values: np.ndarray

    @field_validator("knots", "values", mode="before")
    @classmethod
    def _as_array(cls, v):
        arr = np.array(v, dtype=float)
        arr.flags.writeable = False
        return arr

    @model_validator(mode="after")
    def _check_shape(self):
        if self.knots.shape != self.values.shape or self.knots.ndim != 1 or self.knots.size == 0:
            raise ValueError("knots and values must be non-empty 1-D arrays of equal length")
        if np.any(np.diff(self.knots) <= 0) or self.knots[0] < 0 or self.knots[-1] > 1:
            raise ValueError("knots must be strictly increasing in [0,1]")
        if np.any(np.diff(self.values) < 0) or self.values[0] < 0 or self.values[-1] > 1:
            raise ValueError("values must be nondecreasing in [0,1]")
        return self

    def __call__(self, t):
        idx = np.searchsorted(self.knots, t, side="right")
        return np.where(idx > 0, self.values[np.maximum(idx - 1, 0)], 0.0)


def ecdf(data: GroupedPValues, group: int) -> StepFunction:
    """Empirical c.d.f. of one group's p-values; ties give a single larger jump."""
    pvalues = data.sorted_groups[group]
    knots, counts = np.unique(pvalues, return_counts=True)
    return StepFunction(knots=knots, values=np.cumsum(counts) / pvalues.size)


class ConcaveMajorant(BaseModel):
    """Piecewise-linear concave function through its hull vertices."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    xs: np.ndarray
    ys: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.xs, self.ys)

    def slopes(self) -> np.ndarray:
        return np.diff(self.ys) / np.diff(self.xs)

    def inverse(self, y):
        """Smallest t with majorant(t) >= y, for y up to the maximum value."""
        top = int(np.argmax(self.ys))
        return np.interp(y, self.ys[:top + 1], self.xs[:top + 1])


def _upper_hull(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    hull: list[tuple[float, float]] = []
    for p in points:
        while len(hull) > 1:
            v0, v1 = hull[-2], hull[-1]
            # pop v1 unless v0 -> v1 -> p turns clockwise (collinear points merged)
            if (v1[0] - v0[0]) * (p[1] - v0[1]) - (p[0] - v0[0]) * (v1[1] - v0[1]) >= 0.0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def lcm(f: StepFunction) -> ConcaveMajorant:
    """Least concave majorant of a step function on [0,1].

    Upper hull of (0, f(0)), the jump tops (knot, value) and (1, 1),
    computed with a monotone-chain sweep.
    """
    points = [(0.0, float(f(0.0)))]
    points += [(float(x), float(y)) for x, y in zip(f.knots, f.values) if x > 0.0]
    if points[-1][0] < 1.0:
        points.append((1.0, 1.0))
    hull = _upper_hull(points)
    xs, ys = zip(*hull)
    return ConcaveMajorant(xs=np.array(xs), ys=np.array(ys))
