"""
Grouped FDR - Weak-Signal Stabilization
sADDOW_beta runs ADDOW only when the data show more signal than a full null
would: Z_m = sqrt(m) * max_k (max_{w in K^m_NE} G_w(k/m) - alpha*k/m) is
compared with the (1-beta)-quantile of its simulated full-null counterpart.
Otherwise plain BH is used.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from addow import MinCostProfile, addow, min_cost_profile
from config import settings
from estimation import ne_estimate
from models import CostVector, GroupedPValues, NullEstimates, StepUpOutcome, TableMismatchError
from stepup import bh, grid, threshold

logger = logging.getLogger(__name__)


# ─── Statistic ───────────────────────────────────────────

def z_statistic(data: GroupedPValues, alpha: float,
                profile: Optional[MinCostProfile] = None) -> float:
    """Z_m on the grid u = k/m, 1 <= k <= m, with unit (NE) costs."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0,1), got {alpha}")
    if profile is None:
        profile = min_cost_profile(data, CostVector.unit(data.group_sizes))
    budgets = threshold(grid(data.m)[1:], alpha, 1.0)
    best = np.searchsorted(profile.min_cost, budgets * (1.0 + settings.cost_tolerance), side="right") - 1
    excess = best / data.m - budgets
    return math.sqrt(data.m) * float(excess.max())


# ─── Null calibration ────────────────────────────────────

class NullQuantileTable(BaseModel):
    """Sorted full-null samples of Z_0m for one (m, group sizes, alpha)."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    m: int = Field(ge=1)
    group_sizes: list[int]
    alpha: float = Field(gt=0.0, lt=1.0)
    replicates: int = Field(ge=1, alias="B")
    seed: int
    samples: list[float]

    @field_validator("samples")
    @classmethod
    def _sorted(cls, v):
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("samples must be sorted ascending")
        return v

    @model_validator(mode="after")
    def _check_shape(self):
        if len(self.samples) != self.replicates:
            raise ValueError(f"expected {self.replicates} samples, got {len(self.samples)}")
        if sum(self.group_sizes) != self.m:
            raise ValueError(f"group sizes {self.group_sizes} do not add up to m={self.m}")
        return self

    def quantile(self, beta: float) -> float:
        """q_beta = the ceil((1-beta)(B+1))-th smallest sample, capped at B."""
        if not 0.0 < beta < 1.0:
            raise ValueError(f"beta must lie in (0,1), got {beta}")
        rank = math.ceil((1.0 - beta) * (self.replicates + 1))
        rank = min(max(rank, 1), self.replicates)
        return self.samples[rank - 1]

    def check_fits(self, data: GroupedPValues, alpha: float):
        if (self.m != data.m or self.group_sizes != data.group_sizes.tolist()
                or not math.isclose(self.alpha, alpha, rel_tol=0.0, abs_tol=1e-12)):
            raise TableMismatchError(
                f"table for m={self.m}, sizes={self.group_sizes}, alpha={self.alpha} does not fit "
                f"data m={data.m}, sizes={data.group_sizes.tolist()}, alpha={alpha}"
            )


def _null_z(job: tuple[list[int], float, np.random.SeedSequence]) -> float:
    group_sizes, alpha, seed_seq = job
    rng = np.random.default_rng(seed_seq)
    data = GroupedPValues.from_arrays([rng.uniform(size=n) for n in group_sizes])
    return z_statistic(data, alpha)


def null_quantile_table(m: int, group_sizes: list[int], alpha: float, replicates: int,
                        seed: int, threads: Optional[int] = None) -> NullQuantileTable:
    """Simulate Z_0m on independent uniform p-values, one child seed per replicate."""
    group_sizes = [int(n) for n in group_sizes]
    if sum(group_sizes) != m:
        raise ValueError(f"group sizes {group_sizes} do not add up to m={m}")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if replicates < settings.min_quantile_replicates:
        logger.warning(f"Building a null table with only {replicates} replicates")
    threads = settings.threads if threads is None else threads

    jobs = [(group_sizes, alpha, child) for child in np.random.SeedSequence(seed).spawn(replicates)]
    logger.info(f"Simulating {replicates} null statistics for m={m}, sizes={group_sizes} "
                f"on {threads} worker(s)")
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(_null_z, jobs, chunksize=max(1, replicates // (4 * threads))))
    else:
        samples = [_null_z(job) for job in jobs]

    return NullQuantileTable(
        m=m,
        group_sizes=group_sizes,
        alpha=alpha,
        replicates=replicates,
        seed=seed,
        samples=sorted(samples),
    )


# ─── Procedure ───────────────────────────────────────────

class StabilizedOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    outcome: StepUpOutcome
    z: float
    quantile: float
    signal_detected: bool   # phi_beta


def saddow(data: GroupedPValues, estimates: NullEstimates, alpha: float, beta: float,
           table: NullQuantileTable, profile: Optional[MinCostProfile] = None,
           procedure: str = "saddow") -> StabilizedOutcome:
    """ADDOW if Z_m > q_beta, else BH.

    `profile` is the ADDOW profile for `estimates`; the statistic always uses
    unit costs.
    """
    table.check_fits(data, alpha)
    z = z_statistic(data, alpha)
    q = table.quantile(beta)
    detected = z > q
    if detected:
        outcome = addow(data, estimates, alpha, profile=profile, procedure=procedure)
    else:
        outcome = bh(data, alpha).model_copy(update={"procedure": procedure})
    logger.debug(f"{procedure}: Z={z:.4f} q={q:.4f} -> {'addow' if detected else 'bh'}")
    return StabilizedOutcome(outcome=outcome, z=z, quantile=q, signal_detected=detected)


def sihw(data: GroupedPValues, alpha: float, beta: float,
         table: NullQuantileTable) -> StabilizedOutcome:
    """Stabilized IHW (saddow with NE estimates)."""
    return saddow(data, ne_estimate(data), alpha, beta, table, procedure="sihw")
