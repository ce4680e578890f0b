"""
Grouped FDR - Gaussian Oracle
The one-sided Gaussian model: p = Phibar(Z) with Z ~ N(0,1) under the null
and N(mu_g, 1) under the alternative, so the alternative c.d.f. of a p-value
is F_g(x) = Phibar(Phibar^-1(x) - mu_g).

Oracle weights maximize the expected power sum_g (m_g1/m) F_g(alpha*u*w_g)
over the budget sum_g c_g w_g <= 1. The KKT conditions give
f_g(alpha*u*w_g) = nu * c_g * m / (m_g1 * alpha*u) for one multiplier nu,
which is found by root finding on the budget.
"""

import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from config import settings
from models import (
    CostVector, GroupedPValues, OracleConvergenceError, StepUpOutcome,
    WeightFunction, WeightVector,
)
from stepup import grid, mwbh

logger = logging.getLogger(__name__)


def phibar(x):
    """Standard normal upper tail."""
    return ndtr(-np.asarray(x, dtype=float))


def phibar_inv(x):
    return -ndtri(np.asarray(x, dtype=float))


# ─── Alternatives ────────────────────────────────────────

class AlternativeCdf(BaseModel):
    """Gaussian one-sided alternative with mean shift mu."""
    model_config = ConfigDict(frozen=True)

    mu: float = Field(gt=0.0)

    def cdf(self, x):
        return ndtr(ndtri(np.asarray(x, dtype=float)) + self.mu)

    def density(self, x):
        return np.exp(self.mu * (phibar_inv(x) - self.mu / 2.0))

    def inverse_density(self, y):
        """f^-1(y) = Phibar(log(y)/mu + mu/2)."""
        return phibar(np.log(y) / self.mu + self.mu / 2.0)

    @property
    def density_at_zero(self) -> float:
        return math.inf


class ConcaveAlternative(BaseModel):
    """Any concave alternative c.d.f. given by callables, e.g. F(x) = 2x - x^2."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    cdf_fn: Callable
    density_fn: Callable
    density_at_zero: float = Field(gt=0.0)

    def cdf(self, x):
        return self.cdf_fn(np.asarray(x, dtype=float))

    def density(self, x):
        return self.density_fn(np.asarray(x, dtype=float))


# ─── Model ───────────────────────────────────────────────

class GaussianModel(BaseModel):
    """Fixed-design grouped model: m_g0 nulls and m_g - m_g0 alternatives in group g."""
    model_config = ConfigDict(frozen=True)

    mu: list[float]
    group_sizes: list[int]
    null_counts: list[int]

    @model_validator(mode="after")
    def _check_model(self):
        if not self.mu or not len(self.mu) == len(self.group_sizes) == len(self.null_counts):
            raise ValueError("mu, group_sizes and null_counts need one entry per group")
        if any(mu <= 0 for mu in self.mu):
            raise ValueError("effect sizes mu_g must be positive")
        if any(not 0 < m0 < m_g for m0, m_g in zip(self.null_counts, self.group_sizes)):
            raise ValueError("every group needs both nulls and alternatives (0 < m_g0 < m_g)")
        return self

    @classmethod
    def from_fractions(cls, m: int, group_fractions: Sequence[float],
                       null_fractions: Sequence[float], mu: Sequence[float]) -> "GaussianModel":
        """Round m*pi_g and m_g*pi_g0 to counts; the last group absorbs rounding."""
        sizes = [int(round(m * f)) for f in group_fractions[:-1]]
        sizes.append(m - sum(sizes))
        nulls = [int(round(n * p)) for n, p in zip(sizes, null_fractions)]
        return cls(mu=list(mu), group_sizes=sizes, null_counts=nulls)

    @property
    def G(self) -> int:
        return len(self.mu)

    @property
    def m(self) -> int:
        return sum(self.group_sizes)

    @property
    def alternative_counts(self) -> np.ndarray:
        return np.array(self.group_sizes) - np.array(self.null_counts)

    @property
    def pi(self) -> np.ndarray:
        return np.array(self.group_sizes) / self.m

    @property
    def pi0(self) -> np.ndarray:
        return np.array(self.null_counts) / np.array(self.group_sizes)

    @property
    def pi0_pooled(self) -> float:
        return sum(self.null_counts) / self.m

    def alternatives(self) -> list[AlternativeCdf]:
        return [AlternativeCdf(mu=mu) for mu in self.mu]


def load_model(path: str) -> GaussianModel:
    with open(path, "r") as f:
        return GaussianModel.model_validate_json(f.read())


def generate(model: GaussianModel, seed: Optional[int] = None,
             rng: Optional[np.random.Generator] = None) -> GroupedPValues:
    """Labeled dataset; in every group the nulls come first."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    pvalues, labels = [], []
    for m_g, m0, mu in zip(model.group_sizes, model.null_counts, model.mu):
        z = rng.standard_normal(m_g)
        z[m0:] += mu
        pvalues.append(phibar(z))
        labels.append(np.concatenate([np.zeros(m0, dtype=int), np.ones(m_g - m0, dtype=int)]))
    return GroupedPValues.from_arrays(pvalues, labels)


# ─── Oracle weights ──────────────────────────────────────

def expected_power(model: GaussianModel, w: WeightVector, alpha: float, u: float) -> float:
    """P_w(u) = sum_g (m_g1/m) F_g(alpha*u*w_g)."""
    x = np.minimum((u * alpha) * w.w, 1.0)
    return float(sum(
        n1 / model.m * float(alt.cdf(x_g))
        for n1, alt, x_g in zip(model.alternative_counts, model.alternatives(), x)
    ))


def oracle_weights(model: GaussianModel, costs: CostVector, alpha: float, u: float) -> WeightVector:
    if costs.c.size != model.G:
        raise ValueError(f"expected {model.G} costs, got {costs.c.size}")
    au = u * alpha
    if au <= 0.0:
        raise ValueError("oracle weights need alpha*u > 0")
    c = costs.c
    if c.sum() <= au:
        return WeightVector(w=np.full(model.G, 1.0 / au))

    mu = np.asarray(model.mu, dtype=float)
    shift = np.log(c * model.m / (model.alternative_counts * au))

    def positions(t: float) -> np.ndarray:
        # alpha*u*w_g at log-multiplier t
        return ndtr(-((t + shift) / mu + mu / 2.0))

    def residual(t: float) -> float:
        return float(np.dot(c, positions(t))) / au - 1.0

    lo, hi = -1.0, 1.0
    for _ in range(settings.oracle_max_iter):
        if residual(lo) > 0.0:
            break
        lo *= 2.0
    for _ in range(settings.oracle_max_iter):
        if residual(hi) < 0.0:
            break
        hi *= 2.0
    if not residual(lo) > 0.0 > residual(hi):
        raise OracleConvergenceError("could not bracket the Lagrange multiplier", residual(hi))

    t, info = brentq(residual, lo, hi, xtol=settings.oracle_tolerance,
                     maxiter=settings.oracle_max_iter, full_output=True, disp=False)
    if not info.converged:
        raise OracleConvergenceError(f"root finding stopped after {info.iterations} iterations",
                                     residual(t))

    x = positions(t)
    free = x < 1.0
    spare = au - float(np.dot(c[~free], x[~free]))
    spent = float(np.dot(c[free], x[free]))
    if spent > 0.0:
        x[free] *= spare / spent
    w = x / au
    gap = float(np.dot(c, w)) - 1.0
    if abs(gap) > 1e-10:
        raise OracleConvergenceError("oracle weights miss the budget", gap)
    return WeightVector(w=w)


def oracle_weight_function(model: GaussianModel, costs: CostVector, alpha: float) -> WeightFunction:
    """W*_or on the grid k/m (row 0 is the zero vector)."""
    rows = [np.zeros(model.G)]
    for u in grid(model.m)[1:]:
        rows.append(oracle_weights(model, costs, alpha, u).w)
    return WeightFunction(weights=np.vstack(rows))


def oracle_mwbh(data: GroupedPValues, model: GaussianModel, costs: CostVector, alpha: float,
                W: Optional[WeightFunction] = None) -> StepUpOutcome:
    """MWBH with the oracle weight function; pass `W` to reuse a precomputed one."""
    if W is None:
        W = oracle_weight_function(model, costs, alpha)
    return mwbh(data, W, alpha, procedure="oracle")


# ─── Asymptotics ─────────────────────────────────────────

def critical_alpha(model: GaussianModel, pibar: Sequence[float],
                   alternatives: Optional[list] = None) -> float:
    """alpha* = min_g pibar_g0 / (pi_g0 + pi_g1 f_g(0+)), 0 when some f_g(0+) is infinite."""
    pibar = np.asarray(pibar, dtype=float)
    if pibar.size != model.G or np.any((pibar <= 0.0) | (pibar > 1.0)):
        raise ValueError("pibar needs one entry in (0,1] per group")
    alternatives = alternatives or model.alternatives()
    at_zero = np.array([alt.density_at_zero for alt in alternatives], dtype=float)
    if np.any(np.isinf(at_zero)):
        return 0.0
    value = float(np.min(pibar / (model.pi0 + (1.0 - model.pi0) * at_zero)))
    if value >= 1.0:
        raise ValueError(f"critical alpha {value} is not below 1; check the alternative densities")
    return value


def limiting_fdr(model: GaussianModel, pibar: Sequence[float], alpha: float) -> Optional[float]:
    """Asymptotic FDR of ADDOW with limit estimates pibar.

    alpha when pibar equals the true proportions, (pi0/pibar)*alpha when pibar
    is constant and the nulls are evenly spread over groups, None otherwise.
    """
    pibar = np.asarray(pibar, dtype=float)
    if np.allclose(pibar, model.pi0, rtol=0.0, atol=1e-12):
        return alpha
    if np.allclose(pibar, pibar[0]) and np.allclose(model.pi0, model.pi0[0]):
        return model.pi0_pooled / pibar[0] * alpha
    return None
