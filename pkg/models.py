"""
Grouped FDR - Data Models
Pydantic models for grouped p-values, rejection sets, null-proportion
estimates, weights and procedure outcomes, plus dataset I/O and the
per-replication FDP / power metrics.
"""

from enum import Enum
from functools import cached_property
from typing import Optional, TextIO, Union
import logging
import os

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)


# ─── Errors ──────────────────────────────────────────────

class DatasetError(ValueError):
    """Malformed, out-of-range or inconsistent p-value input."""


class MissingLabelsError(ValueError):
    """A metric needs ground-truth labels the dataset does not carry."""


class MonotonicityError(ValueError):
    """A grid function that must be nondecreasing is not."""


class UndefinedWeightsError(ValueError):
    """Weights are undefined for these estimates (pi0_hat = 1)."""


class TableMismatchError(ValueError):
    """A null quantile table was built for another data shape."""


class OracleConvergenceError(RuntimeError):
    """Oracle weight root finding did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (budget residual={residual:.3e})")
        self.residual = residual


# ─── Enums ───────────────────────────────────────────────

class Pi0Mode(str, Enum):
    NE = "ne"                 # no estimation, all pi0_hat = 1
    FIXED_LAMBDA = "storey"   # Storey estimator at a fixed lambda
    SCHEDULE = "schedule"     # Storey estimator with lambda_m -> 1
    ORACLE = "oracle"         # user supplied (e.g. true) proportions


_FROZEN = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


# ─── Grouped p-values ────────────────────────────────────

class PValueGroup(BaseModel):
    """One group of p-values, optionally with labels (True = alternative)."""
    model_config = _FROZEN

    key: str
    pvalues: np.ndarray
    labels: Optional[np.ndarray] = None

    @field_validator("pvalues", mode="before")
    @classmethod
    def _check_pvalues(cls, v):
        arr = _frozen_array(v, float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("a group needs a non-empty 1-D array of p-values")
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            raise ValueError("p-values must lie in [0,1]")
        return arr

    @field_validator("labels", mode="before")
    @classmethod
    def _check_labels(cls, v):
        if v is None:
            return None
        raw = np.asarray(v)
        if raw.ndim != 1 or not np.all(np.isin(raw, [0, 1])):
            raise ValueError("labels must be a 1-D array of 0/1 values")
        return _frozen_array(raw, bool)

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.labels is not None and self.labels.size != self.pvalues.size:
            raise ValueError(f"group {self.key!r}: labels and p-values differ in length")
        return self

    @property
    def size(self) -> int:
        return int(self.pvalues.size)

    @cached_property
    def sorted_pvalues(self) -> np.ndarray:
        return _frozen_array(np.sort(self.pvalues), float)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PValueGroup):
            return NotImplemented
        if self.key != other.key or not np.array_equal(self.pvalues, other.pvalues):
            return False
        if self.labels is None or other.labels is None:
            return self.labels is None and other.labels is None
        return bool(np.array_equal(self.labels, other.labels))


class GroupedPValues(BaseModel):
    """The observable dataset: G >= 1 non-empty groups of p-values."""
    model_config = _FROZEN

    groups: list[PValueGroup]

    @model_validator(mode="after")
    def _check_groups(self):
        if not self.groups:
            raise ValueError("at least one group is required")
        if len({g.labels is None for g in self.groups}) > 1:
            raise ValueError("labels must be present for all groups or for none")
        return self

    @classmethod
    def from_arrays(cls, pvalues: list, labels: Optional[list] = None,
                    keys: Optional[list[str]] = None) -> "GroupedPValues":
        keys = keys or [str(g + 1) for g in range(len(pvalues))]
        labels = labels or [None] * len(pvalues)
        return cls(groups=[
            PValueGroup(key=k, pvalues=p, labels=lab)
            for k, p, lab in zip(keys, pvalues, labels)
        ])

    @property
    def G(self) -> int:
        return len(self.groups)

    @property
    def m(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups], dtype=int)

    @property
    def labeled(self) -> bool:
        return self.groups[0].labels is not None

    @cached_property
    def sorted_groups(self) -> list[np.ndarray]:
        return [g.sorted_pvalues for g in self.groups]

    def alternative_counts(self) -> np.ndarray:
        """m_{g,1} for every group."""
        if not self.labeled:
            raise MissingLabelsError("dataset has no labels")
        return np.array([int(g.labels.sum()) for g in self.groups], dtype=int)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupedPValues):
            return NotImplemented
        return self.groups == other.groups


class RejectionSet(BaseModel):
    """Rejected (group, index-within-group) pairs, stored per group."""
    model_config = _FROZEN

    indices: list[np.ndarray]

    @field_validator("indices", mode="before")
    @classmethod
    def _check_indices(cls, v):
        out = []
        for arr in v:
            arr = np.asarray(arr, dtype=int).ravel()
            if arr.size and (arr.min() < 0 or np.unique(arr).size != arr.size):
                raise ValueError("rejection indices must be unique and non-negative")
            out.append(_frozen_array(np.sort(arr), int))
        return out

    @classmethod
    def from_masks(cls, masks: list[np.ndarray]) -> "RejectionSet":
        return cls(indices=[np.flatnonzero(mask) for mask in masks])

    @classmethod
    def from_pairs(cls, pairs, G: int) -> "RejectionSet":
        per_group: list[list[int]] = [[] for _ in range(G)]
        for g, i in pairs:
            per_group[g].append(i)
        return cls(indices=per_group)

    @classmethod
    def empty(cls, G: int) -> "RejectionSet":
        return cls(indices=[[] for _ in range(G)])

    def pairs(self) -> list[tuple[int, int]]:
        return [(g, int(i)) for g, idx in enumerate(self.indices) for i in idx]

    @property
    def counts(self) -> np.ndarray:
        return np.array([idx.size for idx in self.indices], dtype=int)

    def __len__(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, RejectionSet):
            return NotImplemented
        return len(self.indices) == len(other.indices) and all(
            np.array_equal(a, b) for a, b in zip(self.indices, other.indices)
        )

    def check_fits(self, data: GroupedPValues):
        if len(self.indices) != data.G:
            raise DatasetError(f"rejection set has {len(self.indices)} groups, data has {data.G}")
        for idx, group in zip(self.indices, data.groups):
            if idx.size and idx[-1] >= group.size:
                raise DatasetError(f"rejection index {idx[-1]} out of range in group {group.key!r}")


class MetricSample(BaseModel):
    """FDP and power of one rejection set on one labeled dataset."""
    fdp: float = Field(ge=0.0, le=1.0)
    power: float = Field(ge=0.0, le=1.0)       # true discoveries / m
    power_m1: Optional[float] = None           # true discoveries / m_1
    rejections: int = Field(ge=0)


# ─── Estimates, costs, weights ───────────────────────────

class NullEstimates(BaseModel):
    """Per-group null proportion estimates and how they were obtained."""
    model_config = ConfigDict(frozen=True)

    pi0_hat: list[float]
    group_sizes: list[int]
    mode: Pi0Mode
    lam: Optional[float] = None   # lambda used by storey / schedule
    pi0_pooled: Optional[float] = None

    @model_validator(mode="before")
    @classmethod
    def _fill_pooled(cls, data):
        if isinstance(data, dict) and data.get("pi0_pooled") is None:
            sizes = np.asarray(data.get("group_sizes", []), dtype=float)
            values = np.asarray(data.get("pi0_hat", []), dtype=float)
            if sizes.size and sizes.shape == values.shape and sizes.sum() > 0:
                data = {**data, "pi0_pooled": float(np.dot(sizes / sizes.sum(), values))}
        return data

    @model_validator(mode="after")
    def _check_estimates(self):
        if len(self.pi0_hat) != len(self.group_sizes) or not self.group_sizes:
            raise ValueError("one estimate per group is required")
        if min(self.group_sizes) < 1:
            raise ValueError("group sizes must be positive")
        if not all(0.0 < p <= 1.0 for p in self.pi0_hat):
            raise ValueError("null proportion estimates must lie in (0,1]")
        if self.mode == Pi0Mode.NE and any(p != 1.0 for p in self.pi0_hat):
            raise ValueError("NE estimates must all equal 1")
        sizes = np.asarray(self.group_sizes, dtype=float)
        pooled = float(np.dot(sizes / sizes.sum(), self.pi0_hat))
        if not np.isclose(self.pi0_pooled, pooled, rtol=0.0, atol=1e-12):
            raise ValueError(f"pi0_pooled={self.pi0_pooled} inconsistent with entries ({pooled})")
        return self

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.pi0_hat, dtype=float)


class CostVector(BaseModel):
    """Budget coefficients c_g = (m_g/m) * pi0_hat_g of the weight space K^m."""
    model_config = _FROZEN

    c: np.ndarray

    @field_validator("c", mode="before")
    @classmethod
    def _check_costs(cls, v):
        arr = _frozen_array(v, float)
        if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr) & (arr > 0)):
            raise ValueError("costs must be a non-empty array of positive numbers")
        return arr

    @classmethod
    def from_estimates(cls, estimates: NullEstimates) -> "CostVector":
        sizes = np.asarray(estimates.group_sizes, dtype=float)
        return cls(c=sizes / sizes.sum() * estimates.values)

    @classmethod
    def unit(cls, group_sizes) -> "CostVector":
        """Costs of K^m_NE (no estimation)."""
        sizes = np.asarray(group_sizes, dtype=float)
        return cls(c=sizes / sizes.sum())


class WeightVector(BaseModel):
    """One nonnegative weight per group."""
    model_config = _FROZEN

    w: np.ndarray

    @field_validator("w", mode="before")
    @classmethod
    def _check_weights(cls, v):
        arr = _frozen_array(v, float)
        if arr.ndim != 1 or not np.all(np.isfinite(arr) & (arr >= 0)):
            raise ValueError("weights must be finite and nonnegative")
        return arr

    @classmethod
    def ones(cls, G: int) -> "WeightVector":
        return cls(w=np.ones(G))

    @classmethod
    def zeros(cls, G: int) -> "WeightVector":
        return cls(w=np.zeros(G))

    def budget(self, costs: CostVector) -> float:
        """sum_g c_g w_g; the vector is in the weight space when this is <= 1."""
        return float(np.dot(costs.c, self.w))


class WeightFunction(BaseModel):
    """A weight vector for every grid point u = k/m, k = 0..m (row k)."""
    model_config = _FROZEN

    weights: np.ndarray

    @field_validator("weights", mode="before")
    @classmethod
    def _check_grid(cls, v):
        arr = _frozen_array(v, float)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError("weight function needs shape (m+1, G) with m >= 1")
        if not np.all(np.isfinite(arr) & (arr >= 0)):
            raise ValueError("weights must be finite and nonnegative")
        return arr

    @classmethod
    def constant(cls, w: WeightVector, m: int) -> "WeightFunction":
        return cls(weights=np.tile(w.w, (m + 1, 1)))

    @property
    def m(self) -> int:
        return self.weights.shape[0] - 1

    def at(self, k: int) -> WeightVector:
        return WeightVector(w=self.weights[k])


class StepUpOutcome(BaseModel):
    """Result of any procedure: threshold, weights at the threshold, rejections."""
    model_config = _FROZEN

    procedure: str
    alpha: float
    u_hat: float = Field(ge=0.0, le=1.0)
    weights_at_u: WeightVector
    rejections: RejectionSet

    @property
    def n_rejections(self) -> int:
        return len(self.rejections)


# ─── Dataset I/O ─────────────────────────────────────────

def load_dataset(source: Union[str, os.PathLike, TextIO]) -> GroupedPValues:
    """Parse `group,pvalue[,label]` CSV into a validated GroupedPValues.

    Group keys are mapped to groups in first-appearance order.
    """
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DatasetError("empty input: no header and no rows")
    except pd.errors.ParserError as e:
        raise DatasetError(f"malformed CSV: {e}")

    columns = [str(c).strip().lower() for c in frame.columns]
    if columns not in (["group", "pvalue"], ["group", "pvalue", "label"]):
        raise DatasetError(f"expected header group,pvalue[,label], got {','.join(map(str, frame.columns))}")
    frame.columns = columns
    if frame.empty:
        raise DatasetError("empty input: header but no rows")
    frame = frame.fillna("")

    raw = frame["pvalue"].str.strip()
    # float() rounds correctly; pd.to_numeric can be 1 ulp off
    parsed = []
    for row, text in enumerate(raw):
        try:
            parsed.append(float(text))
        except ValueError:
            raise DatasetError(f"line {row + 2}: malformed p-value {text!r}")
    pvalues = pd.Series(parsed, dtype=float)
    outside = ~pvalues.between(0.0, 1.0)
    if outside.any():
        row = int(np.flatnonzero(outside.to_numpy())[0])
        raise DatasetError(f"line {row + 2}: p-value {raw.iloc[row]} outside [0,1]")

    labels = None
    if "label" in frame:
        raw_labels = frame["label"].str.strip()
        present = (raw_labels != "").to_numpy()
        if present.any() and not present.all():
            row = int(np.flatnonzero(~present)[0])
            raise DatasetError(f"line {row + 2}: unlabeled row in a labeled file (mixed labels)")
        if present.all():
            bad = ~raw_labels.isin(["0", "1"])
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise DatasetError(f"line {row + 2}: label must be 0 or 1, got {raw_labels.iloc[row]!r}")
            labels = (raw_labels == "1").to_numpy()

    keys = frame["group"].str.strip()
    values = pvalues.to_numpy(dtype=float)
    groups = []
    for key in pd.unique(keys):
        mask = (keys == key).to_numpy()
        groups.append(PValueGroup(
            key=key,
            pvalues=values[mask],
            labels=None if labels is None else labels[mask],
        ))
    data = GroupedPValues(groups=groups)
    logger.debug(f"Loaded dataset: G={data.G}, m={data.m}, labeled={data.labeled}")
    return data


def dump_dataset(data: GroupedPValues, target: Union[str, os.PathLike, TextIO]):
    """Write `group,pvalue[,label]` CSV that load_dataset reads back identically."""
    frame = pd.DataFrame({
        "group": np.concatenate([[g.key] * g.size for g in data.groups]),
        "pvalue": np.concatenate([g.pvalues for g in data.groups]),
    })
    if data.labeled:
        frame["label"] = np.concatenate([g.labels for g in data.groups]).astype(int)
    frame.to_csv(target, index=False)


# ─── Metrics ─────────────────────────────────────────────

def _true_false_counts(r: RejectionSet, data: GroupedPValues) -> tuple[int, int]:
    if not data.labeled:
        raise MissingLabelsError("FDP and power need a labeled dataset")
    r.check_fits(data)
    true = sum(int(g.labels[idx].sum()) for g, idx in zip(data.groups, r.indices))
    return true, len(r) - true


def fdp(r: RejectionSet, data: GroupedPValues) -> float:
    """|R ∩ H0| / max(|R|, 1)."""
    _, false = _true_false_counts(r, data)
    return false / max(len(r), 1)


def power_sample(r: RejectionSet, data: GroupedPValues) -> float:
    """|R ∩ H1| / m (the m-denominator power)."""
    true, _ = _true_false_counts(r, data)
    return true / data.m


def evaluate(r: RejectionSet, data: GroupedPValues) -> MetricSample:
    """FDP, both power normalizations and the rejection count."""
    true, false = _true_false_counts(r, data)
    m1 = int(data.alternative_counts().sum())
    return MetricSample(
        fdp=false / max(true + false, 1),
        power=true / data.m,
        power_m1=true / m1 if m1 else None,
        rejections=true + false,
    )


def diff_pow(pow_r: float, pow_bh: float, m: int, m1: int) -> float:
    """Power difference to BH, normalized by m/m1."""
    if m1 <= 0:
        raise ValueError("diff_pow needs at least one alternative (m1 > 0)")
    return (m / m1) * (pow_r - pow_bh)
