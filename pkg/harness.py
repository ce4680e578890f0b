"""
Grouped FDR - Scenario Harness
Monte Carlo FDR / power comparison of the procedures on Gaussian models.

Every replication draws one dataset and runs every configured procedure on
it (paired design). Replication r at sweep point i uses the seed sequence
[seed, i, r], and results are reduced in replication order, so reports do
not depend on the number of workers.
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, TextIO, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from addow import addow, addow_lcm, ihw, min_cost_profile
from classic import abh, hzz, pro1_pro2
from config import settings
from estimation import parse_pi0_mode
from models import (
    CostVector, GroupedPValues, NullEstimates, StepUpOutcome, UndefinedWeightsError,
    WeightFunction, diff_pow, evaluate,
)
from oracle import GaussianModel, generate, oracle_mwbh, oracle_weight_function
from quantile_store import get_or_build_table
from stabilize import NullQuantileTable, saddow
from stepup import bh

logger = logging.getLogger(__name__)

PROCEDURE_NAMES = ("bh", "abh", "hzz", "pro1", "pro2", "ihw", "addow", "addow-lcm", "saddow", "oracle")

REPORT_COLUMNS = [
    "sweep", "procedure", "fdr", "fdr_se", "pow", "pow_se", "diffpow", "branch_rate",
    "diffpow_se", "pow_m1", "fallback_rate", "failures", "reps", "m", "mubar",
]

# per-replication record layout
_FDP, _POW, _POW_M1, _DIFFPOW, _BRANCH, _FALLBACK = range(6)


# ─── Configuration ───────────────────────────────────────

class ProcedureSpec(BaseModel):
    """A procedure name with the pi0 mode its estimates come from."""
    model_config = ConfigDict(frozen=True)

    name: str
    pi0: str = "ne"

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in PROCEDURE_NAMES:
            raise ValueError(f"unknown procedure {v!r} (expected one of {', '.join(PROCEDURE_NAMES)})")
        return v

    @model_validator(mode="after")
    def _ihw_is_ne(self):
        if self.name == "ihw" and self.pi0 != "ne":
            raise ValueError(f"ihw runs without null proportion estimates, got pi0 {self.pi0!r}")
        return self

    @classmethod
    def parse(cls, text: str) -> "ProcedureSpec":
        """`addow[storey:0.5]` or plain `bh`."""
        name, _, rest = text.strip().partition("[")
        return cls(name=name, pi0=rest.rstrip("]") or "ne") if rest else cls(name=name)

    @property
    def label(self) -> str:
        return f"{self.name}[{self.pi0}]"


class SweepPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    m: int = Field(ge=2)
    mubar: float = Field(gt=0.0)

    @property
    def label(self) -> str:
        return f"m{self.m}_mu{self.mubar:g}"


class ScenarioConfig(BaseModel):
    """Two-or-more-group Gaussian scenario with mu_g = a_g + b_g * mubar."""
    model_config = ConfigDict(frozen=True)

    name: str
    group_fractions: list[float]
    null_fractions: list[float]
    mu_rule: list[tuple[float, float]]
    alpha: float = Field(gt=0.0, lt=1.0)
    beta: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    procedures: list[ProcedureSpec]
    replications: int = Field(default_factory=lambda: settings.replications, ge=1)
    quantile_replicates: int = Field(default_factory=lambda: settings.quantile_replicates, ge=1)
    seed: int = 0
    sweep: list[SweepPoint]

    @field_validator("procedures", mode="before")
    @classmethod
    def _parse_procedures(cls, v):
        return [ProcedureSpec.parse(p) if isinstance(p, str) else p for p in v]

    @model_validator(mode="after")
    def _check_config(self):
        G = len(self.group_fractions)
        if not G == len(self.null_fractions) == len(self.mu_rule) or G < 1:
            raise ValueError("group_fractions, null_fractions and mu_rule need one entry per group")
        if not math.isclose(sum(self.group_fractions), 1.0, abs_tol=1e-9):
            raise ValueError("group fractions must add up to 1")
        if not self.procedures or not self.sweep:
            raise ValueError("a scenario needs procedures and sweep points")
        if any(p.name == "saddow" for p in self.procedures) and self.beta is None:
            raise ValueError("saddow needs beta")
        if any(p.name == "oracle" and p.pi0 not in ("ne", "oracle") for p in self.procedures):
            raise ValueError("oracle procedures use pi0 'ne' or 'oracle'")
        return self

    def model_at(self, point: SweepPoint) -> GaussianModel:
        mu = [a + b * point.mubar for a, b in self.mu_rule]
        return GaussianModel.from_fractions(point.m, self.group_fractions, self.null_fractions, mu)


# ─── Presets ─────────────────────────────────────────────

def _scenario1() -> ScenarioConfig:
    mubars = [0.01, 0.02, 0.05] + [0.5 + 0.25 * i for i in range(11)]
    return ScenarioConfig(
        name="scenario1",
        group_fractions=[0.5, 0.5],
        null_fractions=[0.7, 0.8],
        mu_rule=[(0.0, 1.0), (0.0, 2.0)],
        alpha=0.05,
        beta=0.001,
        quantile_replicates=10000,
        procedures=[
            "bh", "oracle[ne]", "ihw", "saddow[ne]", "pro2[ne]",
            "oracle[oracle]", "addow[oracle]", "abh[oracle]", "hzz[oracle]",
            "pro2[oracle]", "saddow[oracle]",
            "addow[storey:0.5]", "pro1[storey:0.5]", "pro2[storey:0.5]",
            "abh[storey:0.5]", "hzz[storey:0.5]", "saddow[storey:0.5]",
        ],
        sweep=[SweepPoint(m=4000, mubar=mu) for mu in mubars],
    )


def _scenario2() -> ScenarioConfig:
    return ScenarioConfig(
        name="scenario2",
        group_fractions=[0.1, 0.9],
        null_fractions=[0.05, 0.85],
        mu_rule=[(2.0, 0.0), (0.0, 1.0)],
        alpha=0.7,
        procedures=["bh", "ihw", "addow[storey:0.5]", "addow[oracle]"],
        sweep=[SweepPoint(m=10000, mubar=round(1.7 + 0.1 * i, 10)) for i in range(7)],
    )


def _scenario3() -> ScenarioConfig:
    return ScenarioConfig(
        name="scenario3",
        group_fractions=[0.5, 0.5],
        null_fractions=[0.8, 0.8],
        mu_rule=[(0.0, 1.0), (0.0, 2.0)],
        alpha=0.05,
        beta=0.05,
        quantile_replicates=1000,
        procedures=["bh", "ihw", "addow[oracle]", "saddow[ne]", "saddow[oracle]"],
        sweep=[SweepPoint(m=m, mubar=mu) for mu in (0.01, 3.0) for m in (100, 300, 500, 1000, 2000, 5000)],
    )


PRESETS = {
    "scenario1": _scenario1,
    "scenario2": _scenario2,
    "scenario3": _scenario3,
}


def preset(name: str, replications: Optional[int] = None, ci: bool = False,
           seed: Optional[int] = None) -> ScenarioConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r} (expected one of {', '.join(PRESETS)})")
    config = PRESETS[name]()
    update = {}
    if ci:
        update["replications"] = settings.ci_replications
    if replications is not None:
        update["replications"] = replications
    if seed is not None:
        update["seed"] = seed
    return config.model_copy(update=update) if update else config


def load_config(path: str) -> ScenarioConfig:
    with open(path, "r") as f:
        return ScenarioConfig.model_validate_json(f.read())


# ─── Replication loop ────────────────────────────────────

class _Chunk(BaseModel):
    """Work unit for one worker: a replication range at one sweep point."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: ScenarioConfig
    point_index: int
    start: int
    stop: int
    table: Optional[NullQuantileTable] = None
    oracle_W: dict[str, WeightFunction] = {}


def _oracle_costs(model: GaussianModel, pi0: str) -> CostVector:
    if pi0 == "oracle":
        return CostVector(c=model.pi * model.pi0)
    return CostVector.unit(model.group_sizes)


class _Replication:
    """Procedures on one dataset, sharing estimates and cost profiles."""

    def __init__(self, data: GroupedPValues, model: GaussianModel, chunk: _Chunk):
        self.data = data
        self.model = model
        self.chunk = chunk
        self.alpha = chunk.config.alpha
        self._estimates: dict[str, NullEstimates] = {}
        self._profiles = {}
        self._pairs = {}

    def estimates(self, pi0: str) -> NullEstimates:
        if pi0 not in self._estimates:
            self._estimates[pi0] = parse_pi0_mode(pi0, self.data, truth=self.model.pi0.tolist())
        return self._estimates[pi0]

    def profile(self, pi0: str):
        if pi0 not in self._profiles:
            self._profiles[pi0] = min_cost_profile(self.data, CostVector.from_estimates(self.estimates(pi0)))
        return self._profiles[pi0]

    def run(self, spec: ProcedureSpec, bh_outcome: StepUpOutcome) -> tuple[StepUpOutcome, Optional[bool]]:
        name, pi0 = spec.name, spec.pi0
        if name == "bh":
            return bh_outcome, None
        if name == "abh":
            return abh(self.data, self.estimates(pi0), self.alpha), None
        if name == "hzz":
            return hzz(self.data, self.estimates(pi0), self.alpha), None
        if name in ("pro1", "pro2"):
            if pi0 not in self._pairs:
                self._pairs[pi0] = pro1_pro2(self.data, self.estimates(pi0), self.alpha, self.profile(pi0))
            return self._pairs[pi0][0 if name == "pro1" else 1], None
        if name == "ihw":
            return ihw(self.data, self.alpha, profile=self.profile("ne")), None
        if name == "addow":
            return addow(self.data, self.estimates(pi0), self.alpha, profile=self.profile(pi0)), None
        if name == "addow-lcm":
            return addow_lcm(self.data, self.estimates(pi0), self.alpha), None
        if name == "saddow":
            stabilized = saddow(self.data, self.estimates(pi0), self.alpha, self.chunk.config.beta,
                                self.chunk.table, profile=self.profile(pi0))
            return stabilized.outcome, stabilized.signal_detected
        if name == "oracle":
            W = self.chunk.oracle_W[pi0]
            return oracle_mwbh(self.data, self.model, _oracle_costs(self.model, pi0), self.alpha, W=W), None
        raise ValueError(f"unknown procedure {name!r}")


def _run_chunk(chunk: _Chunk) -> np.ndarray:
    """Records of shape (reps, procedures, 6); failed cells are NaN."""
    config = chunk.config
    point = config.sweep[chunk.point_index]
    model = config.model_at(point)
    m1 = int(model.alternative_counts.sum())
    records = np.full((chunk.stop - chunk.start, len(config.procedures), 6), np.nan)

    for row, rep in enumerate(range(chunk.start, chunk.stop)):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, chunk.point_index, rep]))
        data = generate(model, rng=rng)
        bh_outcome = bh(data, config.alpha)
        bh_power = evaluate(bh_outcome.rejections, data).power
        replication = _Replication(data, model, chunk)

        for col, spec in enumerate(config.procedures):
            fallback = False
            try:
                outcome, branch = replication.run(spec, bh_outcome)
            except UndefinedWeightsError:
                outcome, branch, fallback = bh_outcome, None, True
            except Exception as e:
                logger.warning(f"{spec.label} failed at {point.label}, replication {rep}: "
                               f"{type(e).__name__}: {e}")
                continue
            metrics = evaluate(outcome.rejections, data)
            records[row, col] = (
                metrics.fdp,
                metrics.power,
                np.nan if metrics.power_m1 is None else metrics.power_m1,
                diff_pow(metrics.power, bh_power, data.m, m1),
                np.nan if branch is None else float(branch),
                float(fallback),
            )
    return records


def _chunks(config: ScenarioConfig, point_index: int, threads: int, **context) -> list[_Chunk]:
    n_chunks = max(1, min(config.replications, 4 * threads))
    bounds = np.linspace(0, config.replications, n_chunks + 1).astype(int)
    return [
        _Chunk(config=config, point_index=point_index, start=int(a), stop=int(b), **context)
        for a, b in zip(bounds[:-1], bounds[1:]) if b > a
    ]


# ─── Report ──────────────────────────────────────────────

class ReportRow(BaseModel):
    sweep: str
    procedure: str
    fdr: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    fdr_se: Optional[float] = None
    pow: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    pow_se: Optional[float] = None
    diffpow: Optional[float] = None
    branch_rate: Optional[float] = None
    diffpow_se: Optional[float] = None
    pow_m1: Optional[float] = None
    fallback_rate: float = 0.0
    failures: int = 0
    reps: int
    m: Optional[int] = None
    mubar: Optional[float] = None


class ScenarioReport(BaseModel):
    scenario: str = ""
    alpha: Optional[float] = None
    seed: Optional[int] = None
    rows: list[ReportRow] = []


def _mean_se(values: np.ndarray) -> tuple[Optional[float], Optional[float]]:
    values = values[~np.isnan(values)]
    if values.size == 0:
        return None, None
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), se


def _aggregate(point: SweepPoint, specs: list[ProcedureSpec], records: np.ndarray) -> list[ReportRow]:
    rows = []
    for col, spec in enumerate(specs):
        cell = records[:, col, :]
        ok = ~np.isnan(cell[:, _FDP])
        fdr, fdr_se = _mean_se(cell[:, _FDP])
        pow_, pow_se = _mean_se(cell[:, _POW])
        diffpow, diffpow_se = _mean_se(cell[:, _DIFFPOW])
        if spec.name == "bh":
            diffpow, diffpow_se = 0.0, 0.0
        rows.append(ReportRow(
            sweep=point.label,
            procedure=spec.label,
            fdr=fdr,
            fdr_se=fdr_se,
            pow=pow_,
            pow_se=pow_se,
            diffpow=diffpow,
            branch_rate=_mean_se(cell[:, _BRANCH])[0] if spec.name == "saddow" else None,
            diffpow_se=diffpow_se,
            pow_m1=_mean_se(cell[:, _POW_M1])[0],
            fallback_rate=float(cell[ok, _FALLBACK].mean()) if ok.any() else 0.0,
            failures=int((~ok).sum()),
            reps=int(ok.sum()),
            m=point.m,
            mubar=point.mubar,
        ))
    return rows


def run_scenario(config: ScenarioConfig, threads: Optional[int] = None) -> ScenarioReport:
    """Paired Monte Carlo over every sweep point of the scenario."""
    threads = settings.threads if threads is None else max(1, threads)
    report_rows = []
    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for index, point in enumerate(config.sweep):
            model = config.model_at(point)
            table = None
            if any(p.name == "saddow" for p in config.procedures):
                table = get_or_build_table(model.group_sizes, config.alpha,
                                           config.quantile_replicates, config.seed, threads=threads)
            oracle_W = {
                p.pi0: oracle_weight_function(model, _oracle_costs(model, p.pi0), config.alpha)
                for p in config.procedures if p.name == "oracle"
            }
            chunks = _chunks(config, index, threads, table=table, oracle_W=oracle_W)
            logger.info(f"{config.name} {point.label}: {config.replications} replications, "
                        f"{len(config.procedures)} procedures")
            parts = list(pool.map(_run_chunk, chunks)) if pool else [_run_chunk(c) for c in chunks]
            report_rows += _aggregate(point, config.procedures, np.concatenate(parts, axis=0))
    finally:
        if pool:
            pool.shutdown()
    return ScenarioReport(scenario=config.name, alpha=config.alpha, seed=config.seed, rows=report_rows)


def report_frame(report: ScenarioReport) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in report.rows], columns=REPORT_COLUMNS)


def emit_report(report: ScenarioReport, fmt: str, target: Union[str, os.PathLike, TextIO]):
    """JSON keeps full precision; CSV writes 6 significant digits."""
    if fmt == "json":
        text = report.model_dump_json(indent=2) + "\n"
    elif fmt == "csv":
        text = report_frame(report).to_csv(index=False, float_format="%.6g")
    else:
        raise ValueError(f"unknown report format {fmt!r} (expected csv|json)")
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as f:
            f.write(text)


def load_report(path: str) -> ScenarioReport:
    """Read a report written by emit_report (format from the file extension)."""
    if str(path).endswith(".csv"):
        frame = pd.read_csv(path)
        frame = frame.astype(object).where(frame.notna(), None)
        return ScenarioReport(rows=[ReportRow(**rec) for rec in frame.to_dict(orient="records")])
    with open(path, "r") as f:
        return ScenarioReport.model_validate_json(f.read())
