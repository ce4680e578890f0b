"""
Grouped FDR - Comprehensive Test Suite
Run with: pytest tests.py -v            (fast checks)
          pytest tests.py -v -m slow    (Monte Carlo checks, CI profile)
"""

import importlib
import io
import itertools
import json
import math
import os

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats
from scipy.optimize import linprog
from statsmodels.stats.multitest import multipletests

from config import settings

# ---------------------------------------------------------------------------
# Keep quantile tables out of the working tree
# ---------------------------------------------------------------------------


@pytest.fixture(autouse=True)
def _isolate_quantile_dir(monkeypatch, tmp_path):
    """Redirect the quantile table cache to a temp directory for every test."""
    monkeypatch.setattr(settings, "quantile_dir", str(tmp_path / "quantile_tables"))
    yield


# ---------------------------------------------------------------------------
# Helpers - reusable factories
# ---------------------------------------------------------------------------

from addow import (
    addow, addow_lcm, addow_weight_function, argmax_weights_at, count_split_profile,
    greedy_profile, ihw, lcm_cost_profile, min_cost_profile,
)
from classic import abh, hzz, hzz_weights, pro1_pro2
from estimation import (
    ecdf, lcm, ne_estimate, oracle_estimate, parse_pi0_mode, storey_estimate, storey_schedule,
)
from models import (
    CostVector, DatasetError, GroupedPValues, MissingLabelsError, MonotonicityError,
    NullEstimates, Pi0Mode, RejectionSet, TableMismatchError, UndefinedWeightsError,
    WeightFunction, WeightVector, diff_pow, dump_dataset, evaluate, fdp, load_dataset,
    power_sample,
)
from oracle import (
    AlternativeCdf, ConcaveAlternative, GaussianModel, critical_alpha, expected_power,
    generate, limiting_fdr, oracle_mwbh, oracle_weight_function, oracle_weights, phibar,
    phibar_inv,
)
from stabilize import NullQuantileTable, null_quantile_table, saddow, sihw, z_statistic
from stepup import (
    bh, crossing_point, g_hat, in_weight_space, mwbh, rejection_counts, wbh,
    weight_function_counts,
)


def _make_data(*groups, labels=None) -> GroupedPValues:
    """GroupedPValues from plain lists, one list per group."""
    return GroupedPValues.from_arrays([np.asarray(g, dtype=float) for g in groups], labels)


def _random_data(rng, G: int, max_size: int, signal: float = 0.0) -> GroupedPValues:
    """Random groups; `signal` > 0 pushes a share of p-values towards 0."""
    groups = []
    for _ in range(G):
        n = int(rng.integers(1, max_size + 1))
        p = rng.uniform(size=n)
        if signal:
            strong = rng.uniform(size=n) < 0.4
            p[strong] = p[strong] ** (1.0 + signal)
        groups.append(p)
    return GroupedPValues.from_arrays(groups)


def _make_model(**overrides) -> GaussianModel:
    defaults = dict(mu=[2.0, 3.0], group_sizes=[40, 60], null_counts=[30, 40])
    defaults.update(overrides)
    return GaussianModel(**defaults)


def _brute_min_cost(data: GroupedPValues, costs: CostVector) -> np.ndarray:
    """minCost by enumerating every count split, summed in group order."""
    positions = [np.concatenate([[0.0], s]) for s in data.sorted_groups]
    best = np.full(data.m + 1, np.inf)
    for split in itertools.product(*[range(n + 1) for n in data.group_sizes]):
        total = 0.0
        for c_g, pos, k in zip(costs.c, positions, split):
            total += c_g * pos[k]
        best[sum(split)] = min(best[sum(split)], total)
    return best


def _textbook_bh(pvalues: np.ndarray, alpha: float) -> int:
    p = np.sort(pvalues)
    m = p.size
    passing = [k for k in range(1, m + 1) if p[k - 1] <= alpha * k / m]
    return max(passing) if passing else 0


# ===================================================================
# 1. MODELS, DATASET I/O & METRICS
# ===================================================================


class TestModels:
    """Domain types, CSV loading and per-replication metrics."""

    def test_load_dataset_groups_in_first_appearance_order(self):
        data = load_dataset(io.StringIO("group,pvalue\nB,0.01\nA,0.5\nB,0.2\n"))
        assert data.G == 2
        assert [g.key for g in data.groups] == ["B", "A"]
        assert data.groups[0].pvalues.tolist() == [0.01, 0.2]
        assert data.m == 3
        assert not data.labeled

    def test_load_dataset_with_labels(self):
        data = load_dataset(io.StringIO("group,pvalue,label\nA,0.01,1\nA,0.7,0\nB,0.03,1\n"))
        assert data.labeled
        assert data.alternative_counts().tolist() == [1, 1]

    @pytest.mark.parametrize("text", [
        "",
        "group,pvalue\n",
        "group,pvalue\nA,1.5\n",
        "group,pvalue\nA,-0.1\n",
        "group,pvalue\nA,abc\n",
        "group,pvalue,label\nA,0.1,1\nA,0.2,\n",
        "group,pvalue,label\nA,0.1,2\n",
        "grp,p\nA,0.1\n",
    ])
    def test_load_dataset_rejects_bad_input(self, text):
        with pytest.raises(DatasetError):
            load_dataset(io.StringIO(text))

    def test_dump_then_load_is_identity(self):
        rng = np.random.default_rng(3)
        data = generate(_make_model(), rng=rng)
        buf = io.StringIO()
        dump_dataset(data, buf)
        buf.seek(0)
        assert load_dataset(buf) == data

    def test_load_dataset_parses_decimal_exactly(self):
        data = load_dataset(io.StringIO("group,pvalue\nA,0.08564916714362436\n"))
        assert data.groups[0].pvalues[0] == float("0.08564916714362436")

    def test_dump_then_load_keeps_every_float(self):
        rng = np.random.default_rng(11)
        values = rng.uniform(size=2000)
        data = _make_data(values)
        buf = io.StringIO()
        dump_dataset(data, buf)
        buf.seek(0)
        assert np.array_equal(load_dataset(buf).groups[0].pvalues, values)

    def test_fdp_and_power(self):
        data = _make_data([0.01, 0.02, 0.5], [0.3], labels=[[1, 0, 0], [1]])
        r = RejectionSet.from_pairs([(0, 0), (0, 1)], G=2)
        assert fdp(r, data) == pytest.approx(0.5)
        assert power_sample(r, data) == pytest.approx(1 / 4)
        metrics = evaluate(r, data)
        assert metrics.power_m1 == pytest.approx(0.5)
        assert metrics.rejections == 2

    def test_empty_rejection_set_has_zero_fdp(self):
        data = _make_data([0.01, 0.5], labels=[[1, 0]])
        assert fdp(RejectionSet.empty(1), data) == 0.0

    def test_metrics_need_labels(self):
        with pytest.raises(MissingLabelsError):
            fdp(RejectionSet.empty(1), _make_data([0.1, 0.2]))

    def test_rejection_index_out_of_range(self):
        data = _make_data([0.1, 0.2], labels=[[1, 0]])
        with pytest.raises(DatasetError):
            fdp(RejectionSet.from_pairs([(0, 5)], G=1), data)

    def test_diff_pow(self):
        assert diff_pow(0.3, 0.2, m=100, m1=20) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            diff_pow(0.3, 0.2, m=100, m1=0)

    def test_null_estimates_pooled_and_range(self):
        est = NullEstimates(pi0_hat=[0.5, 0.9], group_sizes=[10, 30], mode=Pi0Mode.ORACLE)
        assert est.pi0_pooled == pytest.approx(0.25 * 0.5 + 0.75 * 0.9)
        with pytest.raises(ValidationError):
            NullEstimates(pi0_hat=[1.2], group_sizes=[10], mode=Pi0Mode.ORACLE)
        with pytest.raises(ValidationError):
            NullEstimates(pi0_hat=[0.5], group_sizes=[10], mode=Pi0Mode.NE)

    def test_pvalues_are_read_only(self):
        data = _make_data([0.1, 0.2])
        with pytest.raises(ValueError):
            data.groups[0].pvalues[0] = 0.5


# ===================================================================
# 2. NULL PROPORTION ESTIMATION & ECDF / LCM
# ===================================================================


class TestEstimation:

    def test_storey_estimate(self):
        data = _make_data(np.r_[np.full(8, 0.1), 0.7, 0.9])
        est = storey_estimate(data, 0.5)
        # (1 - 8/10 + 1/10) / 0.5
        assert est.pi0_hat[0] == pytest.approx(0.6)
        assert est.mode == Pi0Mode.FIXED_LAMBDA
        assert est.lam == 0.5

    def test_storey_estimate_is_clipped_at_one(self):
        est = storey_estimate(_make_data([0.9, 0.8, 0.7, 0.6]), 0.5)
        assert est.pi0_hat == [1.0]

    def test_storey_lambda_must_be_inside_unit_interval(self):
        with pytest.raises(ValueError):
            storey_estimate(_make_data([0.1]), 1.0)

    def test_storey_schedule(self):
        data = _make_data(np.linspace(0.01, 0.99, 16))
        est = storey_schedule(data, 0.25)
        assert est.lam == pytest.approx(0.5)
        assert est.mode == Pi0Mode.SCHEDULE
        with pytest.raises(ValueError):
            storey_schedule(_make_data([0.5]), 0.25)
        with pytest.raises(ValueError):
            storey_schedule(data, 0.6)

    def test_storey_schedule_on_gaussian_data(self):
        model = GaussianModel.from_fractions(5000, [0.5, 0.5], [0.8, 0.8], [3.0, 3.0])
        est = storey_schedule(generate(model, seed=14), 0.1)
        assert est.lam == pytest.approx(1.0 - 5000 ** -0.1)
        assert est.pi0_pooled == pytest.approx(0.8, abs=0.05)
        assert est.pi0_hat == pytest.approx([0.8, 0.8], abs=0.08)

    def test_parse_pi0_mode(self):
        data = _make_data([0.1, 0.6], [0.2, 0.3, 0.9])
        assert parse_pi0_mode("ne", data).mode == Pi0Mode.NE
        assert parse_pi0_mode("storey:0.5", data).lam == 0.5
        assert parse_pi0_mode("oracle:0.5,0.8", data).pi0_hat == [0.5, 0.8]
        assert parse_pi0_mode("oracle", data, truth=[0.4, 0.6]).pi0_hat == [0.4, 0.6]
        with pytest.raises(ValueError):
            parse_pi0_mode("oracle", data)
        with pytest.raises(ValueError):
            parse_pi0_mode("bogus", data)

    def test_ecdf_with_ties(self):
        f = ecdf(_make_data([0.5, 0.2, 0.2]), 0)
        assert float(f(0.19)) == 0.0
        assert float(f(0.2)) == pytest.approx(2 / 3)
        assert float(f(0.5)) == 1.0

    def test_lcm_single_jump(self):
        maj = lcm(ecdf(_make_data([0.5]), 0))
        assert maj.xs.tolist() == [0.0, 0.5, 1.0]
        assert maj.ys.tolist() == [0.0, 1.0, 1.0]
        assert float(maj.inverse(0.5)) == pytest.approx(0.25)

    def test_lcm_is_a_concave_majorant(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            data = _random_data(rng, 1, 30, signal=2.0)
            f = ecdf(data, 0)
            maj = lcm(f)
            assert np.all(maj(f.knots) >= f.values - 1e-12)
            assert np.all(np.diff(maj.slopes()) <= 1e-12)
            assert float(maj(1.0)) == pytest.approx(1.0)


# ===================================================================
# 3. STEP-UP ENGINE
# ===================================================================


class TestStepUp:

    def test_crossing_point(self):
        assert crossing_point(np.arange(11) / 20) == 0.0
        assert crossing_point(np.arange(11) / 10) == 1.0
        with pytest.raises(MonotonicityError):
            crossing_point([0.0, 0.5, 0.4])

    def test_crossing_point_is_a_fixed_point_and_monotone(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            m = int(rng.integers(1, 30))
            h1 = np.concatenate([[0.0], np.sort(rng.integers(0, m + 1, size=m))]) / m
            h2 = np.maximum(h1, np.concatenate([[0.0], np.sort(rng.integers(0, m + 1, size=m))]) / m)
            u = crossing_point(h1)
            assert h1[round(u * m)] >= u
            assert crossing_point(h2) >= u

    def test_g_hat(self):
        data = _make_data([0.01, 0.2, 0.3, 0.9])
        assert g_hat(data, WeightVector.ones(1), 0.5, 0.2) == pytest.approx(0.25)
        assert g_hat(data, WeightVector.ones(1), 0.0, 0.2) == 0.0
        assert g_hat(data, WeightVector.zeros(1), 1.0, 0.2) == 0.0

    def test_bh_three_points(self):
        out = bh(_make_data([0.01, 0.02, 0.9]), 0.05)
        assert out.n_rejections == 2
        assert out.u_hat == pytest.approx(2 / 3)
        assert out.rejections.pairs() == [(0, 0), (0, 1)]

    def test_bh_six_below_the_line(self):
        p = [0.01, 0.02, 0.05, 0.1, 0.2, 0.25, 0.8, 0.85, 0.9, 0.95]
        out = bh(_make_data(p), 0.5)
        assert out.n_rejections == 6
        assert out.u_hat == pytest.approx(0.6)

    def test_all_ones_rejects_nothing(self):
        out = bh(_make_data([1.0, 1.0, 1.0]), 0.05)
        assert out.u_hat == 0.0
        assert out.n_rejections == 0

    def test_bh_matches_textbook_and_statsmodels(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            data = _random_data(rng, int(rng.integers(1, 4)), 20, signal=3.0)
            pooled = np.concatenate([g.pvalues for g in data.groups])
            out = bh(data, 0.1)
            assert out.n_rejections == _textbook_bh(pooled, 0.1)
            expected = multipletests(pooled, alpha=0.1, method="fdr_bh")[0]
            mine = np.concatenate([
                np.isin(np.arange(g.size), idx) for g, idx in zip(data.groups, out.rejections.indices)
            ])
            assert np.array_equal(mine, expected)

    def test_zero_weight_never_rejects(self):
        data = _make_data([0.0, 0.0], [0.001])
        out = wbh(data, WeightVector(w=[0.0, 2.0]), 0.5)
        assert out.rejections.counts.tolist() == [0, 1]

    def test_scaling_alpha_and_weights(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            data = _random_data(rng, 3, 15, signal=2.0)
            w = WeightVector(w=rng.uniform(0.2, 2.0, size=3))
            a = wbh(data, w, 0.05)
            b = wbh(data, WeightVector(w=w.w / 2.0), 0.1)
            assert a.rejections == b.rejections

    def test_mwbh_constant_function_equals_wbh(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            data = _random_data(rng, 2, 15, signal=2.0)
            w = WeightVector(w=rng.uniform(0.0, 2.0, size=2))
            a = wbh(data, w, 0.2)
            b = mwbh(data, WeightFunction.constant(w, data.m), 0.2)
            assert a.u_hat == b.u_hat
            assert a.rejections == b.rejections

    def test_mwbh_r_sweep_matches_weighted_order_statistics(self):
        rng = np.random.default_rng(10)
        for _ in range(300):
            data = _random_data(rng, 2, 5, signal=2.0)
            m = data.m
            base = rng.uniform(0.1, 2.0, size=2)
            W = WeightFunction(weights=np.outer(1.0 + np.arange(m + 1) / m, base))
            out = mwbh(data, W, 0.3)
            best = 0
            for r in range(1, m + 1):
                u = r / m
                weighted = np.sort(np.concatenate([
                    g.pvalues / W.weights[r, i] for i, g in enumerate(data.groups)
                ]))
                if weighted[r - 1] <= 0.3 * u:
                    best = r
            assert out.u_hat == best / m
            assert out.u_hat == crossing_point(weight_function_counts(data, W, 0.3) / m)

    def test_mwbh_zero_function(self):
        data = _make_data([0.0, 0.01])
        out = mwbh(data, WeightFunction(weights=np.zeros((3, 1))), 0.5)
        assert out.u_hat == 0.0

    def test_mwbh_rejects_decreasing_counts(self):
        data = _make_data([0.01, 0.02])
        W = WeightFunction(weights=np.array([[0.0], [10.0], [0.0]]))
        with pytest.raises(MonotonicityError):
            mwbh(data, W, 0.5)

    def test_rejection_counts_on_grid(self):
        data = _make_data([0.01, 0.2, 0.3, 0.9])
        counts = rejection_counts(data, WeightVector.ones(1), 0.5)
        assert counts.tolist() == [0, 1, 2, 3, 3]

    def test_in_weight_space(self):
        costs = CostVector(c=[0.5, 0.5])
        assert in_weight_space(WeightVector(w=[1.0, 1.0]), costs)
        assert not in_weight_space(WeightVector(w=[2.0, 1.0]), costs)


# ===================================================================
# 4. ADDOW OPTIMIZER
# ===================================================================


def _concave_pvalues(rng, n: int) -> np.ndarray:
    """Sorted p-values with nondecreasing gaps, so the ecdf is already concave."""
    gaps = np.sort(rng.uniform(0.1, 1.0, size=n))
    return np.cumsum(gaps) / gaps.sum() * rng.uniform(0.3, 0.95)


def _water_filling_value(majorants, sizes, costs, budget: float) -> float:
    """max sum_g m_g L_g(x_g) subject to sum_g c_g x_g <= budget, as a linear program."""
    G = len(majorants)
    rows, rhs = [], []
    for g, maj in enumerate(majorants):
        for slope, x0, y0 in zip(maj.slopes(), maj.xs[:-1], maj.ys[:-1]):
            row = np.zeros(2 * G)
            row[g], row[G + g] = -slope, 1.0
            rows.append(row)
            rhs.append(y0 - slope * x0)
    rows.append(np.concatenate([costs, np.zeros(G)]))
    rhs.append(budget)
    res = linprog(np.concatenate([np.zeros(G), -np.asarray(sizes, dtype=float)]),
                  A_ub=np.array(rows), b_ub=np.array(rhs), bounds=[(0.0, 1.0)] * (2 * G),
                  method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0
    return -res.fun


class TestAddow:

    def test_single_group_profile(self):
        profile = min_cost_profile(_make_data([0.4, 0.1]), CostVector(c=[1.0]))
        assert profile.min_cost.tolist() == [0.0, 0.1, 0.4]

    def test_two_group_profile(self):
        profile = min_cost_profile(_make_data([0.1], [0.2]), CostVector(c=[0.5, 0.5]))
        assert profile.min_cost == pytest.approx([0.0, 0.05, 0.15])
        assert profile.split(1).tolist() == [1, 0]

    def test_ties_give_larger_counts_to_lower_groups(self):
        profile = min_cost_profile(_make_data([0.1], [0.1]), CostVector(c=[0.5, 0.5]))
        assert profile.split(1).tolist() == [1, 0]

    def test_profile_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            G = int(rng.integers(1, 4))
            data = _random_data(rng, G, 12 // G)
            costs = CostVector(c=rng.uniform(0.05, 1.0, size=G))
            profile = min_cost_profile(data, costs)
            assert np.array_equal(profile.min_cost, _brute_min_cost(data, costs))
            assert np.array_equal(profile.splits.sum(axis=1), np.arange(data.m + 1))
            assert np.all(np.diff(profile.min_cost) >= 0)
            for r in range(data.m + 1):
                ks = profile.split(r)
                total = 0.0
                for c_g, pos, k in zip(costs.c, profile.positions, ks):
                    total += c_g * pos[k]
                assert total == profile.min_cost[r]

    def test_greedy_matches_dp_on_convex_costs(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            prefix = [
                np.concatenate([[0.0], np.cumsum(np.sort(rng.uniform(size=int(rng.integers(1, 6)))))])
                for _ in range(int(rng.integers(1, 4)))
            ]
            dp_cost, _ = count_split_profile(prefix)
            greedy_cost, splits = greedy_profile(prefix)
            assert np.allclose(dp_cost, greedy_cost, rtol=1e-12, atol=1e-12)
            assert np.array_equal(splits.sum(axis=1), np.arange(dp_cost.size))

    def test_greedy_matches_dp_on_lcm_positions(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            data = _random_data(rng, 2, 6, signal=2.0)
            costs = CostVector.unit(data.group_sizes)
            lcm_profile = lcm_cost_profile(data, costs)
            prefix = [c_g * pos for c_g, pos in zip(costs.c, lcm_profile.positions)]
            dp_cost, _ = count_split_profile(prefix)
            assert np.allclose(dp_cost, lcm_profile.min_cost, rtol=1e-12, atol=1e-12)

    def test_argmax_weights_two_singletons(self):
        data = _make_data([0.1], [0.2])
        est = ne_estimate(data)
        w = argmax_weights_at(data, est, 0.5, 0.3)
        assert w.w == pytest.approx([0.1 / 0.15, 0.2 / 0.15], rel=1e-12)
        assert in_weight_space(w, CostVector.from_estimates(est))
        assert argmax_weights_at(data, est, 0.5, 0.0).w.tolist() == [0.0, 0.0]
        assert argmax_weights_at(data, est, 0.01, 0.5).w.tolist() == [0.0, 0.0]

    def test_argmax_weights_are_maximal(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            data = _random_data(rng, 2, 5, signal=2.0)
            est = oracle_estimate(data, rng.uniform(0.3, 1.0, size=2))
            costs = CostVector.from_estimates(est)
            brute = _brute_min_cost(data, costs)
            for u in (0.2, 0.5, 1.0):
                w = argmax_weights_at(data, est, 0.3, u)
                best = max(r for r in range(data.m + 1) if brute[r] <= 0.3 * u * (1 + 1e-12))
                assert round(g_hat(data, w, u, 0.3) * data.m) == best
                assert w.budget(costs) <= 1.0 + 1e-9

    def test_nothing_below_alpha(self):
        data = _make_data([0.5, 0.6, 0.9])
        out = addow(data, ne_estimate(data), 0.05)
        assert out.u_hat == 0.0
        assert out.n_rejections == 0
        assert out.weights_at_u.w.tolist() == [0.0]

    def test_single_group_ne_equals_bh(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            data = _random_data(rng, 1, 50, signal=3.0)
            assert addow(data, ne_estimate(data), 0.1).rejections == bh(data, 0.1).rejections

    def test_ihw_is_addow_with_unit_estimates(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            data = _random_data(rng, 3, 15, signal=2.0)
            a = ihw(data, 0.1)
            b = addow(data, oracle_estimate(data, [1.0, 1.0, 1.0]), 0.1)
            assert a.procedure == "ihw"
            assert a.u_hat == b.u_hat
            assert a.rejections == b.rejections
            assert np.array_equal(a.weights_at_u.w, b.weights_at_u.w)

    def test_reductions_to_wbh_and_mwbh(self):
        rng = np.random.default_rng(15)
        for _ in range(1000):
            data = _random_data(rng, int(rng.integers(1, 4)), 50 // 3, signal=2.0)
            est = oracle_estimate(data, rng.uniform(0.3, 1.0, size=data.G))
            out = addow(data, est, 0.2)
            assert out.n_rejections == round(out.u_hat * data.m)
            assert in_weight_space(out.weights_at_u, CostVector.from_estimates(est))
            assert wbh(data, out.weights_at_u, 0.2).rejections == out.rejections
            W = addow_weight_function(data, est, 0.2)
            via_mwbh = mwbh(data, W, 0.2)
            assert via_mwbh.u_hat == out.u_hat
            assert via_mwbh.rejections == out.rejections

    def test_threshold_is_crossing_of_best_counts(self):
        rng = np.random.default_rng(16)
        for _ in range(200):
            data = _random_data(rng, 2, 5, signal=2.0)
            est = ne_estimate(data)
            brute = _brute_min_cost(data, CostVector.from_estimates(est))
            best = [0] + [
                max(r for r in range(data.m + 1) if brute[r] <= 0.3 * (k / data.m) * (1 + 1e-12))
                for k in range(1, data.m + 1)
            ]
            assert addow(data, est, 0.3).u_hat == crossing_point(np.array(best) / data.m)

    def test_addow_dominates_fixed_weights(self):
        rng = np.random.default_rng(17)
        for _ in range(300):
            data = _random_data(rng, 3, 12, signal=2.0)
            est = oracle_estimate(data, rng.uniform(0.3, 1.0, size=3))
            costs = CostVector.from_estimates(est)
            raw = WeightVector(w=rng.uniform(0.0, 3.0, size=3))
            w = WeightVector(w=raw.w / raw.budget(costs) * (1 - 1e-12))
            assert addow(data, est, 0.1).n_rejections >= wbh(data, w, 0.1).n_rejections

    def test_addow_lcm_rejections_bounded_by_threshold(self):
        rng = np.random.default_rng(18)
        for _ in range(200):
            data = _random_data(rng, 2, 20, signal=3.0)
            est = ne_estimate(data)
            out = addow_lcm(data, est, 0.2)
            assert out.procedure == "addow-lcm"
            assert out.n_rejections <= round(out.u_hat * data.m)
            assert in_weight_space(out.weights_at_u, CostVector.from_estimates(est))

    def test_addow_lcm_on_full_null_stays_small(self):
        rng = np.random.default_rng(19)
        data = GroupedPValues.from_arrays([rng.uniform(size=500), rng.uniform(size=500)])
        out = addow_lcm(data, ne_estimate(data), 0.05)
        assert out.u_hat < 0.02

    def test_addow_lcm_matches_continuous_solver_on_concave_data(self):
        rng = np.random.default_rng(25)
        for _ in range(20):
            G = int(rng.integers(2, 4))
            data = GroupedPValues.from_arrays([_concave_pvalues(rng, int(rng.integers(5, 26))) for _ in range(G)])
            est = oracle_estimate(data, rng.uniform(0.3, 1.0, size=G).tolist())
            costs = CostVector.from_estimates(est)
            majorants = [lcm(ecdf(data, g)) for g in range(G)]
            passing = [
                k for k in range(1, data.m + 1)
                if _water_filling_value(majorants, data.group_sizes, costs.c, 0.2 * k / data.m) >= k - 1e-7
            ]
            expected = max(passing) / data.m if passing else 0.0
            out = addow_lcm(data, est, 0.2)
            assert out.u_hat == pytest.approx(expected, abs=1e-9)
            assert out.u_hat == pytest.approx(addow(data, est, 0.2).u_hat, abs=1e-9)

    def test_estimates_must_match_data(self):
        data = _make_data([0.1, 0.2], [0.3])
        other = ne_estimate(_make_data([0.1], [0.3, 0.4]))
        with pytest.raises(ValueError):
            addow(data, other, 0.1)


# ===================================================================
# 5. COMPARISON PROCEDURES
# ===================================================================


class TestClassic:

    def test_abh_with_ne_is_bh(self):
        rng = np.random.default_rng(20)
        for _ in range(100):
            data = _random_data(rng, 2, 20, signal=2.0)
            assert abh(data, ne_estimate(data), 0.1).rejections == bh(data, 0.1).rejections

    def test_abh_doubles_thresholds(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            data = _random_data(rng, 2, 20, signal=2.0)
            out = abh(data, oracle_estimate(data, [0.5, 0.5]), 0.1)
            base = bh(data, 0.1)
            assert out.weights_at_u.w.tolist() == [2.0, 2.0]
            assert set(base.rejections.pairs()) <= set(out.rejections.pairs())

    def test_hzz_weights_sit_on_the_budget(self):
        data = _make_data(np.linspace(0.01, 0.9, 10), np.linspace(0.02, 0.95, 10))
        est = oracle_estimate(data, [0.5, 0.9])
        w = hzz_weights(est)
        assert w.budget(CostVector.from_estimates(est)) == pytest.approx(1.0, abs=1e-12)
        assert w.w == pytest.approx([0.5 / (0.5 * 0.3), 0.1 / (0.9 * 0.3)])

    def test_hzz_equal_estimates_is_abh(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            data = _random_data(rng, 2, 20, signal=2.0)
            est = oracle_estimate(data, [0.6, 0.6])
            assert hzz(data, est, 0.1).rejections == abh(data, est, 0.1).rejections

    def test_hzz_undefined_without_signal(self):
        data = _make_data([0.1, 0.2], [0.3])
        with pytest.raises(UndefinedWeightsError):
            hzz(data, ne_estimate(data), 0.1)
        with pytest.raises(UndefinedWeightsError):
            pro1_pro2(data, ne_estimate(data), 0.1)

    def test_pro1_pro2_properties(self):
        rng = np.random.default_rng(23)
        checked = 0
        for _ in range(500):
            data = _random_data(rng, 2, 20, signal=3.0)
            est = storey_estimate(data, 0.5)
            if est.pi0_pooled >= 1.0:
                continue
            pro1, pro2 = pro1_pro2(data, est, 0.2)
            u_m = pro1.u_hat
            assert u_m <= addow(data, est, 0.2).u_hat
            assert in_weight_space(pro1.weights_at_u, CostVector.from_estimates(est))
            if g_hat(data, pro1.weights_at_u, u_m, 0.2) >= u_m:
                assert pro2.n_rejections >= pro1.n_rejections
            checked += 1
        assert checked > 100

    def test_pro1_pro2_track_bh_under_full_null(self):
        rng = np.random.default_rng(24)
        draws = 100
        counts = np.zeros((draws, 3))
        u_ms = np.zeros(draws)
        for i in range(draws):
            data = GroupedPValues.from_arrays([rng.uniform(size=200), rng.uniform(size=200)])
            est = oracle_estimate(data, [0.9, 0.95])
            pro1, pro2 = pro1_pro2(data, est, 0.05)
            base = bh(data, 0.05)
            counts[i] = (base.n_rejections, pro1.n_rejections, pro2.n_rejections)
            u_ms[i] = pro1.u_hat
            if pro1.u_hat == 0.0:
                assert counts[i].tolist() == [0, 0, 0]
        assert counts[:, 1].mean() <= counts[:, 0].mean() + 0.5
        assert counts[:, 2].mean() <= counts[:, 0].mean() + 0.5
        assert u_ms.mean() <= 0.005


# ===================================================================
# 6. STABILIZATION
# ===================================================================


def _brute_z(data: GroupedPValues, alpha: float) -> float:
    brute = _brute_min_cost(data, CostVector.unit(data.group_sizes))
    m = data.m
    best = -math.inf
    for k in range(1, m + 1):
        budget = (k / m) * alpha
        r = max(r for r in range(m + 1) if brute[r] <= budget * (1 + 1e-12))
        best = max(best, r / m - budget)
    return math.sqrt(m) * best


def _make_table(samples, **overrides) -> NullQuantileTable:
    defaults = dict(m=4, group_sizes=[2, 2], alpha=0.05, replicates=len(samples), seed=0,
                    samples=sorted(samples))
    defaults.update(overrides)
    return NullQuantileTable(**defaults)


class TestStabilize:

    def test_z_all_ones(self):
        z = z_statistic(_make_data([1.0, 1.0, 1.0, 1.0]), 0.05)
        assert z == pytest.approx(-0.05 / 4 * 2)

    def test_z_single_zero(self):
        assert z_statistic(_make_data([0.0]), 0.05) == pytest.approx(0.95)

    def test_z_matches_brute_force(self):
        rng = np.random.default_rng(24)
        for _ in range(300):
            data = _random_data(rng, int(rng.integers(1, 3)), 8, signal=2.0)
            assert z_statistic(data, 0.2) == pytest.approx(_brute_z(data, 0.2), abs=1e-12)

    def test_quantile_rank_and_monotonicity(self):
        table = _make_table([float(i) for i in range(1, 11)])
        assert table.quantile(0.05) == 10.0
        assert table.quantile(0.5) == 6.0
        qs = [table.quantile(b) for b in (0.01, 0.1, 0.3, 0.6, 0.9)]
        assert all(a >= b for a, b in zip(qs, qs[1:]))

    def test_table_validation(self):
        with pytest.raises(ValidationError):
            NullQuantileTable(m=4, group_sizes=[2, 2], alpha=0.05, replicates=2, seed=0,
                              samples=[2.0, 1.0])
        with pytest.raises(ValidationError):
            _make_table([1.0], group_sizes=[1, 1])

    def test_null_table_is_deterministic(self):
        a = null_quantile_table(20, [10, 10], 0.1, 12, seed=5, threads=1)
        b = null_quantile_table(20, [10, 10], 0.1, 12, seed=5, threads=1)
        c = null_quantile_table(20, [10, 10], 0.1, 12, seed=5, threads=2)
        assert a == b == c
        assert a.replicates == 12
        assert null_quantile_table(20, [10, 10], 0.1, 1, seed=5).replicates == 1

    def test_table_json_uses_b_key(self):
        table = _make_table([0.1, 0.2])
        payload = json.loads(table.model_dump_json(by_alias=True))
        assert payload["B"] == 2
        assert NullQuantileTable.model_validate_json(table.model_dump_json(by_alias=True)) == table

    def test_table_mismatch(self):
        table = _make_table([0.1, 0.2])
        data = _make_data([0.1, 0.2, 0.3], [0.4])
        with pytest.raises(TableMismatchError):
            saddow(data, ne_estimate(data), 0.05, 0.1, table)

    def test_strong_signal_runs_addow(self):
        model = _make_model(mu=[5.0, 6.0])
        data = generate(model, seed=1)
        table = null_quantile_table(data.m, data.group_sizes.tolist(), 0.05, 50, seed=2)
        est = ne_estimate(data)
        result = saddow(data, est, 0.05, 0.1, table)
        assert result.signal_detected
        assert result.z > result.quantile
        assert result.outcome.rejections == addow(data, est, 0.05).rejections
        assert result.outcome.procedure == "saddow"

    def test_no_signal_falls_back_to_bh(self):
        data = _make_data([1.0, 1.0], [1.0, 1.0])
        table = null_quantile_table(4, [2, 2], 0.05, 30, seed=3)
        result = saddow(data, ne_estimate(data), 0.05, 0.5, table)
        assert not result.signal_detected
        assert result.outcome.rejections == bh(data, 0.05).rejections

    def test_sihw_is_saddow_without_estimation(self):
        data = generate(_make_model(mu=[5.0, 6.0]), seed=2)
        table = null_quantile_table(data.m, data.group_sizes.tolist(), 0.05, 30, seed=4)
        stabilized = sihw(data, 0.05, 0.1, table)
        plain = saddow(data, ne_estimate(data), 0.05, 0.1, table)
        assert stabilized.outcome.procedure == "sihw"
        assert stabilized.signal_detected == plain.signal_detected
        assert stabilized.outcome.rejections == plain.outcome.rejections


class TestQuantileStore:

    def test_build_then_load_from_cache(self, monkeypatch):
        import quantile_store

        first = quantile_store.get_or_build_table([5, 5], 0.05, 10, seed=1)
        path = quantile_store.table_path([5, 5], 0.05, 10, 1)
        assert os.path.exists(path)

        def _fail(*args, **kwargs):
            raise AssertionError("table should come from the cache")

        monkeypatch.setattr(quantile_store, "null_quantile_table", _fail)
        assert quantile_store.get_or_build_table([5, 5], 0.05, 10, seed=1) == first

    def test_unreadable_cache_is_rebuilt(self):
        import quantile_store

        path = quantile_store.table_path([4], 0.05, 5, 0)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w") as f:
            f.write("{not json")
        table = quantile_store.get_or_build_table([4], 0.05, 5, seed=0)
        assert table.replicates == 5
        assert quantile_store.load_table(path) == table


# ===================================================================
# 7. GAUSSIAN ORACLE
# ===================================================================


class TestOracle:

    def test_phibar_round_trip(self):
        x = np.concatenate([np.logspace(-10, -1, 200), np.linspace(0.1, 1 - 1e-10, 200)])
        assert np.max(np.abs(phibar(phibar_inv(x)) - x)) <= 1e-12

    def test_alternative_cdf_shape(self):
        alt = AlternativeCdf(mu=1.0)
        assert float(alt.cdf(0.0)) == 0.0
        assert float(alt.cdf(1.0)) == 1.0
        x = np.linspace(0.01, 0.99, 1000)
        assert np.all(np.diff(alt.cdf(x), 2) < 0)
        h = 1e-6
        numeric = (alt.cdf(x + h) - alt.cdf(x - h)) / (2 * h)
        assert np.allclose(alt.density(x), numeric, rtol=1e-6, atol=0.0)
        assert np.allclose(alt.inverse_density(alt.density(x)), x, rtol=1e-9)

    def test_model_validation(self):
        with pytest.raises(ValidationError):
            _make_model(null_counts=[40, 40])
        with pytest.raises(ValidationError):
            _make_model(mu=[0.0, 1.0])
        model = GaussianModel.from_fractions(100, [0.5, 0.5], [0.8, 0.8], [1.0, 2.0])
        assert model.group_sizes == [50, 50]
        assert model.null_counts == [40, 40]
        assert model.pi0_pooled == pytest.approx(0.8)

    def test_generate_is_labeled_and_deterministic(self):
        model = _make_model()
        data = generate(model, seed=4)
        assert data.group_sizes.tolist() == model.group_sizes
        assert data.alternative_counts().tolist() == model.alternative_counts.tolist()
        assert not data.groups[0].labels[:30].any()
        assert generate(model, seed=4) == data

    def test_generated_pvalues_follow_their_distributions(self):
        n = 100_000
        model = GaussianModel(mu=[1.0, 3.0], group_sizes=[2 * n, n + 1], null_counts=[n, 1])
        data = generate(model, seed=8)
        nulls = data.groups[0].pvalues[:n]
        assert stats.kstest(nulls, stats.uniform.cdf).statistic < 0.01
        for group, alt in zip(data.groups, model.alternatives()):
            alternatives = group.pvalues[group.labels]
            assert alternatives.size == n
            assert stats.kstest(alternatives, alt.cdf).statistic < 0.01

    def test_huge_effect_gives_tiny_pvalues(self):
        data = generate(_make_model(mu=[40.0, 40.0]), seed=1)
        assert np.all(data.groups[0].pvalues[30:] < 1e-100)

    def test_symmetric_model_has_equal_weights(self):
        model = _make_model(mu=[2.0, 2.0], group_sizes=[100, 100], null_counts=[80, 80])
        costs = CostVector.unit(model.group_sizes)
        w = oracle_weights(model, costs, 0.05, 0.5)
        assert w.w == pytest.approx([1.0, 1.0], abs=1e-12)

    def test_budget_and_first_order_conditions(self):
        model = _make_model(mu=[1.0, 2.0])
        costs = CostVector(c=model.pi * model.pi0)
        for u in (0.05, 0.3, 1.0):
            w = oracle_weights(model, costs, 0.05, u)
            assert abs(w.budget(costs) - 1.0) <= 1e-10
            au = 0.05 * u
            grad = model.alternative_counts / model.m * np.array(
                [float(alt.density(au * w_g)) for alt, w_g in zip(model.alternatives(), w.w)]
            ) * au
            projected = grad - grad.dot(costs.c) / costs.c.dot(costs.c) * costs.c
            assert np.linalg.norm(projected) <= 1e-8

    def test_matches_grid_search_on_budget_line(self):
        model = _make_model(mu=[1.0, 2.0], group_sizes=[50, 50], null_counts=[25, 25])
        costs = CostVector.unit(model.group_sizes)
        w = oracle_weights(model, costs, 0.05, 0.5)
        w1 = np.linspace(0.0, 1.0 / costs.c[0], 100001)
        w2 = np.maximum((1.0 - costs.c[0] * w1) / costs.c[1], 0.0)
        au = 0.5 * 0.05
        alt1, alt2 = model.alternatives()
        powers = 0.25 * alt1.cdf(au * w1) + 0.25 * alt2.cdf(au * w2)
        best = int(np.argmax(powers))
        assert w.w == pytest.approx([w1[best], w2[best]], abs=1e-4)
        assert expected_power(model, w, 0.05, 0.5) >= powers[best] - 1e-12

    def test_saturated_budget(self):
        model = _make_model(null_counts=[20, 30])
        costs = CostVector(c=model.pi * model.pi0)
        w = oracle_weights(model, costs, 0.9, 1.0)
        assert w.w == pytest.approx([1 / 0.9, 1 / 0.9])

    def test_oracle_mwbh_runs(self):
        model = _make_model()
        costs = CostVector(c=model.pi * model.pi0)
        W = oracle_weight_function(model, costs, 0.1)
        assert W.weights[0].tolist() == [0.0, 0.0]
        out = oracle_mwbh(generate(model, seed=6), model, costs, 0.1, W=W)
        assert out.procedure == "oracle"
        assert in_weight_space(out.weights_at_u, costs)

    def test_critical_alpha(self):
        assert critical_alpha(_make_model(), [1.0, 1.0]) == 0.0
        model = GaussianModel(mu=[1.0], group_sizes=[2], null_counts=[1])
        concave = ConcaveAlternative(cdf_fn=lambda x: 2 * x - x ** 2,
                                     density_fn=lambda x: 2 - 2 * x, density_at_zero=2.0)
        assert critical_alpha(model, [1.0], alternatives=[concave]) == pytest.approx(2 / 3, abs=1e-12)

    def test_critical_alpha_below_one_for_concave_alternatives(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            G = int(rng.integers(1, 5))
            sizes = rng.integers(2, 60, size=G)
            nulls = [int(rng.integers(1, s)) for s in sizes]
            model = GaussianModel(mu=[1.0] * G, group_sizes=sizes.tolist(), null_counts=nulls)
            ks = rng.uniform(1.01, 5.0, size=G)
            alternatives = [
                ConcaveAlternative(cdf_fn=lambda x, k=k: 1 - (1 - x) ** k,
                                   density_fn=lambda x, k=k: k * (1 - x) ** (k - 1),
                                   density_at_zero=k)
                for k in ks
            ]
            pibar = rng.uniform(0.05, 1.0, size=G)
            value = critical_alpha(model, pibar, alternatives=alternatives)
            assert 0.0 < value < 1.0
            assert value == pytest.approx(np.min(pibar / (model.pi0 + (1 - model.pi0) * ks)), abs=1e-12)

    def test_limiting_fdr(self):
        model = _make_model(group_sizes=[50, 50], null_counts=[40, 40])
        assert limiting_fdr(model, model.pi0, 0.05) == 0.05
        assert limiting_fdr(model, [1.0, 1.0], 0.05) == pytest.approx(0.04)
        assert limiting_fdr(_make_model(), [1.0, 1.0], 0.05) is None


# ===================================================================
# 8. SCENARIO HARNESS
# ===================================================================

from harness import (
    REPORT_COLUMNS, ProcedureSpec, ScenarioConfig, ScenarioReport, SweepPoint,
    emit_report, load_report, preset, run_scenario,
)


def _make_config(**overrides) -> ScenarioConfig:
    defaults = dict(
        name="tiny",
        group_fractions=[0.5, 0.5],
        null_fractions=[0.7, 0.8],
        mu_rule=[(0.0, 1.0), (0.0, 2.0)],
        alpha=0.1,
        beta=0.2,
        procedures=[
            "bh", "ihw", "addow[oracle]", "addow-lcm[ne]", "abh[storey:0.5]", "hzz[ne]",
            "pro1[oracle]", "pro2[oracle]", "saddow[ne]", "oracle[ne]",
        ],
        replications=4,
        quantile_replicates=20,
        seed=3,
        sweep=[SweepPoint(m=40, mubar=2.0)],
    )
    defaults.update(overrides)
    return ScenarioConfig(**defaults)


class TestHarness:

    def test_procedure_spec_parse(self):
        spec = ProcedureSpec.parse("addow[storey:0.5]")
        assert (spec.name, spec.pi0) == ("addow", "storey:0.5")
        assert ProcedureSpec.parse("bh").pi0 == "ne"
        assert spec.label == "addow[storey:0.5]"
        with pytest.raises(ValidationError):
            ProcedureSpec.parse("magic")

    def test_ihw_takes_only_ne(self):
        assert ProcedureSpec.parse("ihw[ne]").label == "ihw[ne]"
        with pytest.raises(ValidationError):
            ProcedureSpec.parse("ihw[storey:0.5]")
        with pytest.raises(ValidationError):
            _make_config(procedures=["bh", "ihw[oracle]"])

    def test_presets(self):
        s1 = preset("scenario1")
        assert s1.alpha == 0.05 and s1.beta == 0.001
        assert s1.quantile_replicates == 10000
        assert [p.mubar for p in s1.sweep][:4] == [0.01, 0.02, 0.05, 0.5]
        assert s1.sweep[-1].mubar == 3.0 and all(p.m == 4000 for p in s1.sweep)
        assert s1.model_at(s1.sweep[-1]).mu == [3.0, 6.0]
        labels = {p.label for p in s1.procedures}
        assert {"pro2[ne]", "abh[oracle]", "hzz[oracle]", "pro2[oracle]", "saddow[oracle]"} <= labels
        assert {"bh[ne]", "ihw[ne]", "oracle[ne]", "saddow[ne]", "oracle[oracle]", "addow[oracle]"} <= labels
        s2 = preset("scenario2")
        assert s2.alpha == 0.7 and s2.beta is None
        model = s2.model_at(s2.sweep[0])
        assert model.group_sizes == [1000, 9000]
        assert model.null_counts == [50, 7650]
        assert model.mu == [2.0, 1.7]
        s3 = preset("scenario3", ci=True)
        assert s3.replications == settings.ci_replications
        assert len(s3.sweep) == 12
        with pytest.raises(ValueError):
            preset("scenario9")

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            _make_config(beta=None)
        with pytest.raises(ValidationError):
            _make_config(procedures=["oracle[storey:0.5]"])
        with pytest.raises(ValidationError):
            _make_config(group_fractions=[0.5, 0.6])

    def test_run_scenario(self):
        report = run_scenario(_make_config(), threads=1)
        rows = {row.procedure: row for row in report.rows}
        assert len(report.rows) == 10
        assert rows["bh[ne]"].diffpow == 0.0
        assert rows["hzz[ne]"].fallback_rate == 1.0
        assert rows["saddow[ne]"].branch_rate is not None
        assert rows["ihw[ne]"].branch_rate is None
        for row in report.rows:
            assert row.failures == 0
            assert row.reps == 4
            assert 0.0 <= row.fdr <= 1.0
            assert 0.0 <= row.pow <= 1.0

    def test_single_replication(self):
        report = run_scenario(_make_config(procedures=["bh"], replications=1), threads=1)
        assert len(report.rows) == 1
        assert report.rows[0].fdr_se == 0.0

    def test_run_is_independent_of_thread_count(self):
        config = _make_config(procedures=["bh", "ihw", "addow[storey:0.5]"], replications=6)
        assert run_scenario(config, threads=1) == run_scenario(config, threads=2)

    def test_emit_csv_header_and_json_round_trip(self, tmp_path):
        report = run_scenario(_make_config(procedures=["bh", "ihw"], replications=2), threads=1)
        buf = io.StringIO()
        emit_report(report, "csv", buf)
        header = buf.getvalue().splitlines()[0].split(",")
        assert header[:8] == ["sweep", "procedure", "fdr", "fdr_se", "pow", "pow_se", "diffpow", "branch_rate"]
        path = tmp_path / "report.json"
        emit_report(report, "json", str(path))
        assert load_report(str(path)) == report
        csv_path = tmp_path / "report.csv"
        emit_report(report, "csv", str(csv_path))
        assert len(load_report(str(csv_path)).rows) == 2

    def test_empty_report_is_header_only(self):
        buf = io.StringIO()
        emit_report(ScenarioReport(), "csv", buf)
        assert buf.getvalue().strip() == ",".join(REPORT_COLUMNS)


# ===================================================================
# 9. COMMAND LINE
# ===================================================================

import cli


def _write(tmp_path, name: str, text: str) -> str:
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestCli:

    def test_analyze_bh_csv(self, tmp_path, capsys):
        path = _write(tmp_path, "data.csv", "group,pvalue\nA,0.01\nA,0.02\nA,0.9\n")
        assert cli.main(["analyze", "--input", path, "--procedure", "bh", "--alpha", "0.05"]) == 0
        marked = load_dataset(io.StringIO(capsys.readouterr().out))
        assert marked.groups[0].labels.tolist() == [True, True, False]

    def test_analyze_json(self, tmp_path, capsys):
        path = _write(tmp_path, "data.csv", "group,pvalue\nA,0.01\nB,0.02\nA,0.9\n")
        code = cli.main(["analyze", "--input", path, "--procedure", "addow", "--alpha", "0.05",
                         "--pi0-mode", "ne", "--format", "json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["procedure"] == "addow"
        assert payload["n_rejections"] == 2
        assert payload["u_hat"] == pytest.approx(2 / 3)
        assert [tuple(r) for r in payload["rejections"]] == [("A", 0), ("B", 0)]

    def test_usage_errors_exit_2(self, tmp_path):
        path = _write(tmp_path, "data.csv", "group,pvalue\nA,0.01\n")
        assert cli.main(["analyze", "--input", path, "--procedure", "magic", "--alpha", "0.05"]) == 2
        assert cli.main(["analyze", "--input", path, "--procedure", "bh"]) == 2
        assert cli.main(["analyze", "--input", path, "--procedure", "saddow", "--alpha", "0.05"]) == 2
        assert cli.main(["frobnicate"]) == 2

    def test_lcm_flag_needs_addow(self, tmp_path, capsys):
        path = _write(tmp_path, "data.csv", "group,pvalue\nA,0.01\nB,0.02\n")
        assert cli.main(["analyze", "--input", path, "--procedure", "bh", "--alpha", "0.05", "--lcm"]) == 2
        assert "--lcm only applies to addow" in capsys.readouterr().err
        assert cli.main(["analyze", "--input", path, "--procedure", "addow", "--alpha", "0.05", "--lcm"]) == 0

    def test_runtime_errors_exit_1(self, tmp_path, capsys):
        path = _write(tmp_path, "bad.csv", "group,pvalue\nA,7\n")
        assert cli.main(["analyze", "--input", path, "--procedure", "bh", "--alpha", "0.05"]) == 1
        assert capsys.readouterr().err.startswith("error[DatasetError]:")
        path = _write(tmp_path, "one.csv", "group,pvalue\nA,0.01\nB,0.5\n")
        assert cli.main(["analyze", "--input", path, "--procedure", "hzz", "--alpha", "0.05"]) == 1
        assert "error[UndefinedWeightsError]" in capsys.readouterr().err

    def test_null_quantile_and_saddow(self, tmp_path, capsys):
        table_path = str(tmp_path / "t.json")
        assert cli.main(["null-quantile", "--group-sizes", "2,1", "--alpha", "0.05",
                         "--replicates", "15", "--seed", "1", "--out", table_path]) == 0
        with open(table_path) as f:
            assert json.load(f)["B"] == 15
        path = _write(tmp_path, "data.csv", "group,pvalue\nA,0.001\nA,0.002\nB,0.003\n")
        code = cli.main(["analyze", "--input", path, "--procedure", "saddow", "--alpha", "0.05",
                         "--beta", "0.5", "--table", table_path, "--format", "json"])
        assert code == 0
        assert "signal_detected" in json.loads(capsys.readouterr().out)

    def test_oracle_command(self, tmp_path, capsys):
        path = _write(tmp_path, "model.json", _make_model().model_dump_json())
        assert cli.main(["oracle", "--model", path, "--alpha", "0.05", "--u", "0.2"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["critical_alpha"] == 0.0
        assert len(payload["weights"]) == 2

    def test_simulate_is_deterministic(self, tmp_path):
        config_path = _write(tmp_path, "config.json", _make_config(
            procedures=["bh", "ihw", "addow[oracle]"], replications=3,
        ).model_dump_json())
        outputs = []
        for name in ("a.csv", "b.csv"):
            out = str(tmp_path / name)
            assert cli.main(["simulate", "--config", config_path, "--seed", "7", "--out", out]) == 0
            with open(out, "rb") as f:
                outputs.append(f.read())
        assert outputs[0] == outputs[1]

    def test_every_library_module_is_reachable(self):
        reached = set(itertools.chain.from_iterable(cli.SUBCOMMAND_MODULES.values()))
        assert reached == {
            "models", "estimation", "stepup", "addow", "classic", "stabilize",
            "quantile_store", "oracle", "harness",
        }
        for name in reached:
            importlib.import_module(name)


# ===================================================================
# 10. MONTE CARLO CHECKS (slow, CI profile)
# ===================================================================


def _rows(report: ScenarioReport) -> dict:
    return {row.procedure: row for row in report.rows}


@pytest.mark.slow
class TestMonteCarlo:

    def test_fdr_levels_strong_signal(self):
        config = _make_config(
            name="fdr-levels",
            null_fractions=[0.8, 0.8],
            alpha=0.05,
            beta=None,
            procedures=["bh", "ihw", "addow[oracle]"],
            replications=settings.ci_replications,
            sweep=[SweepPoint(m=2000, mubar=3.0)],
        )
        rows = _rows(run_scenario(config, threads=settings.threads))
        assert rows["bh[ne]"].fdr == pytest.approx(0.04, abs=0.008)
        assert rows["ihw[ne]"].fdr == pytest.approx(0.04, abs=0.012)
        assert rows["addow[oracle]"].fdr == pytest.approx(0.05, abs=0.012)

    def test_power_ordering_strong_signal(self):
        config = _make_config(
            name="power-order",
            alpha=0.05,
            beta=None,
            procedures=[
                "bh", "ihw", "addow[oracle]", "abh[oracle]", "hzz[oracle]", "pro1[oracle]",
                "pro2[oracle]", "oracle[ne]", "oracle[oracle]",
            ],
            replications=settings.ci_replications,
            sweep=[SweepPoint(m=4000, mubar=3.0)],
        )
        rows = _rows(run_scenario(config, threads=settings.threads))
        best = rows["addow[oracle]"].pow
        for label, row in rows.items():
            if label not in ("addow[oracle]", "oracle[oracle]"):
                assert best >= row.pow - 0.005, label
        assert best == pytest.approx(rows["oracle[oracle]"].pow, abs=0.01)

    def test_ihw_loses_to_bh_when_signal_is_in_the_small_group(self):
        config = preset("scenario2", ci=True, seed=1).model_copy(
            update={"procedures": [ProcedureSpec.parse(p) for p in ("bh", "ihw", "addow[oracle]")]}
        )
        assert [p.mubar for p in config.sweep] == [1.7, 1.8, 1.9, 2.0, 2.1, 2.2, 2.3]
        report = run_scenario(config, threads=settings.threads)
        for point in config.sweep:
            rows = {row.procedure: row for row in report.rows if row.sweep == point.label}
            assert rows["ihw[ne]"].diffpow < 0, point.label
            assert rows["addow[oracle]"].diffpow > 0, point.label

    def test_fdr_approaches_alpha_as_m_grows(self):
        config = _make_config(
            name="fdr-trend",
            null_fractions=[0.8, 0.8],
            alpha=0.05,
            beta=None,
            procedures=["addow[oracle]"],
            replications=settings.ci_replications,
            sweep=[SweepPoint(m=m, mubar=3.0) for m in (500, 2000, 5000)],
        )
        rows = run_scenario(config, threads=settings.threads).rows
        assert [row.m for row in rows] == [500, 2000, 5000]
        for prev, nxt in zip(rows, rows[1:]):
            slack = 2 * math.sqrt(prev.fdr_se ** 2 + nxt.fdr_se ** 2)
            assert abs(nxt.fdr - 0.05) <= abs(prev.fdr - 0.05) + slack, nxt.sweep

    def test_stabilization_test_level_under_full_null(self):
        table = null_quantile_table(100, [50, 50], 0.05, 200, seed=10)
        rng = np.random.default_rng(11)
        hits = 0
        draws = 300
        for _ in range(draws):
            data = GroupedPValues.from_arrays([rng.uniform(size=50), rng.uniform(size=50)])
            hits += z_statistic(data, 0.05) > table.quantile(0.1)
        assert hits / draws <= 0.1 + 3 * math.sqrt(0.09 / draws)

    def test_stabilization_detects_strong_signal(self):
        config = _make_config(
            name="stabilized",
            null_fractions=[0.8, 0.8],
            alpha=0.05,
            beta=0.05,
            procedures=["saddow[ne]"],
            replications=100,
            quantile_replicates=200,
            sweep=[SweepPoint(m=1000, mubar=3.0)],
        )
        rows = _rows(run_scenario(config, threads=settings.threads))
        assert rows["saddow[ne]"].branch_rate >= 0.99

    def test_stabilization_controls_fdr_at_weak_signal(self):
        config = _make_config(
            name="weak-signal",
            null_fractions=[0.8, 0.8],
            alpha=0.05,
            beta=0.05,
            procedures=["bh", "addow[oracle]", "saddow[oracle]"],
            replications=settings.replications,
            quantile_replicates=settings.quantile_replicates,
            sweep=[SweepPoint(m=1000, mubar=0.01)],
        )
        rows = _rows(run_scenario(config, threads=settings.threads))
        assert rows["saddow[oracle]"].fdr <= 0.06
        assert rows["addow[oracle]"].fdr >= 0.06
        assert rows["saddow[oracle]"].branch_rate < 0.5
