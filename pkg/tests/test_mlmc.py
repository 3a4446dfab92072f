import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlmc_diffusion import mlmc, oracle
from mlmc_diffusion.mlmc import (
    LevelStats, NonConvergenceError, QoI, RateUnavailableError, adaptive_mlmc, bias_estimate,
    debias_level_mean, eps_estimate, fit_rates, level_mean_and_variance, mc_estimate,
    optimal_allocation, predict_cost, start_level_check)


def stats_of(d, level=0, cost=1.0):
    d = np.atleast_2d(np.asarray(d, dtype=float))
    return LevelStats(level, cost).add(d, d)


# ---- statistics

def test_two_scalar_samples():
    Y, V = level_mean_and_variance(stats_of([[0.0], [2.0]]))
    assert Y[0] == 1.0 and V == 2.0


def test_identical_samples_have_zero_variance():
    assert stats_of(np.ones((5, 3))).V == 0.0


def test_variance_sums_coordinates():
    d = np.array([[0.0, 1.0], [2.0, 5.0], [4.0, 0.0]])
    assert stats_of(d).V == pytest.approx(d.var(axis=0, ddof=1).sum(), rel=1e-14)


def test_too_few_samples():
    with pytest.raises(ValueError):
        level_mean_and_variance(stats_of([[1.0]]))


def test_merge_levels_must_match():
    with pytest.raises(ValueError):
        stats_of([[1.0]], level=0).merge(stats_of([[1.0]], level=1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 40), min_size=1, max_size=6))
def test_merge_is_partition_invariant(seed, sizes):
    data = np.random.default_rng(seed).normal(3.0, 2.0, size=(sum(sizes), 3))
    whole = stats_of(data)
    parts = np.split(data, np.cumsum(sizes)[:-1])
    left = LevelStats(0, 1.0)
    for p in parts:
        left = left.merge(stats_of(p))
    right = LevelStats(0, 1.0)
    for p in reversed(parts):
        right = stats_of(p).merge(right)
    for s in (left, right):
        assert s.n == whole.n
        np.testing.assert_allclose(s.mean_d, whole.mean_d, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(s.m2_d, whole.m2_d, rtol=1e-12, atol=1e-12)


# ---- allocation, bias and error algebra

def test_allocation_examples():
    assert optimal_allocation([1.0], [1.0], 0.1) == [200]
    assert optimal_allocation([4.0, 1.0], [1.0, 4.0], 0.1) == [1600, 400]
    assert optimal_allocation([0.0, 1.0], [1.0, 1.0], 0.1)[0] == 0
    with pytest.raises(ValueError):
        optimal_allocation([1.0], [1.0], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-4, 10.0), st.floats(1.0, 1e3)), min_size=1, max_size=6),
       st.floats(1e-3, 0.5), st.integers(0, 2**32 - 1))
def test_allocation_is_cost_optimal(vc, eps, seed):
    V = np.array([v for v, _ in vc])
    C = np.array([c for _, c in vc])
    N = np.array(optimal_allocation(V, C, eps), dtype=float)
    assert np.sum(V / N) <= eps ** 2 / 2 * (1 + 1e-9)
    base = float(N @ C)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        Np = N * (1 + rng.uniform(-0.2, 0.2, size=N.size))
        if np.sum(V / Np) <= eps ** 2 / 2:
            assert Np @ C >= base - C.sum()


def test_bias_examples():
    assert bias_estimate(0.06, 0.0, 0.7, 2) == pytest.approx(0.096076, abs=1e-6)
    assert bias_estimate(0.06, 0.0, 0.7, 2) == pytest.approx(0.06 / (2 ** 0.7 - 1), rel=1e-9)
    assert bias_estimate(0.01, 0.2, 0.7, 2) == pytest.approx(0.197139, abs=1e-6)
    assert bias_estimate(0.0, 0.0, 0.7, 2) == 0.0
    with pytest.raises(ValueError):
        bias_estimate(0.1, 0.1, 0.0, 2)


def test_start_level_examples():
    thr = (math.sqrt(2) - 1) ** 2 / 3
    assert thr == pytest.approx(0.0571910, abs=1e-7)
    assert start_level_check(0.05, 1.0, 1.0, 2)
    assert not start_level_check(0.06, 1.0, 1.0, 2)
    assert start_level_check(0.0, 3.0, 0.5, 4)


def test_eps_example():
    levels = [stats_of([[0.0], [0.0]]), stats_of([[0.0], [0.04]], level=1)]
    # Y_L = 0.02 and V/N = 0.0008 / 2 = 0.0004 on the last level
    assert eps_estimate(levels, 1.0, 2) == pytest.approx(math.sqrt(0.0008), abs=1e-9)
    assert mlmc.eps_from_parts(0.02, 0.0004, 1.0, 2) == pytest.approx(0.0282843, abs=1e-7)
    assert mlmc.eps_from_parts(0.0, 0.0, 1.0, 2) == 0.0


def test_predict_cost_regimes():
    eps = 0.01
    c, regime, mc = predict_cost(0.8, 1.4, 2.0, 3.0, eps)
    assert regime == "beta>1" and c == pytest.approx(6.0 / eps ** 2, rel=1e-9)
    assert mc == pytest.approx(6.0 * eps ** (-2 - 1 / 0.8), rel=1e-9)
    c, regime, _ = predict_cost(0.7, 1.0, 1.0, 1.0, eps)
    assert regime == "beta=1" and c == pytest.approx(eps ** -2 * (math.log(eps) / math.log(2)) ** 2, rel=1e-9)
    c, regime, _ = predict_cost(0.5, 0.5, 1.0, 1.0, eps)
    assert regime == "beta<1" and c == pytest.approx(eps ** -3, rel=1e-9)


def test_fit_rates_on_exact_data():
    lv = [(l, 2.0 ** (-0.7 * l), 3.0 * 2.0 ** (-1.4 * l)) for l in range(1, 7)]
    a, b = fit_rates(lv)
    assert a == pytest.approx(0.7, abs=1e-12) and b == pytest.approx(1.4, abs=1e-12)
    assert fit_rates([(l, 1.0, 5.0) for l in range(3)])[1] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(RateUnavailableError):
        fit_rates([(1, 0.1, 0.1)])
    with pytest.raises(RateUnavailableError):
        fit_rates([(1, 0.1, 0.1), (2, 0.0, 0.1)])


def test_fit_rates_other_base():
    lv = [(l, 3.0 ** (-1.1 * l), 3.0 ** (-2.0 * l)) for l in range(4)]
    a, b = fit_rates(lv, M=3)
    assert a == pytest.approx(1.1, abs=1e-12) and b == pytest.approx(2.0, abs=1e-12)


# ---- debiasing

def test_debias_trivial_cases():
    assert debias_level_mean(0.3, 0.0, 10) == 0.3
    assert debias_level_mean(0.0, 1.0, 10) == 0.0
    with pytest.raises(ValueError):
        debias_level_mean(0.3, -1.0, 10)


def test_debias_converges_quickly():
    calls = []
    v = debias_level_mean(1.0, 1.0, 100, tol=1e-9, max_iter=50,
                          var_fn=lambda b: calls.append(b) or 1.0)
    assert 0.0 < v <= 1.0 and len(calls) < 50
    assert v == pytest.approx(math.sqrt(1.0 - 0.01), abs=1e-8)


def test_debias_multiply_mode_goes_up():
    assert debias_level_mean(0.5, 1.0, 10, mode="multiply") > 0.5


def test_debias_moves_towards_true_norm():
    rng = np.random.default_rng(11)
    b, n, reps = 0.1, 50, 10_000
    mean_vec = np.array([b, 0.0, 0.0, 0.0])
    d = mean_vec + rng.normal(0.0, 0.5, size=(reps, n, 4))
    ybar = d.mean(axis=1)
    V = d.var(axis=1, ddof=1).sum(axis=1)
    raw = np.linalg.norm(ybar, axis=1)
    fixed = np.array([debias_level_mean(r, v, n) for r, v in zip(raw, V)])
    assert abs(fixed.mean() - b) < abs(raw.mean() - b)


# ---- sampling-backed pieces

def test_mc_estimate_constant_qoi(gauss4d):
    s = gauss4d.sampler(T0=2, L=1)
    q = QoI("custom", func=lambda x: np.ones_like(x))
    est, se, nfe = mc_estimate(s, 1, 10, q)
    np.testing.assert_array_equal(est, np.ones(4))
    assert se == 0.0 and nfe == 10 * 4
    with pytest.raises(ValueError):
        mc_estimate(s, 1, 1, q)


def test_mc_estimate_matches_truth(gauss4d):
    s = gauss4d.sampler(L=4)
    n = 10_000
    est, se, nfe = mc_estimate(s, 4, n, gauss4d.qoi(), seed=3)
    assert nfe == n * 32 * 16
    sample = s.sample_path(4, mlmc.PathNoise.make(3, mlmc.STREAM_MC, 4, np.arange(n), 4))
    per_coord = np.sqrt((sample ** 2).var(axis=0, ddof=1) / n)
    assert np.all(np.abs(est - oracle.truth(gauss4d.problem)) < 3 * per_coord)
    assert se == pytest.approx(math.sqrt(np.sum(per_coord ** 2)), rel=1e-9)


def test_masked_qoi_zeroes_observed_coordinates():
    q = QoI("masked-second-moment", mask=[True, False])
    np.testing.assert_array_equal(q(np.array([[3.0, 2.0]])), [[0.0, 4.0]])
    with pytest.raises(ValueError):
        QoI("masked-second-moment")
    with pytest.raises(ValueError):
        QoI("fourth-moment")


def test_loose_tolerance_stops_at_three_levels(gauss4d):
    res = adaptive_mlmc(gauss4d.sampler(L=8), 1.0, gauss4d.qoi(), n0=50)
    assert res.converged and res.L == 2 and len(res.levels) == 3
    assert res.n_per_level == [50, 50, 50]
    assert res.total_nfe == 50 * (32 + 96 + 192)


def test_adaptive_run_is_worker_invariant_and_accurate(gauss4d, tmp_path):
    s = gauss4d.sampler(L=10)
    a = adaptive_mlmc(s, 0.03, gauss4d.qoi(), seed=4, workers=1)
    b = adaptive_mlmc(s, 0.03, gauss4d.qoi(), seed=4, workers=3)
    np.testing.assert_array_equal(a.estimate, b.estimate)
    assert a.n_per_level == b.n_per_level and a.telemetry == b.telemetry
    assert max(a.n_per_level) > mlmc.CHUNK
    assert a.eps_est < 1.2 * 0.03
    assert np.linalg.norm(a.estimate - oracle.truth(gauss4d.problem)) < 3 * 0.03
    mlmc.write_telemetry(tmp_path / "t.csv", a.telemetry, "seed=4")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["# seed=4"] and tuple(rows[1]) == mlmc.TELEMETRY_COLUMNS
    assert len(rows) == 2 + len(a.telemetry)


def test_telescoping_agrees_with_fine_mc(gauss4d):
    s = gauss4d.sampler(L=10)
    res = adaptive_mlmc(s, 0.03, gauss4d.qoi(), seed=9)
    est, se, _ = mc_estimate(s, res.L, 20_000, gauss4d.qoi(), seed=9)
    var_mlmc = sum(st.V / st.n for st in res.levels)
    assert np.linalg.norm(res.estimate - est) < 3 * math.sqrt(var_mlmc + se ** 2)


def test_level_cap_raises_with_result(gauss4d):
    s = gauss4d.sampler(T0=1, L=3)
    with pytest.raises(NonConvergenceError) as info:
        adaptive_mlmc(s, 1e-3, gauss4d.qoi(), n0=20)
    assert not info.value.result.converged and info.value.result.L == 3
    res = adaptive_mlmc(s, 1e-3, gauss4d.qoi(), n0=20, raise_on_failure=False)
    assert not res.converged


def test_adaptive_argument_checks(gauss4d):
    s = gauss4d.sampler(T0=2, L=2)
    with pytest.raises(ValueError):
        adaptive_mlmc(s, 0.0, gauss4d.qoi())
    with pytest.raises(ValueError):
        adaptive_mlmc(s, 0.1, gauss4d.qoi(), l0=1)


def test_start_level_escalates_for_short_chains(gauss4d):
    s = gauss4d.sampler(T0=1, L=10)
    l0 = mlmc.select_start_level(s, gauss4d.qoi(), 0, 2000)
    assert l0 >= 2


def test_screening_levels_and_costs(gauss4d):
    s = gauss4d.sampler(T0=4, L=5)
    out = mlmc.screen_levels(s, gauss4d.qoi(), 1, 4, 200)
    assert [st.level for st in out] == [1, 2, 3, 4]
    assert [st.cost for st in out] == [8, 24, 48, 96]
    assert all(st.n == 200 for st in out)
