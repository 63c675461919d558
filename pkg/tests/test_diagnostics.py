import math

import numpy as np
import pytest

from calsbi import covreg
from calsbi.diagnostics import (CoverageCurve, calibration_error,
                                conservativeness_error, coverage_auc,
                                curve_from_rank_statistics, ecp_grid_hpdr,
                                ecp_rank_based, expected_log_posterior,
                                hpdr_intervals_1d, ks_statistic, mixture_demo,
                                rank_statistic_sample, sbc_histogram,
                                write_coverage_csv, write_metrics_csv,
                                write_sbc_csv)
from calsbi.estimators import Prior, PriorPosterior
from calsbi.problems import analytic_posterior, get_problem, simulate_dataset


def phi(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def test_curve_validation():
    with pytest.raises(ValueError):
        CoverageCurve([0.5, 0.4], [0.5, 0.4], 10, "rank-based")
    with pytest.raises(ValueError):
        CoverageCurve([0.4, 0.5], [0.5, 1.4], 10, "rank-based")


def test_ecp_counting_example():
    curve = curve_from_rank_statistics(np.array([0.2, 0.6, 0.9, 0.4]), [0.5])
    assert curve.ecp[0] == 0.5


def test_rank_based_ecp_on_oracle_close_to_diagonal():
    problem = get_problem("gaussian-linear")
    oracle = analytic_posterior(problem)
    ds = simulate_dataset(problem, 2000, seed=31)
    curve = ecp_rank_based(oracle, ds.thetas, ds.xs, num_samples=512,
                           rng=np.random.default_rng(1), prior=problem.prior,
                           chunk=256)
    assert np.max(np.abs(curve.ecp - curve.levels)) <= 0.03
    assert np.all(np.diff(curve.ecp) >= 0)  # monotone in the level


def test_prior_as_posterior_is_calibrated():
    problem = get_problem("gaussian-linear")
    ds = simulate_dataset(problem, 2000, seed=32)
    curve = ecp_rank_based(PriorPosterior(problem.prior), ds.thetas, ds.xs,
                           num_samples=512, rng=np.random.default_rng(2),
                           prior=problem.prior, chunk=256)
    assert np.max(np.abs(curve.ecp - curve.levels)) <= 0.03


def test_rank_based_rejects_empty_test_set():
    problem = get_problem("gaussian-linear")
    with pytest.raises(ValueError, match="empty"):
        rank_statistic_sample(analytic_posterior(problem), np.zeros((0, 2)),
                              np.zeros((0, 2)), 8,
                              covreg.PriorProposal(problem.prior),
                              np.random.default_rng(0))


def test_grid_hpdr_full_support_at_level_near_one():
    problem = get_problem("gaussian-linear")
    oracle = analytic_posterior(problem)
    ds = simulate_dataset(problem, 50, seed=33)
    curve = ecp_grid_hpdr(oracle, ds.thetas, ds.xs, problem,
                          levels=[0.9995], resolution=64)
    assert curve.ecp[0] == 1.0


def test_grid_hpdr_rejects_high_dimension():
    problem = get_problem("gaussian-linear")
    with pytest.raises(ValueError, match="dim"):
        ecp_grid_hpdr(analytic_posterior(problem), np.zeros((3, 3)),
                      np.zeros((3, 3)), problem, levels=[0.5])


def test_grid_and_rank_estimators_agree_on_oracle():
    problem = get_problem("gaussian-linear")
    oracle = analytic_posterior(problem)
    ds = simulate_dataset(problem, 400, seed=34)
    levels = np.linspace(0.05, 0.95, 19)
    rank = ecp_rank_based(oracle, ds.thetas, ds.xs, levels=levels,
                          num_samples=512, rng=np.random.default_rng(3),
                          prior=problem.prior, chunk=128)
    grid = ecp_grid_hpdr(oracle, ds.thetas, ds.xs, problem, levels=levels,
                         resolution=128)
    assert np.max(np.abs(rank.ecp - grid.ecp)) <= 0.05


def test_hpdr_interval_of_standard_normal_is_central():
    seg = hpdr_intervals_1d(
        lambda t: np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi),
        bounds=(-6.0, 6.0), level=2 * phi(1.0) - 1.0, resolution=4096)
    assert len(seg) == 1
    cell = 12.0 / 4096
    assert seg[0][0] == pytest.approx(-1.0, abs=cell * 2)
    assert seg[0][1] == pytest.approx(1.0, abs=cell * 2)


# -- scalar metrics -------------------------------------------------------------


def test_auc_zero_on_diagonal():
    levels = np.linspace(0.05, 0.95, 19)
    assert coverage_auc(CoverageCurve(levels, levels, 10, "rank-based")) == 0.0


def test_auc_of_saturated_curve_with_nineteen_levels():
    levels = np.linspace(0.05, 0.95, 19)
    curve = CoverageCurve(levels, np.ones(19), 10, "rank-based")
    assert coverage_auc(curve) == pytest.approx(0.475, abs=1e-12)


def test_auc_sign_for_underdispersed_gaussian():
    # model = true posterior with half the standard deviation (1D closed form)
    levels = np.linspace(0.05, 0.95, 19)
    z = np.array([math.sqrt(2) * _erfinv(lev) for lev in levels])
    ecp = np.array([2 * phi(0.5 * zz) - 1 for zz in z])
    curve = CoverageCurve(levels, ecp, 10, "rank-based")
    assert ecp[np.argmin(np.abs(levels - 0.9))] == pytest.approx(0.5887, abs=1e-3)
    assert coverage_auc(curve) < 0


def _erfinv(y):
    # bisection is plenty for test tolerances
    lo, hi = -6.0, 6.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if math.erf(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_calibration_and_conservativeness_errors_by_hand():
    curve = CoverageCurve([0.25, 0.5, 0.75], [0.3, 0.45, 0.8], 10, "rank-based")
    assert calibration_error(curve) == pytest.approx(0.05)
    assert conservativeness_error(curve) == pytest.approx(0.05 / 3)
    diag = CoverageCurve([0.25, 0.5, 0.75], [0.25, 0.5, 0.75], 10, "rank-based")
    assert calibration_error(diag) == 0.0
    assert conservativeness_error(diag) == 0.0
    above = CoverageCurve([0.25, 0.5, 0.75], [0.3, 0.6, 0.9], 10, "rank-based")
    assert conservativeness_error(above) == 0.0
    assert calibration_error(above) > 0.0


def test_calibration_error_dominates_conservativeness_error(rng):
    for _ in range(200):
        n = int(rng.integers(2, 20))
        levels = np.sort(rng.uniform(0.01, 0.99, n))
        levels = np.unique(levels)
        if levels.size < 2:
            continue
        ecp = rng.uniform(0, 1, levels.size)
        curve = CoverageCurve(levels, ecp, 10, "rank-based")
        cal = calibration_error(curve)
        cons = conservativeness_error(curve)
        assert cal >= cons >= 0.0


def test_grid_hpdr_curve_is_monotone():
    problem = get_problem("gaussian-linear")
    oracle = analytic_posterior(problem)
    ds = simulate_dataset(problem, 100, seed=41)
    curve = ecp_grid_hpdr(oracle, ds.thetas, ds.xs, problem,
                          levels=np.linspace(0.05, 0.95, 19), resolution=64)
    assert np.all(np.diff(curve.ecp) >= 0)


def test_ks_single_midpoint_value():
    assert ks_statistic([0.5]) == 0.5


def test_ks_of_exact_grid_is_one_over_n():
    n = 25
    assert ks_statistic(np.arange(1, n + 1) / n) == pytest.approx(1.0 / n)


def test_ks_matches_analytic_beta_distance():
    rng = np.random.default_rng(0)
    draws = rng.beta(2.0, 2.0, 100_000)
    x = 0.5 - math.sqrt(3) / 6
    expected = abs(3 * x ** 2 - 2 * x ** 3 - x)
    assert ks_statistic(draws) == pytest.approx(expected, abs=0.005)


def test_ks_permutation_invariant(rng):
    vals = rng.random(100)
    assert ks_statistic(vals) == ks_statistic(vals[::-1])
    assert ks_statistic(vals) == ks_statistic(rng.permutation(vals))


def test_ks_rejects_out_of_range():
    with pytest.raises(ValueError):
        ks_statistic([0.2, 1.4])


def test_expected_log_posterior_of_uniform_prior():
    prior = Prior.uniform_box([-1.0, -1.0], [1.0, 1.0])
    pp = PriorPosterior(prior)
    rng = np.random.default_rng(0)
    thetas = prior.sample(rng, 50)
    report = expected_log_posterior(pp, thetas, np.zeros((50, 2)), prior=prior)
    assert report.value == pytest.approx(math.log(0.25), abs=1e-12)
    assert report.excluded == 0
    assert report.prior_baseline == pytest.approx(math.log(0.25), abs=1e-12)
    again = expected_log_posterior(pp, thetas, np.zeros((50, 2)), prior=prior)
    assert again.value == report.value


def test_expected_log_posterior_counts_support_violations():
    prior = Prior.uniform_box([-1.0], [1.0])
    pp = PriorPosterior(prior)
    thetas = np.array([[0.0], [2.0], [0.5]])
    report = expected_log_posterior(pp, thetas, np.zeros((3, 1)))
    assert report.excluded == 1
    assert report.value == pytest.approx(math.log(0.5))


def test_sbc_histogram_uniform_grid_has_equal_counts():
    vals = np.arange(1, 101) / 100.0
    hist = sbc_histogram(vals, bins=10)
    np.testing.assert_array_equal(hist.counts, 10)
    assert hist.counts.sum() == hist.total == 100


def test_sbc_histogram_mass_at_zero_and_validation():
    hist = sbc_histogram(np.zeros(7), bins=5)
    assert hist.counts[0] == 7 and hist.counts[1:].sum() == 0
    with pytest.raises(ValueError):
        sbc_histogram([0.5], bins=1)
    with pytest.raises(ValueError):
        sbc_histogram([1.5], bins=4)


def test_oracle_rank_statistics_pass_chi_square_uniformity():
    problem = get_problem("gaussian-linear")
    oracle = analytic_posterior(problem)
    ds = simulate_dataset(problem, 10_000, seed=35)
    proposal = covreg.DensityProposal(oracle)
    alphas = rank_statistic_sample(oracle, ds.thetas, ds.xs, 256, proposal,
                                   np.random.default_rng(4), chunk=512)
    hist = sbc_histogram(alphas, bins=20)
    expected = hist.total / hist.bins
    chi2 = float(np.sum((hist.counts - expected) ** 2 / expected))
    assert chi2 < 43.8  # 99th percentile of chi-square with 19 dof


# -- mixture demo --------------------------------------------------------------------


def test_mixture_demo_detects_overconfidence():
    report = mixture_demo(n_samples=1000, level=0.9, seed=0)
    assert report.ecp < 0.9
    assert len(report.segments) >= 2


def test_mixture_demo_self_test_recovers_level():
    report = mixture_demo(n_samples=1000, level=0.9, seed=0, self_test=True)
    assert report.ecp == pytest.approx(0.9, abs=0.03)


def test_mixture_demo_regions_nest_with_level():
    big = mixture_demo(n_samples=10, level=0.9, seed=0)
    small = mixture_demo(n_samples=10, level=0.5, seed=0)
    length = lambda segs: sum(hi - lo for lo, hi in segs)
    assert length(small.segments) < length(big.segments)


# -- CSV output -----------------------------------------------------------------------


def test_csv_writers_round_trip(tmp_path):
    curve = CoverageCurve([0.25, 0.5], [0.3, 0.55], 100, "rank-based", 64)
    write_coverage_csv(tmp_path / "coverage.csv", [curve])
    lines = (tmp_path / "coverage.csv").read_text().strip().splitlines()
    assert lines[0] == "level,ecp,method,n,L"
    assert len(lines) == 3
    assert "rank-based" in lines[1]

    write_metrics_csv(tmp_path / "metrics.csv", {"auc": 0.125})
    text = (tmp_path / "metrics.csv").read_text()
    assert "auc,0.125" in text

    hist = sbc_histogram(np.linspace(0.01, 0.99, 50), bins=5)
    write_sbc_csv(tmp_path / "sbc.csv", hist)
    lines = (tmp_path / "sbc.csv").read_text().strip().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert len(lines) == 6
