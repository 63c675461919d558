import numpy as np
import pytest

from calsbi.problems import (Dataset, GridOracle, analytic_posterior,
                             get_problem, grid_posterior, load_dataset,
                             mixture_demo_densities, simulate_dataset,
                             MIXTURE_BLACK_SIGMAS, MIXTURE_RED_SIGMAS,
                             MIXTURE_WEIGHTS)


def test_zero_noise_simulation_is_identity():
    problem = get_problem("gaussian-linear")
    theta = np.array([[0.3, -0.7]])
    x = problem.simulate(theta, np.random.default_rng(0), zero_noise=True)
    np.testing.assert_array_equal(x, theta)


def test_same_seed_gives_bit_identical_datasets():
    a = simulate_dataset("gaussian-linear", 256, seed=7)
    b = simulate_dataset("gaussian-linear", 256, seed=7)
    np.testing.assert_array_equal(a.thetas, b.thetas)
    np.testing.assert_array_equal(a.xs, b.xs)


def test_dataset_row_count():
    ds = simulate_dataset("gaussian-linear", 1024, seed=1)
    assert ds.count == 1024


def test_unknown_problem_and_bad_count_fail():
    with pytest.raises(KeyError):
        simulate_dataset("slcp", 10, seed=0)
    with pytest.raises(ValueError):
        simulate_dataset("gaussian-linear", 0, seed=0)


def test_density_only_problem_has_no_simulator():
    problem = get_problem("mixture-1d-demo")
    with pytest.raises(ValueError, match="density-only"):
        problem.simulate(np.zeros((1, 1)), np.random.default_rng(0))


def test_simulated_parameters_respect_prior_support():
    for pid in ("gaussian-linear", "nonlinear-2d"):
        ds = simulate_dataset(pid, 500, seed=3)
        assert get_problem(pid).prior.in_support(ds.thetas).all()


def test_dataset_file_round_trip_is_bit_exact(tmp_path):
    ds = simulate_dataset("nonlinear-2d", 128, seed=9)
    path = tmp_path / "d.sbid"
    ds.save(path)
    back = load_dataset(path)
    assert back.problem_id == "nonlinear-2d"
    assert back.seed == 9
    np.testing.assert_array_equal(back.thetas, ds.thetas)
    np.testing.assert_array_equal(back.xs, ds.xs)


def test_dataset_file_rejects_bad_magic_and_truncation(tmp_path):
    ds = simulate_dataset("gaussian-linear", 16, seed=2)
    path = tmp_path / "d.sbid"
    ds.save(path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.sbid"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_dataset(bad)
    trunc = tmp_path / "trunc.sbid"
    trunc.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_dataset(trunc)


def test_csv_export_has_header_and_rows(tmp_path):
    ds = simulate_dataset("gaussian-linear", 8, seed=5)
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t0,t1,x0,x1"
    assert len(lines) == 9
    row = [float(v) for v in lines[1].split(",")]
    assert row[0] == ds.thetas[0, 0]  # 17 significant digits round-trip


# -- analytic oracle ------------------------------------------------------------


def test_analytic_posterior_conjugate_update():
    problem = get_problem("gaussian-linear")
    problem.noise_sigma = 1.0
    oracle = analytic_posterior(problem)
    assert oracle.coef == pytest.approx(0.5)
    assert oracle.std ** 2 == pytest.approx(0.5)


def test_analytic_posterior_rejects_non_conjugate():
    with pytest.raises(ValueError):
        analytic_posterior(get_problem("nonlinear-2d"))


def test_analytic_posterior_quadrature_normalization():
    oracle = analytic_posterior(get_problem("gaussian-linear"))
    x = np.array([[1.2, -0.4]])
    span = np.linspace(-4, 4, 401)
    step = span[1] - span[0]
    a, b = np.meshgrid(span, span, indexing="ij")
    grid = np.stack([a.ravel(), b.ravel()], axis=1)
    ld = oracle.log_density(grid, np.repeat(x, grid.shape[0], axis=0))
    assert np.sum(np.exp(ld)) * step * step == pytest.approx(1.0, abs=1e-3)


# -- grid oracle ------------------------------------------------------------------


def test_grid_masses_sum_to_one():
    problem = get_problem("nonlinear-2d")
    oracle = grid_posterior(problem, np.array([1.0, 1.0]), resolution=128)
    assert oracle.masses.sum() == pytest.approx(1.0, abs=1e-6)


def test_grid_rejects_coarse_resolution():
    with pytest.raises(ValueError, match="resolution"):
        grid_posterior(get_problem("gaussian-linear"), np.zeros(2), resolution=8)


def test_grid_matches_analytic_oracle_at_cell_centers():
    problem = get_problem("gaussian-linear")
    x = np.array([0.6, -0.9])
    grid = grid_posterior(problem, x, resolution=512)
    analytic = analytic_posterior(problem)
    c0, c1 = np.meshgrid(grid.centers[0], grid.centers[1], indexing="ij")
    pts = np.stack([c0.ravel(), c1.ravel()], axis=1)
    ld_true = analytic.log_density(pts, np.repeat(x.reshape(1, 2), pts.shape[0], axis=0))
    diff = np.abs(grid.log_dens.ravel() - ld_true)
    assert diff.max() <= 1e-2


def test_grid_converges_as_resolution_doubles():
    problem = get_problem("gaussian-linear")
    x = np.array([0.5, 0.1])
    coarse = grid_posterior(problem, x, resolution=512)
    fine = grid_posterior(problem, x, resolution=1024)
    rng = np.random.default_rng(0)
    probes = analytic_posterior(problem).sample(x.reshape(1, 2), rng, 200)
    delta = np.abs(coarse.log_density(probes) - fine.log_density(probes))
    assert delta.max() < 5e-3


def test_nonlinear_posterior_is_bimodal_in_sign():
    problem = get_problem("nonlinear-2d")
    oracle = grid_posterior(problem, np.array([1.0, 1.0]), resolution=256)
    maxima = oracle.local_maxima()
    assert len(maxima) >= 2
    signs = {np.sign(m[0]) for m in maxima}
    assert signs == {-1.0, 1.0}


def test_grid_log_density_is_minus_inf_outside_bounds():
    problem = get_problem("nonlinear-2d")
    oracle = grid_posterior(problem, np.array([1.0, 1.0]), resolution=64)
    assert oracle.log_density(np.array([[4.0, 0.0]]))[0] == -np.inf


# -- mixture demo densities --------------------------------------------------------


def test_mixture_densities_integrate_to_one():
    span = np.linspace(-8, 9, 200_001)
    step = span[1] - span[0]
    for dens in mixture_demo_densities():
        assert np.sum(dens.pdf(span)) * step == pytest.approx(1.0, abs=1e-4)


def test_mixture_constants_match_demo_specification():
    black, red = mixture_demo_densities()
    assert black.sigmas == MIXTURE_BLACK_SIGMAS == (0.9, 0.4)
    assert red.sigmas == MIXTURE_RED_SIGMAS == (0.7, 0.2)
    assert black.weights == red.weights == MIXTURE_WEIGHTS == (0.7, 0.3)


def test_mixture_sampling_matches_mixture_cdf():
    import math

    def phi(z):
        return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))

    black, _ = mixture_demo_densities()
    draws = black.sample(np.random.default_rng(0), 200_000)
    cut = 0.6
    expected = (0.7 * (1.0 - phi((cut + 1.0) / 0.9))
                + 0.3 * (1.0 - phi((cut - 1.5) / 0.4)))
    assert np.mean(draws > cut) == pytest.approx(expected, abs=0.005)
