"""Tests for proposal construction and bank sampling."""

import numpy as np
import pytest

from maplink.proposal import (
    ParameterVector,
    PopulationPrior,
    TabulatedProposal,
    VhkGrid,
    adapt_population_proposal,
    build_pilot_proposal,
    default_vh_k_grid,
    load_vh_k_grid,
    pixel_ess_under_proposal,
    population_prior_density,
    sample_bank,
    save_vh_k_grid,
)


# --- population prior ---------------------------------------------------------

def test_prior_density_positive_at_center():
    assert population_prior_density(1000, 1000, 0.5) > 0.0


def test_prior_density_log_symmetry_with_jacobian():
    # in log space the density is symmetric; in n space the 1/n factor skews it
    n_hi = 1000 * np.e**0.5
    n_lo = 1000 * np.e**-0.5
    d_hi = population_prior_density(n_hi, 1000, 0.5)
    d_lo = population_prior_density(n_lo, 1000, 0.5)
    assert d_hi * n_hi == pytest.approx(d_lo * n_lo, rel=1e-12)


def test_prior_concentrates_as_sigma_shrinks():
    at_center = [population_prior_density(1000, 1000, s) for s in (0.5, 0.1, 0.02)]
    off_center = [population_prior_density(1500, 1000, s) for s in (0.5, 0.1, 0.02)]
    assert np.all(np.diff(at_center) > 0)
    assert off_center[2] < off_center[0] * 1e-6


def test_prior_rejects_invalid():
    with pytest.raises(ValueError):
        population_prior_density(0, 1000, 0.5)
    with pytest.raises(ValueError):
        PopulationPrior(reported_population=1000, log_sd=0.0)


# --- tabulated proposal ----------------------------------------------------------

def test_tabulated_proposal_density_lookup():
    prop = TabulatedProposal(support=np.array([10, 20, 30]), mass=np.array([0.2, 0.3, 0.5]))
    assert prop.density(20) == pytest.approx(0.3)
    assert prop.density(15) == 0.0
    assert prop.density(31) == 0.0
    assert np.allclose(prop.density(np.array([10, 30, 99])), [0.2, 0.5, 0.0])


def test_tabulated_proposal_validation():
    with pytest.raises(ValueError):
        TabulatedProposal(support=np.array([10, 10]), mass=np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        TabulatedProposal(support=np.array([10, 20]), mass=np.array([0.5, 0.6]))


# --- pilot proposal ----------------------------------------------------------------

def test_pilot_no_exclusion_keeps_full_support():
    draws = [((i,), 0.1 + 0.8 * i / 9) for i in range(10)]
    prop = build_pilot_proposal(draws, max_observed_prevalence=1.0, n_bins=10)
    assert np.all(prop.draw_probabilities > 0.0)


def test_pilot_cap_excludes_high_prevalence():
    draws = [(("lo",), 0.3), (("hi",), 0.97)]
    prop = build_pilot_proposal(draws, max_observed_prevalence=0.95, n_bins=20)
    probs = prop.draw_probabilities
    assert probs[1] == 0.0 and probs[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        prop.prior_to_proposal_ratio(np.array([0.97]))


def test_pilot_equal_bin_frequencies_give_equal_mass():
    draws = [(("a", i), 0.2) for i in range(5)] + [(("b", i), 0.7) for i in range(5)]
    prop = build_pilot_proposal(draws, n_bins=2)
    probs = prop.draw_probabilities
    assert np.allclose(probs, 0.1)
    # region mass equal even though one bin could be over-represented
    ratio = prop.prior_to_proposal_ratio(np.array([0.2, 0.7]))
    assert ratio[0] == pytest.approx(ratio[1])


def test_pilot_flattens_unbalanced_frequencies():
    # 8 draws in one bin, 2 in another: proposal mass equalises per bin
    draws = [(("a", i), 0.2) for i in range(8)] + [(("b", i), 0.7) for i in range(2)]
    prop = build_pilot_proposal(draws, n_bins=2)
    probs = prop.draw_probabilities
    assert probs[:8].sum() == pytest.approx(0.5)
    assert probs[8:].sum() == pytest.approx(0.5)


def test_pilot_empty_errors():
    with pytest.raises(ValueError):
        build_pilot_proposal([])


# --- adaptive population proposal ------------------------------------------------

def test_adapt_zero_iterations_is_flat():
    prop = adapt_population_proposal(0.5, population_range=(300, 400), iterations=0, tail_to=450)
    core = prop.mass[prop.support <= 400]
    assert np.allclose(core, core[0])


def test_adapt_flat_prior_stays_flat():
    # a single reference pixel with an (effectively) flat prior over a narrow
    # range: the ESS profile is symmetric so the proposal barely moves
    prop = adapt_population_proposal(
        8.0, population_range=(300, 320), iterations=10, tail_to=340
    )
    core = prop.mass[prop.support <= 320]
    assert core.max() / core.min() < 1.02


def test_adapt_mass_preserving_probability_vector():
    prop = adapt_population_proposal(0.5, population_range=(260, 800), iterations=10, tail_to=900)
    assert np.all(prop.mass >= 0.0)
    assert prop.mass.sum() == pytest.approx(1.0, abs=1e-9)


def test_adapt_tail_linear_to_zero():
    prop = adapt_population_proposal(0.5, population_range=(260, 10_000), iterations=0)
    tail = prop.mass[prop.support > 10_000]
    support_tail = prop.support[prop.support > 10_000]
    assert support_tail[-1] == 11_550
    assert tail[-1] == 0.0
    q_at_hi = prop.mass[prop.support == 10_000][0]
    expected = q_at_hi * (11_550 - support_tail) / (11_550 - 10_000)
    assert np.allclose(tail, expected)
    assert prop.support[-1] == 11_550 and prop.mass[prop.support > 11_500][-1] == 0.0


def test_adapt_two_pixel_balance_and_concentration():
    prop = adapt_population_proposal(
        0.5,
        population_range=(260, 10_000),
        iterations=10,
        reference_populations=np.array([300, 1000]),
    )
    e300 = pixel_ess_under_proposal(prop, 300, 0.5)
    e1000 = pixel_ess_under_proposal(prop, 1000, 0.5)
    assert max(e300, e1000) / min(e300, e1000) < 1.05
    # mass moved toward the tighter low-population prior, above the flat share
    low = prop.mass[(prop.support >= 260) & (prop.support <= 400)].sum()
    flat_share = 141 / prop.support.size
    assert low > 3 * flat_share


def test_adapt_reduces_pixel_ess_spread():
    flat = adapt_population_proposal(0.5, iterations=0, reference_stride=40)
    adapted = adapt_population_proposal(0.5, iterations=10, reference_stride=40)
    ns = range(300, 10_001, 700)
    spread = lambda prop: (
        max(pixel_ess_under_proposal(prop, n, 0.5) for n in ns)
        / min(pixel_ess_under_proposal(prop, n, 0.5) for n in ns)
    )
    assert spread(adapted) < spread(flat) / 5.0


def test_adapt_validates_inputs():
    with pytest.raises(ValueError):
        adapt_population_proposal(0.5, population_range=(500, 400))
    with pytest.raises(ValueError):
        adapt_population_proposal(0.5, population_range=(260, 10_000), tail_to=9_000)
    with pytest.raises(ValueError):
        adapt_population_proposal(
            0.5, population_range=(300, 400), reference_populations=np.array([200])
        )


# --- V/H-k grid ------------------------------------------------------------------

def test_default_grid_positive_log_correlation():
    grid = default_vh_k_grid()
    lv, lk, m = np.log(grid.vector_host_ratio), np.log(grid.aggregation_k), grid.mass
    mv, mk = (m * lv).sum(), (m * lk).sum()
    cov = (m * (lv - mv) * (lk - mk)).sum()
    assert cov > 0.0


def test_packaged_grid_loads_and_roundtrips(tmp_path):
    grid = load_vh_k_grid()
    assert grid.mass.size > 100
    out = tmp_path / "grid.csv"
    save_vh_k_grid(grid, out)
    again = load_vh_k_grid(out)
    assert np.array_equal(grid.mass, again.mass)
    assert np.array_equal(grid.vector_host_ratio, again.vector_host_ratio)
    assert np.array_equal(grid.aggregation_k, again.aggregation_k)


# --- bank sampling ------------------------------------------------------------------

def _small_proposal():
    support = np.arange(260, 321)
    mass = np.linspace(2.0, 1.0, support.size)
    return TabulatedProposal(support=support, mass=mass / mass.sum())


def test_sample_bank_deterministic():
    grid = default_vh_k_grid(6, 6)
    a = sample_bank(_small_proposal(), grid, j=50, seed=7)
    b = sample_bank(_small_proposal(), grid, j=50, seed=7)
    assert a == b
    c = sample_bank(_small_proposal(), grid, j=50, seed=8)
    assert a != c


def test_sample_bank_importation_in_bounds():
    bank = sample_bank(_small_proposal(), default_vh_k_grid(6, 6), j=2000, seed=1)
    rates = np.array([pv.importation_rate for pv in bank])
    assert np.all((rates >= 0.0) & (rates <= 0.0005))
    assert rates.max() > 0.0004  # actually spans the box


def test_sample_bank_population_marginal_matches_proposal():
    from scipy.stats import chisquare

    prop = _small_proposal()
    bank = sample_bank(prop, default_vh_k_grid(6, 6), j=100_000, seed=3)
    pops = np.array([pv.population for pv in bank])
    observed = np.bincount(pops - 260, minlength=prop.support.size)
    result = chisquare(observed, f_exp=prop.mass * pops.size)
    assert result.pvalue > 0.01


def test_parameter_vector_validation():
    with pytest.raises(ValueError):
        ParameterVector(population=0, vector_host_ratio=1.0, aggregation_k=0.1, importation_rate=0.0)
    with pytest.raises(ValueError):
        ParameterVector(population=10, vector_host_ratio=-1.0, aggregation_k=0.1, importation_rate=0.0)
