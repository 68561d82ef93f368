"""Ground-truth grid markets and sampling from them."""

import numpy as np
import pytest

from matchvalue import (
    BasisSpec,
    MatchSample,
    ProductBasis,
    SolverConfig,
    Theta,
    build_market,
    draw_sample,
)
from matchvalue.likelihood import LikelihoodEvaluator

TIGHT = SolverConfig(tol=1e-13)

BILINEAR = BasisSpec(
    functions=(ProductBasis(1, 1),), alpha_mask=(True,), gamma_mask=(True,)
)


def theta_of(A, Gamma, sigma1=0.3, sigma2=0.2, t=1.0, s2=0.04):
    return Theta(A=[A], Gamma=[Gamma], sigma1=sigma1, sigma2=sigma2, t=t, s2=s2)


def small_market(A=0.5, Gamma=0.7, s2=0.04, points=8):
    g = np.linspace(0.0, 1.0, points).reshape(-1, 1)
    m = np.full(points, 1.0 / points)
    return build_market(g, m, g, m, theta_of(A, Gamma, s2=s2), BILINEAR, solver=TIGHT)


# -- equilibrium of the grid system -------------------------------------------


def test_zero_surplus_market_is_independent():
    wm = np.array([0.5, 0.3, 0.2])
    fm = np.array([0.25, 0.25, 0.5])
    market = build_market(
        [[0.0], [1.0], [2.0]], wm, [[0.0], [1.0], [2.0]], fm,
        theta_of(0.0, 0.0), BILINEAR, solver=TIGHT,
    )
    np.testing.assert_allclose(market.pi_star, np.outer(wm, fm), atol=1e-12)


def test_two_by_two_supermodular_closed_form():
    """phi = c*x*y on {0,1}^2 with even masses has an explicit density."""
    c = 1.3
    market = build_market(
        [[0.0], [1.0]], [0.5, 0.5], [[0.0], [1.0]], [0.5, 0.5],
        theta_of(c / 2, c / 2), BILINEAR, solver=TIGHT,
    )
    pi = market.pi_star
    q = 1.0 / (2.0 * (1.0 + np.exp(c / 2)))
    p = np.exp(c / 2) * q
    np.testing.assert_allclose(pi, [[p, q], [q, p]], atol=1e-12)
    odds = pi[0, 0] * pi[1, 1] / (pi[0, 1] * pi[1, 0])
    assert odds == pytest.approx(np.exp(c), rel=1e-10)


def test_market_marginals_match_masses():
    rng = np.random.default_rng(2)
    wm = rng.random(6)
    wm /= wm.sum()
    fm = rng.random(9)
    fm /= fm.sum()
    gx = rng.normal(size=(6, 1))
    gy = rng.normal(size=(9, 1))
    market = build_market(gx, wm, gy, fm, theta_of(0.8, -0.5), BILINEAR, solver=TIGHT)
    np.testing.assert_allclose(market.pi_star.sum(axis=1), wm, atol=1e-10)
    np.testing.assert_allclose(market.pi_star.sum(axis=0), fm, atol=1e-10)


def test_gauge_pins_lexicographically_smallest_worker_type():
    gx = np.array([[1.0], [0.0], [0.5]])  # deliberately unsorted
    gy = np.array([[0.0], [1.0]])
    market = build_market(
        gx, np.full(3, 1 / 3), gy, [0.5, 0.5], theta_of(0.4, 0.3), BILINEAR,
        solver=TIGHT,
    )
    assert market.a[1] == 0.0  # row with x = 0.0


def test_wage_sits_on_the_type_level_identity():
    market = small_market()
    th = market.theta_star
    gamma = 0.7 * np.outer(market.grid_workers.ravel(), market.grid_firms.ravel())
    alpha = 0.5 * np.outer(market.grid_workers.ravel(), market.grid_firms.ravel())
    manual = (
        th.sigma1 * (gamma - market.b[None, :])
        + th.sigma2 * (market.a[:, None] - alpha)
        + th.t
    )
    np.testing.assert_allclose(market.wage_star, manual, atol=1e-12)


def test_sample_system_reproduces_market_wages():
    """A sample weighted by the true cell density recreates the grid wages.

    A finite random draw only does this up to sampling noise in the type
    frequencies, so the exact statement needs the weighted-sample route.
    """
    market = small_market()
    R, S = market.shape
    workers = np.repeat(market.grid_workers, S, axis=0)
    firms = np.tile(market.grid_firms, (R, 1))
    sample = MatchSample(
        workers, firms, weights=market.pi_star.ravel()
    )
    ev = LikelihoodEvaluator(BILINEAR, sample, TIGHT)
    predicted = ev.wages(market.theta_star)
    np.testing.assert_allclose(predicted, market.wage_star.ravel(), atol=1e-9)


# -- sampling ------------------------------------------------------------------


def test_draw_all_missing_and_none_missing():
    market = small_market()
    s0 = draw_sample(market, 50, missing_prob=0.0, seed=1)
    s1 = draw_sample(market, 50, missing_prob=1.0, seed=1)
    assert s0.n_observed == 50
    assert s1.n_observed == 0
    assert np.isnan(s1.transfers).all()


def test_noise_free_market_reproduces_wages_exactly():
    market = small_market(s2=0.0)
    sample = draw_sample(market, 80, missing_prob=0.0, seed=9)
    ri = np.searchsorted(market.grid_workers.ravel(), sample.workers.ravel())
    si = np.searchsorted(market.grid_firms.ravel(), sample.firms.ravel())
    np.testing.assert_array_equal(sample.transfers, market.wage_star[ri, si])


def test_same_seed_same_sample():
    market = small_market()
    a = draw_sample(market, 64, missing_prob=0.25, seed=77)
    b = draw_sample(market, 64, missing_prob=0.25, seed=77)
    np.testing.assert_array_equal(a.workers, b.workers)
    np.testing.assert_array_equal(a.firms, b.firms)
    np.testing.assert_array_equal(a.transfers, b.transfers)


def test_masking_does_not_disturb_matches_or_wages():
    market = small_market()
    full = draw_sample(market, 64, missing_prob=0.0, seed=77)
    part = draw_sample(market, 64, missing_prob=0.4, seed=77)
    np.testing.assert_array_equal(full.workers, part.workers)
    np.testing.assert_array_equal(full.firms, part.firms)
    obs = part.observed
    assert 0 < obs.sum() < 64
    np.testing.assert_array_equal(part.transfers[obs], full.transfers[obs])


def test_cell_frequencies_converge_to_density():
    market = small_market(points=5)
    n = 100_000
    sample = draw_sample(market, n, missing_prob=0.0, seed=123)
    ri = np.searchsorted(market.grid_workers.ravel(), sample.workers.ravel())
    si = np.searchsorted(market.grid_firms.ravel(), sample.firms.ravel())
    counts = np.zeros(market.shape)
    np.add.at(counts, (ri, si), 1.0)
    freq = counts / n
    pi = market.pi_star
    bound = 5.0 * np.sqrt(pi * (1.0 - pi) / n) + 1e-12
    assert (np.abs(freq - pi) <= bound).all()


# -- validation ----------------------------------------------------------------


def test_market_input_validation():
    g = [[0.0], [1.0]]
    ok = [0.5, 0.5]
    th = theta_of(0.4, 0.3)
    with pytest.raises(ValueError, match="sum to one"):
        build_market(g, [0.5, 0.6], g, ok, th, BILINEAR)
    with pytest.raises(ValueError, match="positive"):
        build_market(g, [1.0, 0.0], g, ok, th, BILINEAR)
    with pytest.raises(ValueError, match="duplicate"):
        build_market([[0.0], [0.0]], ok, g, ok, th, BILINEAR)
    with pytest.raises(ValueError, match="length"):
        build_market(g, [1.0], g, ok, th, BILINEAR)
    with pytest.raises(ValueError, match="non-finite"):
        build_market([[0.0], [np.inf]], ok, g, ok, th, BILINEAR)
    bad_theta = Theta(A=[0.1, 0.2], Gamma=[0.0, 0.0], sigma1=0.5, sigma2=0.5, t=0.0, s2=1.0)
    with pytest.raises(ValueError, match="disagree"):
        build_market(g, ok, g, ok, bad_theta, BILINEAR)


def test_draw_sample_validation():
    market = small_market()
    with pytest.raises(ValueError):
        draw_sample(market, 0)
    with pytest.raises(ValueError):
        draw_sample(market, 10, missing_prob=1.5)
