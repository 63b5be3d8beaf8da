import numpy as np
import pytest

from vfm.experiments import TOY_P0, TOY_P1, energy_distance
from vfm.gmm import (
    GaussianMixture,
    isotropic_gaussian,
    log_density,
    marginal_mixture,
    posterior_moments,
    posterior_velocity,
    sample_mixture,
    score,
)
from vfm.schedules import eval_schedule, make_schedule
from vfm.solvers import SolverMethod, time_grid, run
from vfm.experiments import initial_draws, oracle_field

ALL_NAMES = ["vp", "sub-vp", "ve", "rectified", "third-degree", "fifth-degree"]

STD2 = isotropic_gaussian([0.0, 0.0])


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 2)), -np.eye(2)[None])
    with pytest.raises(ValueError):
        GaussianMixture(
            np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.2, 1.0]]])
        )


def test_mixture_json_round_trip():
    data = TOY_P0.to_dict()
    back = GaussianMixture.from_dict(data)
    np.testing.assert_array_equal(back.weights, TOY_P0.weights)
    np.testing.assert_array_equal(back.means, TOY_P0.means)
    np.testing.assert_array_equal(back.covs, TOY_P0.covs)


def test_marginal_of_standard_pair_at_half():
    sv = eval_schedule(make_schedule("rectified"), 0.5)
    mix = marginal_mixture(STD2, STD2, sv)
    assert mix.n_components == 1
    np.testing.assert_allclose(mix.covs[0], 0.5 * np.eye(2), atol=0)
    np.testing.assert_allclose(mix.means[0], 0.0, atol=0)


def test_marginal_at_zero_is_p0():
    sv = eval_schedule(make_schedule("rectified"), 0.0)
    mix = marginal_mixture(TOY_P0, TOY_P1, sv)
    # 3 x 2 pair components; the sigma=0 rows collapse onto p0's parameters
    assert mix.n_components == 6
    np.testing.assert_array_equal(mix.means[0], TOY_P0.means[0])
    np.testing.assert_array_equal(mix.covs[0], TOY_P0.covs[0])
    assert mix.weights[0] == pytest.approx(TOY_P0.weights[0] * TOY_P1.weights[0])


def test_marginal_pair_weights_uniform():
    sv = eval_schedule(make_schedule("rectified"), 0.5)
    mix = marginal_mixture(TOY_P0, TOY_P1, sv)
    np.testing.assert_allclose(mix.weights, 1.0 / 6.0, atol=1e-15)


def test_marginal_dimension_mismatch():
    p_1d = isotropic_gaussian([0.0])
    sv = eval_schedule(make_schedule("rectified"), 0.5)
    with pytest.raises(ValueError):
        marginal_mixture(p_1d, TOY_P1, sv)


def test_moments_standard_pair_symmetry():
    sv = eval_schedule(make_schedule("rectified"), 0.5)
    x = np.array([1.3, -0.4])
    mom = posterior_moments(STD2, STD2, sv, x)
    np.testing.assert_allclose(mom.x0_given_t, x, atol=1e-14)
    np.testing.assert_allclose(mom.x1_given_t, x, atol=1e-14)
    np.testing.assert_allclose(posterior_velocity(STD2, STD2, sv, x), 0.0, atol=1e-14)


def test_moments_at_zero_return_x():
    sv = eval_schedule(make_schedule("third-degree"), 0.0)
    x = np.array([12.0, 18.0])
    mom = posterior_moments(TOY_P0, TOY_P1, sv, x)
    np.testing.assert_allclose(mom.x0_given_t, x, atol=1e-10)
    v = posterior_velocity(TOY_P0, TOY_P1, sv, x)
    sv_check = eval_schedule(make_schedule("third-degree"), 0.0)
    expected = sv_check.a_dot * x + sv_check.sigma_dot * mom.x1_given_t
    np.testing.assert_allclose(v, expected, atol=1e-10)


def test_expectation_identity_all_schedules():
    rng = np.random.default_rng(3)
    for name in ALL_NAMES:
        sch = make_schedule(name)
        for t in rng.uniform(0.01, 0.99, size=20):
            sv = eval_schedule(sch, float(t))
            x = rng.uniform(-25.0, 30.0, size=(16, 2))
            mom = posterior_moments(TOY_P0, TOY_P1, sv, x)
            np.testing.assert_allclose(
                sv.a * mom.x0_given_t + sv.sigma * mom.x1_given_t, x, atol=1e-8
            )
            assert np.max(np.abs(mom.responsibilities.sum(axis=1) - 1.0)) < 1e-10


def test_single_gaussian_moments_vs_importance_sampling():
    # independent Monte Carlo oracle for E[X0 | x_t]: draw x0 ~ p0; given
    # x_t = a x0 + sigma x1, the pair density weights each draw by
    # p1((x - a x0)/sigma), so a self-normalized estimator applies.
    p0 = GaussianMixture(
        np.array([1.0]),
        np.array([[1.5, -0.5]]),
        np.array([[[0.8, 0.2], [0.2, 1.1]]]),
    )
    p1 = STD2
    sch = make_schedule("third-degree")
    sv = eval_schedule(sch, 0.6)
    x = np.array([0.7, 0.1])

    rng = np.random.default_rng(11)
    n = 1_000_000
    x0s = sample_mixture(p0, n, 7)
    implied_x1 = (x - sv.a * x0s) / sv.sigma
    logw = -0.5 * np.sum(implied_x1**2, axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    est = w @ x0s
    # delta-method standard error of the self-normalized estimator
    se = np.sqrt(np.sum((w[:, None] * (x0s - est)) ** 2, axis=0))

    mom = posterior_moments(p0, p1, sv, x)
    assert np.all(np.abs(mom.x0_given_t - est) <= 3 * se + 1e-12)
    del rng


def test_velocity_three_forms_agree():
    # direct a_dot x0|t + sigma_dot x1|t versus the two single-moment forms
    rng = np.random.default_rng(5)
    for name in ALL_NAMES:
        sch = make_schedule(name)
        for t in rng.uniform(0.05, 0.95, size=20):
            sv = eval_schedule(sch, float(t))
            x = rng.uniform(-25.0, 30.0, size=(5, 2))
            mom = posterior_moments(TOY_P0, TOY_P1, sv, x)
            v = posterior_velocity(TOY_P0, TOY_P1, sv, x)
            via_x0 = sv.sigma_dot / sv.sigma * x + sv.a * (
                sv.a_dot / sv.a - sv.sigma_dot / sv.sigma
            ) * mom.x0_given_t
            via_x1 = sv.a_dot / sv.a * x + sv.sigma * (
                sv.sigma_dot / sv.sigma - sv.a_dot / sv.a
            ) * mom.x1_given_t
            scale = max(1.0, np.abs(v).max())
            assert np.abs(v - via_x0).max() / scale < 1e-8
            assert np.abs(v - via_x1).max() / scale < 1e-8


def test_score_single_gaussian_closed_form():
    g = isotropic_gaussian([0.0, 0.0], 0.5)
    sv = eval_schedule(make_schedule("rectified"), 0.0)
    out = score(g, TOY_P1, sv, np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [-2.0, 0.0], atol=1e-12)

    cov = np.array([[1.2, 0.3], [0.3, 0.9]])
    mean = np.array([0.5, -1.0])
    g2 = GaussianMixture(np.array([1.0]), mean[None], cov[None])
    x = np.array([2.0, 1.0])
    expected = -np.linalg.solve(cov, x - mean)
    np.testing.assert_allclose(score(g2, TOY_P1, sv, x), expected, atol=1e-12)


def test_score_near_zero_at_separated_component_mean():
    sv = eval_schedule(make_schedule("rectified"), 0.0)
    for mean in TOY_P0.means:
        out = score(TOY_P0, TOY_P1, sv, mean)
        assert np.linalg.norm(out) < 1e-6


def test_tweedie_identity_with_standard_p1():
    rng = np.random.default_rng(8)
    p1 = STD2
    for name in ALL_NAMES:
        sch = make_schedule(name)
        for t in rng.uniform(0.05, 0.95, size=10):
            sv = eval_schedule(sch, float(t))
            x = rng.uniform(-10.0, 25.0, size=(6, 2))
            mom = posterior_moments(TOY_P0, p1, sv, x)
            sc = score(TOY_P0, p1, sv, x)
            assert np.abs(mom.x1_given_t + sv.sigma * sc).max() < 1e-6


def test_sampling_determinism_and_clt():
    a = sample_mixture(STD2, 100_000, 5)
    b = sample_mixture(STD2, 100_000, 5)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a.mean(axis=0)).max() < 0.02

    toy = sample_mixture(TOY_P0, 30_000, 0)
    np.testing.assert_allclose(toy.mean(axis=0), [18.333, 18.667], atol=0.1)

    with pytest.raises(ValueError):
        sample_mixture(STD2, 0, 1)


def test_log_density_matches_quadrature_normalization():
    xs = sample_mixture(TOY_P0, 4, 2)
    vals = log_density(TOY_P0, xs)
    assert np.all(np.isfinite(vals))
    # single standard normal sanity value
    assert log_density(STD2, np.zeros(2)) == pytest.approx(
        -np.log(2 * np.pi), rel=1e-12
    )


def test_oracle_integration_recovers_rough_shape():
    # sampling by integrating the exact velocity should land near p0; the
    # calibrated statistical-equivalence gate (4096 trajectories, 1000 Euler
    # steps, 3x baseline) runs at full size in the acceptance suite
    sch = make_schedule("rectified")
    field = oracle_field(TOY_P0, TOY_P1, sch, "posterior")
    x_init = initial_draws(TOY_P0, TOY_P1, sch, 1024, 21)
    trajs = run(field, time_grid(300), SolverMethod("euler"), x_init)
    finals = np.stack([tr.final_x for tr in trajs])
    fresh = sample_mixture(TOY_P0, 1024, 99)
    far = sample_mixture(isotropic_gaussian([0.0, 0.0]), 1024, 99)
    assert energy_distance(finals, fresh) < 0.1 * energy_distance(far, fresh)
    np.testing.assert_allclose(finals.mean(axis=0), fresh.mean(axis=0), atol=0.5)
