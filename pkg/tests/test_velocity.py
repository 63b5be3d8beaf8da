import numpy as np
import pytest

from vfm.experiments import TOY_P0, TOY_P1
from vfm.gmm import posterior_moments, posterior_velocity
from vfm.schedules import cross_term, eval_schedule, make_schedule
from vfm.velocity import (
    FlowState,
    complete_state,
    target_velocity,
    x0_given_x1,
)

ALL_NAMES = ["vp", "sub-vp", "ve", "rectified", "third-degree", "fifth-degree"]


def test_flow_state_validation():
    with pytest.raises(ValueError):
        FlowState(np.zeros(2), 0.5, "weird")
    with pytest.raises(ValueError):
        FlowState(np.zeros(2), 1.5)


def test_target_velocity_rectified_and_ve():
    x0 = np.array([1.0, 2.0])
    x1 = np.array([-1.0, 0.5])
    sv = eval_schedule(make_schedule("rectified"), 0.37)
    np.testing.assert_allclose(target_velocity(sv, x0, x1), x1 - x0, atol=0)

    sv = eval_schedule(make_schedule("ve"), 0.37)
    np.testing.assert_allclose(target_velocity(sv, x0, x1), sv.sigma_dot * x1, atol=0)


def test_target_velocity_zero_for_flat_coefficients():
    sv = eval_schedule(make_schedule("ve"), 0.5)
    frozen = type(sv)(sv.t, sv.a, sv.sigma, 0.0, 0.0)
    np.testing.assert_array_equal(
        target_velocity(frozen, np.ones(2), np.ones(2)), np.zeros(2)
    )


def test_complete_state_ve_from_velocity():
    sch = make_schedule("ve")
    sv = eval_schedule(sch, 0.6)
    x = np.array([2.0, -1.0])
    v = np.array([0.3, 0.8])
    triple = complete_state(sv, x, "v", v, 1e-6)
    np.testing.assert_allclose(triple.x1_given_t, v / sv.sigma_dot, rtol=1e-12)
    np.testing.assert_allclose(
        triple.x0_given_t, x - sv.sigma * triple.x1_given_t, rtol=1e-12
    )


def test_complete_state_rectified_from_noise():
    sv = eval_schedule(make_schedule("rectified"), 0.25)
    x = np.array([1.0, 1.0])
    x1 = np.array([2.0, 0.0])
    triple = complete_state(sv, x, "x1_given_t", x1, 1e-6)
    np.testing.assert_allclose(triple.v, (x1 - x) / (1 - 0.25), rtol=1e-12)


def test_complete_state_round_trips():
    rng = np.random.default_rng(0)
    for name in ALL_NAMES:
        sch = make_schedule(name)
        for t in rng.uniform(0.1, 0.9, size=15):
            sv = eval_schedule(sch, float(t))
            # stay away from clipped regions
            if min(abs(sv.a), abs(sv.sigma), abs(cross_term(sv))) < 1e-5:
                continue
            x = rng.normal(size=(3, 2)) * 5
            v = rng.normal(size=(3, 2))
            triple = complete_state(sv, x, "v", v, 1e-6)
            back = complete_state(sv, x, "x1_given_t", triple.x1_given_t, 1e-6)
            np.testing.assert_allclose(back.v, v, atol=1e-10)
            np.testing.assert_allclose(back.x0_given_t, triple.x0_given_t, atol=1e-10)
            back2 = complete_state(sv, x, "x0_given_t", triple.x0_given_t, 1e-6)
            np.testing.assert_allclose(back2.v, v, atol=1e-10)
            np.testing.assert_allclose(
                back2.x1_given_t, triple.x1_given_t, atol=1e-10
            )


def test_complete_state_consistency_identity():
    rng = np.random.default_rng(1)
    for name in ALL_NAMES:
        sch = make_schedule(name)
        for t in rng.uniform(0.1, 0.9, size=10):
            sv = eval_schedule(sch, float(t))
            if min(abs(sv.a), abs(sv.sigma), abs(cross_term(sv))) < 1e-5:
                continue
            x = rng.normal(size=2) * 4
            triple = complete_state(sv, x, "v", rng.normal(size=2), 1e-6)
            np.testing.assert_allclose(
                sv.a * triple.x0_given_t + sv.sigma * triple.x1_given_t,
                x,
                atol=1e-8,
            )


def test_complete_state_matches_oracle():
    rng = np.random.default_rng(2)
    for name in ALL_NAMES:
        sch = make_schedule(name)
        for t in rng.uniform(0.05, 0.95, size=17):
            sv = eval_schedule(sch, float(t))
            x = rng.uniform(-20, 30, size=(6, 2))
            mom = posterior_moments(TOY_P0, TOY_P1, sv, x)
            v_oracle = posterior_velocity(TOY_P0, TOY_P1, sv, x)
            triple = complete_state(sv, x, "x1_given_t", mom.x1_given_t, 1e-6)
            scale = max(1.0, np.abs(v_oracle).max())
            assert np.abs(triple.v - v_oracle).max() / scale < 1e-8


def test_x0_given_x1_examples():
    sv = eval_schedule(make_schedule("third-degree"), 0.0)
    x = np.array([3.0, -2.0])
    np.testing.assert_array_equal(x0_given_x1(sv, x, np.array([9.0, 9.0]), 1e-6), x)

    sv = eval_schedule(make_schedule("rectified"), 0.5)
    out = x0_given_x1(sv, np.array([1.0, 1.0]), np.array([2.0, 0.0]), 1e-6)
    np.testing.assert_allclose(out, [0.0, 2.0], atol=0)

    rng = np.random.default_rng(3)
    sv = eval_schedule(make_schedule("vp"), 0.4)
    x = rng.normal(size=(4, 2))
    x1 = rng.normal(size=(4, 2))
    out = x0_given_x1(sv, x, x1, 1e-6)
    np.testing.assert_allclose(sv.a * out + sv.sigma * x1, x, atol=1e-12)


def test_complete_state_rejects_unknown_field():
    sv = eval_schedule(make_schedule("rectified"), 0.5)
    with pytest.raises(ValueError):
        complete_state(sv, np.zeros(2), "score", np.zeros(2), 1e-6)
