import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from inosgd.accounting import (
    DEFAULT_ALPHAS,
    InfeasibleBudget,
    MechanismParams,
    OwnerMechanism,
    PrivacyProfile,
    RdpCurve,
    best_dp_epsilon,
    calibrate_clipping_threshold,
    calibrate_profiles,
    calibrate_sampling_rate,
    calibration_to_json,
    compose_rdp,
    rdp_of_sgm_step,
    rdp_sgm_tight,
    rdp_to_dp,
    sgm_epsilon,
    sgm_step_rdp,
)


def quad_rdp(q, nm, alpha):
    """Sampled-Gaussian RDP by numerical integration over the null density."""

    def integrand(z):
        log_ratio = np.logaddexp(math.log1p(-q), math.log(q) + (2 * z - 1) / (2 * nm * nm))
        return math.exp(-z * z / (2 * nm * nm) + alpha * log_ratio) / (nm * math.sqrt(2 * math.pi))

    lo, hi = -40 * nm, 40 * nm + alpha
    val, _ = integrate.quad(integrand, lo, hi, points=[0.0, 0.5, alpha], epsabs=0, epsrel=1e-12, limit=1000)
    return math.log(val) / (alpha - 1)


@pytest.mark.parametrize(
    "args, expected",
    [((0.0, 1.0, 2.0, 2.0), 0.0), ((0.1, 1.0, 2.0, 2.0), 0.01), ((0.05, 2.0, 4.0, 2.0), 0.0025)],
)
def test_closed_form_step(args, expected):
    assert rdp_of_sgm_step(*args) == pytest.approx(expected, abs=1e-15)


def test_composition_examples():
    assert compose_rdp(0.01, 1000) == pytest.approx(10.0, abs=1e-12)
    assert compose_rdp(0.01, 0) == 0.0


@pytest.mark.parametrize(
    "alpha, eps_bar, delta, expected, tol",
    [(2, 1, 1e-5, 11.126631, 1e-5), (10, 0.5, 0.05, 0.47166, 1e-4), (2, 0, 1, -1.386294, 1e-6)],
)
def test_conversion_examples(alpha, eps_bar, delta, expected, tol):
    assert rdp_to_dp(alpha, eps_bar, delta) == pytest.approx(expected, abs=tol)


def test_best_epsilon_single_entry():
    eps, a = best_dp_epsilon(RdpCurve((2.0,), (1.0,)), 1e-5)
    assert eps == pytest.approx(11.126631, abs=1e-5) and a == 2.0


def test_grid_consistency():
    # only the exact sampled-Gaussian charge lands in the target window;
    # the closed form gives about 18.3 here
    grid = tuple(float(a) for a in range(2, 65))
    eps, _ = sgm_epsilon(0.19, 1, 4, 1000, 1e-5, grid)
    assert 6.8 <= eps <= 9.2
    assert sgm_epsilon(0.19, 1, 4, 1000, 1e-5, grid, bound="closed_form")[0] == pytest.approx(18.33919, abs=1e-4)


def test_best_epsilon_picks_minimum():
    d = 1e-5
    curve = RdpCurve((2.0, 8.0, 32.0), (0.5, 1.0, 4.0))
    eps, a = best_dp_epsilon(curve, d)
    assert eps == min(rdp_to_dp(x, e, d) for x, e in zip(curve.alphas, curve.eps_bars))
    assert a == 8.0


@pytest.mark.parametrize("q, nm, alpha", [(0.05, 4.0, 2), (0.05, 4.0, 7), (0.2, 1.5, 3.5), (0.01, 0.8, 12), (0.3, 2.0, 1.25)])
def test_tight_rdp_matches_quadrature(q, nm, alpha):
    assert rdp_sgm_tight(q, nm, alpha) == pytest.approx(quad_rdp(q, nm, alpha), rel=1e-7)


def test_tight_rdp_frozen_values():
    # frozen from the quadrature oracle above
    assert rdp_sgm_tight(0.05, 4.0, 32) == pytest.approx(quad_rdp(0.05, 4.0, 32), rel=1e-7)
    assert rdp_sgm_tight(1.0, 2.0, 3) == pytest.approx(3 / 8)
    assert rdp_sgm_tight(0.0, 2.0, 3) == 0.0


@given(q=st.floats(0.001, 0.5), nm=st.floats(0.7, 8), alpha=st.sampled_from([1.5, 2.0, 4.0, 9.5, 16.0]))
def test_tight_never_exceeds_closed_form(q, nm, alpha):
    # the tight charge stays below the unsampled Gaussian and is non-negative
    t = rdp_sgm_tight(q, nm, alpha)
    assert 0 <= t <= alpha / (2 * nm * nm) * (1 + 1e-9)


@given(step=st.floats(0, 10), t1=st.integers(0, 500), t2=st.integers(0, 500))
def test_composition_is_additive(step, t1, t2):
    assert compose_rdp(step, t1 + t2) == pytest.approx(compose_rdp(step, t1) + compose_rdp(step, t2), rel=1e-12, abs=1e-12)


@settings(max_examples=8)
@given(q1=st.floats(0.001, 0.3), q2=st.floats(0.001, 0.3))
def test_spend_monotone_in_q(q1, q2):
    lo, hi = sorted((q1, q2))
    assert sgm_epsilon(lo, 1, 4, 100, 1e-5)[0] <= sgm_epsilon(hi, 1, 4, 100, 1e-5)[0] + 1e-9


@settings(max_examples=8)
@given(eps=st.floats(0.3, 10))
def test_sampling_rate_round_trip(eps):
    q = calibrate_sampling_rate(eps, 1e-5, 1.0, 4.0, 200)
    achieved = sgm_epsilon(q, 1.0, 4.0, 200, 1e-5)[0]
    assert achieved <= eps + 1e-9
    if q < 1:
        assert sgm_epsilon(q * (1 + 2e-4), 1.0, 4.0, 200, 1e-5)[0] > eps


@settings(max_examples=8)
@given(eps=st.floats(0.3, 10))
def test_clipping_round_trip(eps):
    C = calibrate_clipping_threshold(eps, 1e-5, 0.05, 4.0, 200)
    assert sgm_epsilon(0.05, C, 4.0, 200, 1e-5)[0] <= eps + 1e-9
    assert sgm_epsilon(0.05, C * (1 + 2e-4), 4.0, 200, 1e-5)[0] > eps


def test_calibration_decreases_to_zero():
    qs = [calibrate_sampling_rate(e, 1e-5, 1, 4, 1000) for e in (2.0, 1.0, 0.5, 0.3)]
    assert all(a > b for a, b in zip(qs, qs[1:]))


def test_tiny_budget_is_infeasible():
    # the conversion has a positive floor at q=0 on a finite order grid
    with pytest.raises(InfeasibleBudget):
        calibrate_sampling_rate(1e-6, 1e-5, 1, 4, 1000)


def test_uniform_profiles_give_uniform_settings():
    profs = [PrivacyProfile(i, 2.0, 1e-5) for i in (1, 2, 3)]
    for variant in ("sample", "scale", "dpsgd"):
        recs = calibrate_profiles(profs, variant, 4.0, 100)
        assert len({(r.q, r.C) for r in recs}) == 1


def test_dpsgd_uses_strictest():
    profs = [PrivacyProfile(1, 0.6, 1e-5), PrivacyProfile(2, 8.0, 1e-5)]
    recs = calibrate_profiles(profs, "dpsgd", 4.0, 1000)
    assert recs[0].q == recs[1].q == calibrate_sampling_rate(0.6, 1e-5, 1, 4, 1000)
    assert "owner_id" in calibration_to_json(recs)


def test_joint_requires_rates():
    with pytest.raises(ValueError):
        calibrate_profiles([PrivacyProfile(1, 1.0, 1e-5)], "joint", 4.0, 10)


def test_default_grid_contents():
    assert DEFAULT_ALPHAS[:3] == (1.25, 1.5, 2.0) and 64.0 in DEFAULT_ALPHAS and DEFAULT_ALPHAS[-1] == 1024.0


def test_bound_switch():
    assert sgm_step_rdp(0.1, 1, 2, 2, bound="closed_form") == pytest.approx(0.01)
    with pytest.raises(ValueError):
        sgm_step_rdp(0.1, 1, 2, 2, bound="nope")


def test_mechanism_bind():
    p = MechanismParams((OwnerMechanism(1, 0.1, 1.0), OwnerMechanism(2, 0.5, 2.0)), 1.0, 10, 0.1).bind({1: 100, 2: 10})
    assert p.expected_batch_size == pytest.approx(15.0)
    with pytest.raises(KeyError):
        p.bind({3: 5})
    with pytest.raises(ValueError):
        MechanismParams((OwnerMechanism(1, 0.1, 1.0),), 1.0, 10, 0.1, expected_batch_size=3.0).bind({1: 100})


@pytest.mark.parametrize("bad", [dict(alpha=1.0), dict(sigma=0.0), dict(q=1.5), dict(C=0.0)])
def test_step_validation(bad):
    kw = dict(q=0.1, C=1.0, sigma=1.0, alpha=2.0) | bad
    with pytest.raises(ValueError):
        rdp_of_sgm_step(**kw)
