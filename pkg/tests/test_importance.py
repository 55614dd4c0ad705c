import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from inosgd.importance import (
    TableCoverageError,
    TailImportanceFunction,
    betainc_reg,
    bif_eval,
    fast_integration_build,
    importance_scores,
    tif_eval,
)

TIF = TailImportanceFunction


def tifs():
    beta = st.builds(TIF.beta, st.floats(0.3, 5), st.floats(0.3, 5), st.floats(0.5, 20))
    levels = st.lists(st.floats(0, 1), min_size=1, max_size=6).map(lambda v: sorted(v, reverse=True))
    step = st.builds(TIF.step, levels, st.floats(0.25, 4))
    return st.one_of(beta, step)


def quad_bif(f, Gamma, c1, c2):
    """Direct adaptive quadrature of the batch importance function."""
    g = np.vectorize(lambda c: bif_eval(f, Gamma, c))
    pts = [p for p in (Gamma - f.gamma,) if c1 < p < c2]
    if f.kind == "step":
        pts += [Gamma - f.gamma + k * f.step_length for k in range(1, len(f.levels))]
        pts = [p for p in pts if c1 < p < c2]
    val, _ = integrate.quad(lambda c: float(g(c)), c1, c2, points=pts or None, limit=400, epsabs=1e-12, epsrel=1e-12)
    return val


# -- incomplete beta ------------------------------------------------------------------


@given(a=st.floats(0.1, 30), b=st.floats(0.1, 30), x=st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    assert betainc_reg(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-10)


def test_betainc_vectorized_endpoints():
    out = betainc_reg(2.0, 3.0, np.array([0.0, 0.3, 1.0]))
    assert out[0] == 0.0 and out[-1] == 1.0
    assert out[1] == pytest.approx(special.betainc(2, 3, 0.3), abs=1e-13)


# -- TIF and BIF ------------------------------------------------------------------------


def test_tif_examples():
    assert TIF.beta(1, 1, 4)(1.0) == pytest.approx(0.75, abs=1e-12)
    assert TIF.beta(2, 1, 1)(0.5) == pytest.approx(0.25, abs=1e-12)
    assert tif_eval(TIF.step([0.7, 0.2], 1.0), 0.0) == 0.7
    assert TIF.beta(3, 2, 5)(0.0) == 1.0


def test_bif_examples():
    lin = TIF.linear(4)
    assert bif_eval(lin, 10, 8) == pytest.approx(0.5)
    assert bif_eval(lin, 2, 0) == pytest.approx(0.5)
    assert bif_eval(TIF.beta(0.5, 2, 3), 10, 0) == 1.0


def test_domain_errors():
    with pytest.raises(ValueError):
        TIF.linear(4)(4.5)
    with pytest.raises(ValueError):
        bif_eval(TIF.linear(4), 2, 3)


@pytest.mark.parametrize(
    "bad",
    [
        lambda: TIF.step([0.2, 0.5], 1),
        lambda: TIF.step([1.2], 1),
        lambda: TIF.beta(0, 1, 1),
        lambda: TIF.beta(1, 1, 0),
        lambda: TIF.tabulated([1.0, 0.4, 0.6], 2),
        lambda: TIF.from_dict({"kind": "cubic"}),
        lambda: TIF.from_dict({"kind": "beta", "a": 1}),
    ],
)
def test_invalid_tifs(bad):
    with pytest.raises(ValueError):
        bad()


def test_constructor_equivalences():
    assert TIF.constant(3) == TIF.step([1.0], 3)
    assert TIF.linear(2.5) == TIF.beta(1, 1, 2.5)
    assert TIF.step([1.0, 0.5, 0.0], 2).gamma == 6


@given(f=tifs())
def test_json_round_trip(f):
    assert TIF.from_json(f.to_json()) == f


@given(f=tifs(), data=st.data())
def test_tif_non_increasing(f, data):
    u = np.sort(data.draw(st.lists(st.floats(0, 1), min_size=2, max_size=20))) * f.gamma
    v = f(u)
    assert np.all(np.diff(v) <= 1e-12) and np.all((0 <= v) & (v <= 1))


@given(f=tifs(), x=st.floats(0, 1))
def test_tail_integral_matches_quadrature(f, x):
    x *= f.gamma
    pts = None
    if f.kind == "step":
        pts = [k * f.step_length for k in range(1, len(f.levels)) if k * f.step_length < x]
    ref, _ = integrate.quad(lambda u: f._eval(np.array([u]))[0], 0, x, points=pts or None, limit=400, epsabs=1e-12)
    assert float(f.tail_integral(x)) == pytest.approx(ref, abs=1e-8)


@given(f=tifs(), Gamma=st.floats(0.1, 30), frac=st.floats(0, 1), delta=st.floats(0.01, 10))
def test_bif_shift_identity(f, Gamma, frac, delta):
    c = frac * Gamma
    assert bif_eval(f, Gamma, c) == pytest.approx(bif_eval(f, Gamma + delta, c + delta), abs=1e-12)


# -- importance scores -------------------------------------------------------------------


def test_scores_linear_example():
    rho = importance_scores(TIF.linear(4), np.ones(10)).scores
    np.testing.assert_allclose(rho, [1, 1, 1, 1, 1, 1, 0.875, 0.625, 0.375, 0.125], atol=1e-12)


def test_scores_degenerate_cases():
    rng = np.random.default_rng(0)
    C = rng.uniform(0.1, 3, 25)
    assert np.all(importance_scores(TIF.constant(), C).scores == 1.0)
    assert np.all(importance_scores(TIF.step([0.0], C.sum() + 1), C).scores == 0.0)
    empty = importance_scores(TIF.linear(2), [])
    assert len(empty) == 0 and empty.gamma_total == 0.0
    with pytest.raises(ValueError):
        importance_scores(TIF.linear(2), [1.0, 0.0])


def test_single_datum_score_is_top_slice_average():
    f = TIF.beta(2, 3, 5)
    rho = importance_scores(f, [1.5]).scores[0]
    ref, _ = integrate.quad(lambda u: f(u), f.gamma - 1.5, f.gamma)
    assert rho == pytest.approx(ref / 1.5, abs=1e-10)


@given(f=tifs(), C=st.lists(st.floats(0.05, 5), min_size=1, max_size=30))
def test_scores_non_increasing_and_bounded(f, C):
    rho = importance_scores(f, C).scores
    assert np.all(np.diff(rho) <= 1e-9)
    assert np.all((rho >= 0) & (rho <= 1))


@given(f=tifs(), C=st.lists(st.floats(0.05, 5), min_size=0, max_size=20), Ca=st.floats(0.05, 5), data=st.data())
def test_added_datum_mass_telescopes(f, C, Ca, data):
    pos = data.draw(st.integers(0, len(C)))
    old = importance_scores(f, C).masses() if C else np.zeros(0)
    new = importance_scores(f, np.insert(np.asarray(C, float), pos, Ca)).masses()
    # ranks above the insertion point move their mass; ranks below are untouched
    change = new[pos] + np.sum(new[:pos] - old[:pos])
    assert np.allclose(new[pos + 1 :], old[pos:], atol=1e-9)
    assert -1e-6 <= change <= Ca + 1e-6


# -- fast integration table -----------------------------------------------------------------


def test_table_constant_is_identity():
    t = fast_integration_build(TIF.constant(), 50.0)
    np.testing.assert_allclose(t.values, t.knots, atol=1e-12)


def test_table_ramp_area():
    t = fast_integration_build(TIF.linear(4), 100.0)
    assert float(t.interval(96.0, 100.0, 100.0)) == pytest.approx(2.0, abs=1e-9)


def test_table_coverage_error():
    t = fast_integration_build(TIF.linear(4), 10.0)
    with pytest.raises(TableCoverageError):
        t.interval(0, 1, 10.5)
    with pytest.raises(TableCoverageError):
        importance_scores(TIF.linear(4), np.ones(11), table=t)


def test_table_rejects_foreign_tif():
    t = fast_integration_build(TIF.linear(4), 10.0)
    with pytest.raises(ValueError):
        importance_scores(TIF.linear(3), np.ones(3), table=t)


@settings(max_examples=25)
@given(f=tifs(), data=st.data())
def test_table_scores_match_exact(f, data):
    C = np.asarray(data.draw(st.lists(st.floats(0.1, 3), min_size=1, max_size=25)))
    t = fast_integration_build(f, C.sum() + data.draw(st.floats(0, 20)))
    np.testing.assert_allclose(
        importance_scores(f, C, table=t).scores, importance_scores(f, C).scores, atol=1e-6
    )


def test_table_against_quadrature_on_random_intervals():
    rng = np.random.default_rng(7)
    fs = [TIF.beta(0.5, 0.7, 6), TIF.beta(3, 1, 10), TIF.beta(2, 5, 3.3), TIF.step([1.0, 0.6, 0.1], 1.7), TIF.linear(4)]
    worst = 0.0
    for i in range(200):
        f = fs[i % len(fs)]
        kappa = 60.0
        t = fast_integration_build(f, kappa)
        Gamma = rng.uniform(1, kappa)
        c1, c2 = np.sort(rng.uniform(0, Gamma, 2))
        worst = max(worst, abs(float(t.interval(c1, c2, Gamma)) - quad_bif(f, Gamma, c1, c2)))
    assert worst < 1e-4
