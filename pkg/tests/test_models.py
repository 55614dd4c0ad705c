import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inosgd import rng as rngmod
from inosgd.models import (
    Architecture,
    ModelParams,
    batch_forward_losses,
    class_probabilities,
    finite_difference_check,
    load_checkpoint,
    per_sample_loss_and_grad,
    per_sample_losses_and_grads,
    predict,
    save_checkpoint,
)

ARCHS = [Architecture("logistic", 4), Architecture("softmax_linear", 4, 5), Architecture("mlp1", 4, 3, hidden=5)]


def random_model(arch, r, scale=1.0):
    return ModelParams(arch, r.normal(0, scale, arch.param_count))


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: a.name)
def test_finite_differences_100_pairs(arch):
    worst = 0.0
    for i in range(100):
        r = rngmod.substream(11, "fd/" + arch.name, i)
        model = random_model(arch, r)
        worst = max(worst, finite_difference_check(model, r.normal(0, 1, arch.dim), int(r.integers(arch.num_classes))))
    assert worst < 1e-6


def test_zero_logistic():
    arch = Architecture("logistic", 3)
    m = ModelParams.zeros(arch)
    for y, sign in ((0, 1), (1, -1)):
        pg = per_sample_loss_and_grad(m, np.array([0.3, -1.0, 2.0]), y)
        assert pg.loss == pytest.approx(math.log(2))
        assert pg.grad[-1] == pytest.approx(0.5 * sign)


def test_zero_softmax_is_uniform():
    m = ModelParams.zeros(Architecture("softmax_linear", 6, 10))
    X = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_allclose(batch_forward_losses(m, X, [0, 3, 9, 2]), math.log(10))


@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50))
def test_probabilities_normalized(seed, scale):
    r = np.random.default_rng(seed)
    for arch in ARCHS:
        m = random_model(arch, r, scale)
        P = class_probabilities(m, r.normal(0, 3, (7, arch.dim)))
        assert np.all(P >= 0) and np.allclose(P.sum(axis=1), 1.0)


def test_extreme_logits_stay_finite():
    m = ModelParams(Architecture("softmax_linear", 2, 3), np.array([1e4, 0, 0, 0, -1e4, 0, 0, 0, 0]))
    losses, grads = per_sample_losses_and_grads(m, np.array([[1.0, 1.0]]), [1])
    assert np.isfinite(losses).all() and np.isfinite(grads).all()
    assert losses[0] == pytest.approx(1e4)


def test_empty_and_single_batches():
    arch = ARCHS[1]
    m = random_model(arch, np.random.default_rng(1))
    losses, grads = per_sample_losses_and_grads(m, np.zeros((0, arch.dim)), [])
    assert losses.shape == (0,) and grads.shape == (0, arch.param_count)
    x = np.ones(arch.dim)
    one = per_sample_losses_and_grads(m, x[None], [2])
    assert one[0][0] == per_sample_loss_and_grad(m, x, 2).loss


def test_batch_matches_per_record():
    arch = ARCHS[2]
    r = np.random.default_rng(5)
    m = random_model(arch, r)
    X, y = r.normal(size=(6, arch.dim)), r.integers(0, 3, 6)
    L, G = per_sample_losses_and_grads(m, X, y)
    for i in range(6):
        pg = per_sample_loss_and_grad(m, X[i], y[i])
        assert pg.loss == pytest.approx(L[i], abs=1e-12)
        np.testing.assert_allclose(pg.grad, G[i], atol=1e-12)
    np.testing.assert_array_equal(predict(m, X), np.argmax(class_probabilities(m, X), axis=1))


def test_input_validation():
    m = ModelParams.zeros(ARCHS[0])
    with pytest.raises(ValueError):
        batch_forward_losses(m, np.zeros((2, 5)), [0, 1])
    with pytest.raises(ValueError):
        batch_forward_losses(m, np.zeros((2, 4)), [0, 2])
    with pytest.raises(ValueError):
        ModelParams(ARCHS[0], np.zeros(3))
    with pytest.raises(ValueError):
        Architecture("cnn", 3)


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: a.name)
def test_checkpoint_round_trip(tmp_path, arch):
    m = random_model(arch, np.random.default_rng(2))
    save_checkpoint(tmp_path / "ck.bin", m)
    back = load_checkpoint(tmp_path / "ck.bin")
    assert back.arch == arch
    np.testing.assert_array_equal(back.flat, m.flat)
    assert (tmp_path / "ck.bin").stat().st_size == 8 * arch.param_count


def test_mlp_init_is_seeded():
    arch = ARCHS[2]
    a = ModelParams.init(arch, rngmod.substream(3, rngmod.INIT))
    b = ModelParams.init(arch, rngmod.substream(3, rngmod.INIT))
    np.testing.assert_array_equal(a.flat, b.flat)
    assert np.any(a.flat != 0)
    assert np.all(ModelParams.init(ARCHS[0], rngmod.substream(3, rngmod.INIT)).flat == 0)
