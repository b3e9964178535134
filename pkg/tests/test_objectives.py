import math

import numpy as np
import pytest
import hypothesis.strategies as st
from hypothesis import given, settings

from c2hm import autodiff as ad
from c2hm.autodiff import ContractError, Tape
from c2hm.distributions import DiagonalGaussian
from c2hm.model import Bound, ModelConfig, full_cycle, init_params
from c2hm.objectives import (
    LossWeights,
    combine,
    composite_loss,
    context_entropy_proxy,
    entropy_steer_proxy,
    gaussian_nll,
    latent_align_loss,
    latent_entropy,
    loop_loss,
    rec_loss,
    vb_loss,
)
from c2hm.rng import SeededRng
from c2hm.training import c2hm_batch_loss


def c(t, x):
    return t.constant(np.asarray(x, float))


def test_pointwise_losses():
    t = Tape()
    x = c(t, [[0.2, 0.7]])
    assert float(rec_loss(x, x).value) == 0.0
    assert float(loop_loss(x, x).value) == 0.0
    assert float(latent_align_loss(x, x).value) == 0.0
    assert float(rec_loss(c(t, [[1.0, 0.0]]), c(t, [[0.0, 0.0]])).value) == 0.5
    assert float(latent_align_loss(c(t, [[1.0, 0.0]]), c(t, [[0.0, 1.0]])).value) == 1.0
    with pytest.raises(ContractError):
        rec_loss(c(t, [[1.0, 0.0]]), c(t, [[1.0, 0.0, 0.0]]))


def test_combine_weights():
    t = Tape()
    zero = c(t, 0.0)
    assert combine(zero, zero, zero, LossWeights()).total == 0.0
    one = c(t, 1.0)
    assert combine(one, one, one, LossWeights()).total == pytest.approx(1.11)
    with pytest.raises(ContractError):
        LossWeights(lambda_cyc=-1.0)


def test_composite_total_gradient():
    p = init_params(ModelConfig(d=2, k=3, D=4, num_classes=2, hidden=3, depth=1), 2)
    x = np.random.default_rng(0).uniform(size=(2, 4))

    def f(t, phi):
        return composite_loss(full_cycle(Bound(p, tape=t, trainable=()), phi, SeededRng(1)), x).total_var
    assert ad.grad_check(f, np.array([[0.3, -0.2], [1.0, 0.5]])) < 1e-4


def test_composite_needs_loop_output(tiny_params):
    out = full_cycle(tiny_params, np.ones((1, 3)), SeededRng(0), loop=False)
    with pytest.raises(ContractError):
        composite_loss(out, np.ones((1, 6)) * 0.5)


def test_untrained_loop_loss_finite(tiny_params):
    out = full_cycle(tiny_params, np.ones((2, 3)), SeededRng(0))
    parts = composite_loss(out, np.full((2, 6), 0.5))
    assert parts.loop >= 0 and math.isfinite(parts.loop)


def test_vb_beta_zero_is_nll_and_standard_kl_zero(tiny_params):
    tiny_params.sim.layers[-1].weight[:] = 0.0
    tiny_params.sim.layers[-1].bias[:] = 0.0
    phi, psi = np.ones((2, 3)), np.full((2, 6), 0.4)
    total, nll, kl, _ = vb_loss(tiny_params, phi, psi, 0.0, SeededRng(0), return_parts=True)
    assert float(kl.value) == 0.0
    assert float(total.value) == float(nll.value)
    with pytest.raises(ContractError):
        vb_loss(tiny_params, phi, psi, -1.0, SeededRng(0))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 2.0), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_gaussian_nll_matches_density(sigma, resid):
    t = Tape()
    r = np.array(resid)
    nll = float(gaussian_nll(c(t, r), c(t, np.zeros(3)), sigma).value)
    expected = -np.sum(-0.5 * np.log(2 * np.pi * sigma**2) - r**2 / (2 * sigma**2))
    assert nll == pytest.approx(expected, rel=1e-10, abs=1e-10)


def test_entropy_proxy_constants():
    psi = np.full((3, 10), 0.3)
    assert context_entropy_proxy(psi, psi, 0.1) == pytest.approx(10 * 0.5 * math.log(2 * math.pi * math.e * 0.01))
    assert context_entropy_proxy(psi, psi + 0.1, 0.1) > context_entropy_proxy(psi, psi, 0.1)
    std = DiagonalGaussian.from_arrays(np.zeros(32), np.zeros(32))
    assert latent_entropy(std) == pytest.approx(32 * 1.41894, abs=1e-4)


def test_steer_proxy_finite(tiny_params):
    batch = (np.full((3, 6), 0.5), np.array([0, 1, 2]))
    assert math.isfinite(entropy_steer_proxy(tiny_params, batch, SeededRng(0)))
    with pytest.raises(ContractError):
        entropy_steer_proxy(tiny_params, (np.zeros((0, 6)), np.array([], int)), SeededRng(0))


def test_losses_drop_after_training(trained, small_mnist):
    before, after, logs = trained
    test = small_mnist[1]

    def parts(p):
        return c2hm_batch_loss(p, test.images[:300], test.labels[:300], LossWeights(), SeededRng(3),
                               trainable=()).parts
    b, a = parts(before), parts(after)
    assert a.rec < b.rec
    assert a.loop < b.loop
    assert a.latent < b.latent


def test_steer_proxy_decreases_over_training(trained, small_mnist):
    before, after, _ = trained
    test = small_mnist[1]
    batch = (test.images[:300], test.labels[:300])
    assert entropy_steer_proxy(after, batch, SeededRng(0)) < entropy_steer_proxy(before, batch, SeededRng(0))
