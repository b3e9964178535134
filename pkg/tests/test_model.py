import numpy as np
import pytest
import hypothesis.strategies as st
from hypothesis import given, settings

from c2hm.autodiff import ContractError
from c2hm.model import (
    CheckpointError,
    ModelConfig,
    cycle_decode,
    cycle_encode,
    decode,
    embed_goal,
    full_cycle,
    init_params,
    load_checkpoint,
    parse,
    save_checkpoint,
    serialize,
    simulate_latent,
)
from c2hm.rng import SeededRng


def zero_last(mlp):
    mlp.layers[-1].weight[:] = 0.0
    mlp.layers[-1].bias[:] = 0.0


def test_embed_lookup(tiny_params):
    np.testing.assert_array_equal(embed_goal(tiny_params, [0]).value[0], tiny_params.goal_embed[0])
    with pytest.raises(ContractError):
        embed_goal(tiny_params, [3])


def test_default_dims():
    cfg = ModelConfig()
    assert (cfg.D, cfg.num_classes) == (784, 10)
    p = init_params(ModelConfig(d=4, k=8, hidden=16, depth=1), 0)
    assert embed_goal(p, [2]).shape == (1, 4)
    grid = init_params(ModelConfig(d=4, k=8, D=1024, num_classes=1, hidden=16, depth=1), 0)
    assert decode(grid, np.zeros(8)).shape == (1, 1024)


def test_dim_ordering_enforced():
    with pytest.raises(ContractError):
        ModelConfig(d=8, k=4, D=10)
    with pytest.raises(ContractError):
        ModelConfig(activation="relu6")


def test_simulate_latent_shapes_and_zero_head(tiny_params):
    dist = simulate_latent(tiny_params, np.ones((2, 3)))
    assert dist.mean.shape == (2, 4) and dist.log_var.shape == (2, 4)
    zero_last(tiny_params.sim)
    dist = simulate_latent(tiny_params, np.ones((2, 3)))
    np.testing.assert_array_equal(dist.mean.value, 0.0)
    np.testing.assert_array_equal(dist.log_var.value, 0.0)


def test_cycle_encode_zero_head(tiny_params):
    zero_last(tiny_params.cyc_enc)
    dist = cycle_encode(tiny_params, np.full((3, 6), 0.5))
    np.testing.assert_array_equal(dist.mean.value, 0.0)
    np.testing.assert_array_equal(dist.log_var.value, 0.0)


def test_dimension_checks(tiny_params):
    with pytest.raises(ContractError):
        simulate_latent(tiny_params, np.ones(4))
    with pytest.raises(ContractError):
        decode(tiny_params, np.ones(3))
    with pytest.raises(ContractError):
        cycle_encode(tiny_params, np.ones(5))
    with pytest.raises(ContractError):
        cycle_decode(tiny_params, np.ones(2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
def test_decoder_range_and_cycle_finite(z):
    p = init_params(ModelConfig(d=3, k=4, D=6, num_classes=3, hidden=5, depth=1), seed=0)
    out = decode(p, np.array(z)).value
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.isfinite(cycle_decode(p, np.array(z)).value))


def test_decoder_strictly_inside_unit_interval(tiny_params):
    out = decode(tiny_params, SeededRng(0).standard_normal((20, 4))).value
    assert np.all((out > 0) & (out < 1))


def test_forward_determinism(tiny_params):
    phi = np.ones((2, 3))
    a, b = simulate_latent(tiny_params, phi), simulate_latent(tiny_params, phi)
    np.testing.assert_array_equal(a.mean.value, b.mean.value)
    c1 = full_cycle(tiny_params, phi, SeededRng(4))
    c2 = full_cycle(tiny_params, phi, SeededRng(4))
    for field in ("z", "psi_hat", "z2", "phi_hat", "psi_loop"):
        np.testing.assert_array_equal(getattr(c1, field).value, getattr(c2, field).value)
    assert c1.phi_hat.shape == (2, 3)


def test_init_determinism():
    a = init_params(ModelConfig(d=2, k=3, D=5, num_classes=2, hidden=4), 9).named_tensors()
    b = init_params(ModelConfig(d=2, k=3, D=5, num_classes=2, hidden=4), 9).named_tensors()
    assert all(np.array_equal(a[n], b[n]) for n in a)


def test_checkpoint_roundtrip_bit_exact(tiny_params, tmp_path):
    path = save_checkpoint(tiny_params, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    a, b = tiny_params.named_tensors(), back.named_tensors()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert serialize(back) == serialize(tiny_params)


def test_checkpoint_corruption(tiny_params):
    text = serialize(tiny_params)
    with pytest.raises(CheckpointError):
        parse("garbage\n" + text)
    with pytest.raises(CheckpointError):
        parse(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        parse(text.replace("tanh", "relu6", 1))


def test_training_improves_cycle_recovery(trained, small_mnist):
    before, after, _ = trained
    labels = small_mnist[1].labels[:200]

    def recovery(p):
        phi = embed_goal(p, labels).value
        out = full_cycle(p, phi, SeededRng(0))
        return float(np.mean(np.sum((phi - out.phi_hat.value) ** 2, axis=1)))
    assert recovery(after) < recovery(before)


def test_trained_embeddings_distinct(trained):
    _, after, _ = trained
    e = after.goal_embed
    dists = np.linalg.norm(e[:, None] - e[None], axis=-1)[~np.eye(len(e), dtype=bool)]
    assert dists.min() > 0
