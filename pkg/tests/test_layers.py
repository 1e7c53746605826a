import math

import numpy as np
import pytest

from refgame import autodiff as ad
from refgame.layers import (Adam, BatchNorm, Embedding, GRUCell, Linear, load_checkpoint,
                            save_checkpoint)
from gradcheck import check_module_gradients


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_linear_identity_and_bias_only(rng):
    layer = Linear(4, 4, rng)
    layer.weight.data = np.eye(4)
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(layer(ad.constant(x)).data, x)
    layer.weight.data = np.zeros((4, 4))
    layer.bias.data = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(layer(ad.constant(x)).data, np.tile(layer.bias.data, (3, 1)))


def test_linear_matches_direct_product(rng):
    layer = Linear(4, 2, rng)
    layer.bias.data = rng.normal(size=2)
    x = rng.normal(size=(3, 4))
    expected = np.array([[sum(x[i, k] * layer.weight.data[j, k] for k in range(4)) + layer.bias.data[j]
                          for j in range(2)] for i in range(3)])
    np.testing.assert_allclose(layer(ad.constant(x)).data, expected, atol=1e-12)


def test_linear_rejects_wrong_width(rng):
    with pytest.raises(ad.ShapeError):
        Linear(4, 2, rng)(ad.constant(np.ones((3, 5))))


def test_linear_init_bounds(rng):
    layer = Linear(16, 8, rng)
    assert np.abs(layer.weight.data).max() <= 1 / math.sqrt(16)
    np.testing.assert_array_equal(layer.bias.data, 0.0)


def test_batchnorm_constant_column_and_zero_gamma(rng):
    bn = BatchNorm(3)
    x = rng.normal(size=(5, 3))
    x[:, 1] = 4.2
    out = bn(ad.constant(x)).data
    np.testing.assert_array_equal(out[:, 1], 0.0)
    bn.gamma.data = np.zeros(3)
    bn.beta.data = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(bn(ad.constant(x)).data, np.tile(bn.beta.data, (5, 1)))


def test_batchnorm_train_output_is_standardized(rng):
    bn = BatchNorm(4)
    # feature variance >> eps so that var/(var + eps) is within 1e-6 of 1
    x = rng.normal(scale=10.0, size=(32, 4)) + 3.0
    out = bn(ad.constant(x)).data
    assert np.abs(out.mean(axis=0)).max() < 1e-9
    assert np.abs(out.var(axis=0) - 1.0).max() < 1e-6


def test_batchnorm_eval_after_training_on_fixed_distribution(rng):
    bn = BatchNorm(3)
    for _ in range(100):
        bn(ad.constant(rng.normal(5.0, 2.0, size=(32, 3))))
    bn.training = False
    out = bn(ad.constant(rng.normal(5.0, 2.0, size=(2000, 3)))).data
    assert np.abs(out.mean(axis=0)).max() < 0.1
    assert (bn.running_var >= 0).all()


def test_batchnorm_eval_records_nothing_for_running_stats(rng):
    bn = BatchNorm(3)
    bn.training = False
    before = bn.running_mean.copy(), bn.running_var.copy()
    out = bn(ad.constant(rng.normal(size=(4, 3))))
    leaves = {id(t) for t in ad._reachable(out) if t.is_leaf}
    assert leaves == {id(bn.gamma), id(bn.beta)}
    np.testing.assert_array_equal(bn.running_mean, before[0])
    np.testing.assert_array_equal(bn.running_var, before[1])


def test_batchnorm_rejects_single_row_in_train_mode():
    with pytest.raises(ValueError):
        BatchNorm(2)(ad.constant(np.ones((1, 2))))


def test_embedding_lookup_and_range(rng):
    emb = Embedding(5, 3, rng)
    np.testing.assert_array_equal(emb([4, 0]).data, emb.table.data[[4, 0]])
    assert np.abs(emb.table.data).max() <= 0.1
    with pytest.raises(IndexError):
        emb([5])


def zero_gru(n_in, hidden):
    cell = GRUCell(n_in, hidden, np.random.default_rng(0))
    for p in cell.parameters():
        p.data = np.zeros_like(p.data)
    return cell


def test_gru_zero_weights_halves_state(rng):
    cell = zero_gru(3, 4)
    h = rng.normal(size=(2, 4))
    np.testing.assert_array_equal(cell(ad.constant(rng.normal(size=(2, 3))), ad.constant(h)).data, 0.5 * h)


def test_gru_zero_weights_over_many_steps_is_exact(rng):
    cell = zero_gru(3, 4)
    h0 = rng.normal(size=(2, 4))
    h = ad.constant(h0)
    for _ in range(10):
        h = cell(ad.constant(np.zeros((2, 3))), h)
    np.testing.assert_array_equal(h.data, h0 * 0.5 ** 10)


def test_gru_update_is_a_convex_combination(rng):
    cell = GRUCell(3, 5, rng)
    for _ in range(20):
        h = rng.uniform(-3, 3, size=(4, 5))
        out = cell(ad.constant(rng.uniform(-3, 3, size=(4, 3))), ad.constant(h)).data
        assert (np.abs(out) < 1 + np.abs(h)).all()


def gru_scalar_oracle(cell, x, h):
    """Standalone per-unit loop, written without matrix ops or the autodiff module."""
    W = {g: getattr(cell, f"W_{g}").data for g in "zrh"}
    U = {g: getattr(cell, f"U_{g}").data for g in "zrh"}
    b = {g: getattr(cell, f"b_{g}").data for g in "zrh"}
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    out = np.zeros_like(h)
    for n in range(x.shape[0]):
        r = [sig(sum(W["r"][j, i] * x[n, i] for i in range(x.shape[1]))
                 + sum(U["r"][j, i] * h[n, i] for i in range(h.shape[1])) + b["r"][j])
             for j in range(h.shape[1])]
        for j in range(h.shape[1]):
            z = sig(sum(W["z"][j, i] * x[n, i] for i in range(x.shape[1]))
                    + sum(U["z"][j, i] * h[n, i] for i in range(h.shape[1])) + b["z"][j])
            cand = math.tanh(sum(W["h"][j, i] * x[n, i] for i in range(x.shape[1]))
                             + sum(U["h"][j, i] * r[i] * h[n, i] for i in range(h.shape[1])) + b["h"][j])
            out[n, j] = (1 - z) * h[n, j] + z * cand
    return out


def test_gru_matches_scalar_oracle(rng):
    cell = GRUCell(3, 4, rng)
    for g in "zrh":
        getattr(cell, f"b_{g}").data = rng.normal(size=4)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    np.testing.assert_allclose(cell(ad.constant(x), ad.constant(h)).data,
                               gru_scalar_oracle(cell, x, h), atol=1e-12)


def test_gru_shape_mismatch(rng):
    cell = GRUCell(3, 4, rng)
    with pytest.raises(ad.ShapeError):
        cell(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 5))))


@pytest.mark.parametrize("kind", ["linear", "batchnorm_train", "batchnorm_eval", "gru"])
def test_layer_gradients_finite_differences(kind, rng):
    for _ in range(5):
        if kind == "linear":
            layer = Linear(3, 2, rng)
            layer.bias.data = rng.normal(size=2)
            forward, x = layer, rng.uniform(-2, 2, size=(4, 3))
        elif kind.startswith("batchnorm"):
            layer = BatchNorm(3)
            layer.gamma.data = rng.uniform(0.5, 2, size=3)
            layer.beta.data = rng.normal(size=3)
            if kind == "batchnorm_eval":
                layer.training = False
                layer.running_mean = rng.normal(size=3)
                layer.running_var = rng.uniform(0.5, 2, size=3)
            forward, x = layer, rng.uniform(-2, 2, size=(5, 3))
        else:
            layer = GRUCell(3, 4, rng)
            h0 = ad.constant(rng.uniform(-1, 1, size=(2, 4)))
            forward, x = (lambda inp: layer(inp, h0)), rng.uniform(-2, 2, size=(2, 3))
        out_shape = forward(ad.constant(x)).shape
        w = rng.normal(size=out_shape)
        err = check_module_gradients(layer.parameters(), x, lambda inp: (forward(inp) * w).sum())
        assert err < 1e-6, err


def test_embedding_gradient_scatters_rows(rng):
    emb = Embedding(4, 2, rng)
    out = emb([1, 1, 3])
    ad.backward((out * np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])).sum())
    np.testing.assert_array_equal(emb.table.grad, [[0, 0], [4, 6], [0, 0], [5, 6]])


def test_adam_zero_gradient_leaves_parameters(rng):
    p = ad.parameter(rng.normal(size=5))
    before = p.data.copy()
    opt = Adam([p], lr=0.01)
    for _ in range(10):
        opt.zero_grad()
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_moves_by_learning_rate():
    p = ad.parameter(np.zeros(3))
    opt = Adam([p], lr=0.01)
    p.grad = np.array([0.3, -2.0, 7.0])
    opt.step()
    # closed form: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    expected = -0.01 * p.grad / (np.abs(p.grad) + 1e-8)
    np.testing.assert_allclose(p.data, expected, atol=1e-12)
    np.testing.assert_allclose(np.abs(p.data), 0.01, atol=1e-6)


def test_adam_missing_gradient_rejected():
    with pytest.raises(ValueError):
        Adam([ad.parameter(np.ones(2))], lr=0.1).step()


def test_adam_descends_quadratic_bowl():
    w = ad.parameter(np.array([0.6, -0.8]))
    opt = Adam([w], lr=0.01)
    losses = []
    for _ in range(500):
        opt.zero_grad()
        loss = (w * w).sum()
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    assert np.linalg.norm(w.data) < 0.1
    windows = np.array(losses).reshape(10, 50).mean(axis=1)
    assert (np.diff(windows) < 0).all()
    assert opt.step_count == 500
    assert all((v >= 0).all() for v in opt.v)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    arrays = {"a.weight": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]),
              "c": rng.normal(size=(2, 2, 2))}
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_without_header_rejected(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, x=np.ones(2))
    with pytest.raises(ValueError):
        load_checkpoint(path)
