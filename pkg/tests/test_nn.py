from __future__ import annotations

import math

import numpy as np
import pytest

from objsearch import nn

from oracles import assert_grads_close, finite_difference_grads


def test_dense_zero_weights_gives_zero():
    x = np.array([1.0, -2.0, 3.0])
    out = nn.dense(x, np.zeros((3, 2)), np.zeros(2))
    assert np.array_equal(out.data, np.zeros(2))


def test_dense_identity_passes_vector_through():
    v = np.array([0.3, -1.2, 4.0, 0.0])
    out = nn.dense(v, np.eye(4), np.zeros(4))
    assert np.array_equal(out.data, v)


def test_softmax_equal_logits_is_uniform():
    out = nn.softmax(np.zeros(8))
    assert np.allclose(out.data, 0.125, atol=1e-15)


def test_softmax_sums_to_one_and_positive():
    rng = np.random.default_rng(4)
    for _ in range(50):
        out = nn.softmax(rng.normal(scale=8.0, size=8)).data
        assert abs(out.sum() - 1.0) <= 1e-9
        assert np.all(out > 0)


def test_scalar_square_gradient():
    w = nn.Var(3.0)
    loss = w * w
    nn.backward(loss)
    assert w.grad == pytest.approx(6.0)


def test_relu_blocks_gradient_at_negative_preactivation():
    x = nn.Var(np.array([-1.5, 2.0]))
    out = nn.vsum(nn.relu(x))
    nn.backward(out)
    assert x.grad[0] == 0.0
    assert x.grad[1] == 1.0


def test_backward_rejects_nonscalar_root():
    with pytest.raises(nn.ShapeError):
        nn.backward(nn.Var(np.zeros(3)))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(nn.ShapeError):
        nn.matmul(nn.Var(np.zeros(3)), nn.Var(np.zeros((4, 2))))


def _random_mlp_loss(params: nn.ParamStore, x: np.ndarray, target: np.ndarray):
    h = nn.relu(nn.dense(x, params["l1.W"], params["l1.b"]))
    h = nn.sigmoid(nn.dense(h, params["l2.W"], params["l2.b"]))
    return nn.vmean(nn.square(h - target))


def test_random_net_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = nn.ParamStore()
    params.add("l1.W", nn.glorot_uniform(rng, 6, 5))
    params.add("l1.b", rng.normal(size=5) * 0.1)
    params.add("l2.W", nn.glorot_uniform(rng, 5, 3))
    params.add("l2.b", rng.normal(size=3) * 0.1)
    x = rng.normal(size=6)
    target = rng.uniform(size=3)

    _, grads = nn.value_and_grad(lambda p: _random_mlp_loss(p, x, target), params)
    fd = finite_difference_grads(
        lambda ps: float(_random_mlp_loss(ps.leaves(), x, target).data), params, rng=rng
    )
    assert_grads_close(grads, fd, tol=1e-4)


@pytest.mark.parametrize("op,ref", [
    (nn.relu, lambda v: np.maximum(v, 0.0)),
    (nn.sigmoid, lambda v: 1.0 / (1.0 + np.exp(-v))),
    (nn.log, np.log),
    (nn.square, np.square),
])
def test_elementwise_op_gradients(op, ref):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.2, 2.0, size=5)  # positive domain keeps log happy
    store = nn.ParamStore({"x": x})
    _, grads = nn.value_and_grad(lambda p: nn.vsum(op(p["x"])), store)
    fd = finite_difference_grads(lambda ps: float(ref(ps["x"]).sum()), store, rng=rng)
    assert_grads_close(grads, fd, tol=1e-4)


def test_concat_and_softmax_gradients():
    rng = np.random.default_rng(9)
    store = nn.ParamStore({"a": rng.normal(size=3), "b": rng.normal(size=5)})
    weights = rng.normal(size=8)

    def graph(p):
        return nn.vsum(weights * nn.softmax(nn.concat([p["a"], p["b"]])))

    def plain(ps):
        z = np.concatenate([ps["a"], ps["b"]])
        e = np.exp(z - z.max())
        return float((weights * (e / e.sum())).sum())

    _, grads = nn.value_and_grad(graph, store)
    fd = finite_difference_grads(plain, store, rng=rng)
    assert_grads_close(grads, fd, tol=1e-4)


def test_clip_gradient_masks_outside_range():
    x = nn.Var(np.array([0.5, 2.0, -1.0]))
    out = nn.vsum(nn.clip(x, 0.0, 1.0))
    nn.backward(out)
    assert list(x.grad) == [1.0, 0.0, 0.0]


def test_pick_selects_and_routes_gradient():
    x = nn.Var(np.array([1.0, 2.0, 3.0]))
    out = nn.pick(x, 1)
    nn.backward(out)
    assert out.data == 2.0
    assert list(x.grad) == [0.0, 1.0, 0.0]


def test_reused_node_accumulates_gradient():
    x = nn.Var(2.0)
    out = x * x + x * 3.0  # dx = 2x + 3 = 7
    nn.backward(out)
    assert x.grad == pytest.approx(7.0)


def test_sgd_step_basics():
    params = nn.ParamStore({"w": np.array([1.0])})
    nn.sgd_step(params, {"w": np.array([2.0])}, lr=0.1)
    assert params["w"][0] == pytest.approx(0.8)
    nn.sgd_step(params, {"w": np.array([0.0])}, lr=0.1)
    assert params["w"][0] == pytest.approx(0.8)


def test_sgd_step_rejects_nan_gradient():
    params = nn.ParamStore({"w": np.array([1.0])})
    with pytest.raises(nn.NonFiniteError, match="w"):
        nn.sgd_step(params, {"w": np.array([math.nan])}, lr=0.1)
    assert params["w"][0] == 1.0  # not partially applied


def test_sgd_step_rejects_nonpositive_lr():
    params = nn.ParamStore({"w": np.array([1.0])})
    with pytest.raises(ValueError):
        nn.sgd_step(params, {"w": np.array([1.0])}, lr=0.0)


def test_glorot_uniform_bounds():
    rng = np.random.default_rng(0)
    w = nn.glorot_uniform(rng, 30, 18)
    bound = math.sqrt(6.0 / 48.0)
    assert w.shape == (30, 18)
    assert np.all(np.abs(w) <= bound)


def test_param_store_fixes_shapes():
    params = nn.ParamStore({"w": np.zeros((2, 3))})
    with pytest.raises(nn.ShapeError):
        params["w"] = np.zeros((3, 2))
    with pytest.raises(ValueError):
        params.add("w", np.zeros(1))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = nn.ParamStore({
        "layer.W": rng.normal(size=(7, 3)),
        "branch.scene_a.pi.W": rng.normal(size=(3, 8)),
        "b": rng.normal(size=3),
    })
    path = tmp_path / "ckpt.npz"
    nn.save_checkpoint(params, path, {"kind": "test", "note": "x"})
    loaded, meta = nn.load_checkpoint(path)
    assert meta == {"kind": "test", "note": "x"}
    assert loaded.names() == params.names()
    for name in params.names():
        assert np.array_equal(loaded[name], params[name])
    assert np.array_equal(loaded.flat(), params.flat())


def test_load_checkpoint_rejects_foreign_npz(tmp_path):
    path = tmp_path / "foreign.npz"
    np.savez(path, a=np.zeros(3))
    with pytest.raises(ValueError, match="checkpoint"):
        nn.load_checkpoint(path)
