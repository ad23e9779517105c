import io
import zlib

import numpy as np
import pytest

from gccpnav.diffcompute import (
    CheckpointError,
    DetachedGraphError,
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tensor,
    backward,
    nn,
    no_grad,
    ops,
    read_checkpoint,
    write_checkpoint,
)

from oracles import central_difference, rel_error, store_gradcheck

TOL = 1e-4


def _away_from(rng, shape, kinks, gap=0.05, scale=2.0):
    """Random values at least ``gap`` from every kink point."""
    x = rng.uniform(-scale, scale, size=shape)
    for k in kinks:
        close = np.abs(x - k) < gap
        x[close] = k + np.sign(x[close] - k + 1e-12) * gap * 2
    return x


def _check(fn, arrays, rng, h=1e-5):
    """Compare backward against central differences for loss = sum(fn(*inputs) * R)."""
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    weights = rng.normal(size=out.shape)
    loss = ops.sum(ops.mul(out, weights))
    backward(loss)

    def f():
        with no_grad():
            return float(np.sum(fn(*[Tensor(t.data) for t in inputs]).data * weights))

    worst = 0.0
    for t in inputs:
        num = central_difference(f, t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


OP_CASES = {
    "add": (lambda a, b: ops.add(a, b), [(3, 4), (4,)], []),
    "bias_add": (lambda a, b: ops.bias_add(a, b), [(2, 3, 5), (5,)], []),
    "sub": (lambda a, b: ops.sub(a, b), [(3, 1), (3, 4)], []),
    "mul": (lambda a, b: ops.mul(a, b), [(2, 3), (2, 3)], []),
    "div": (lambda a, b: ops.div(a, ops.add(ops.square(b), 0.5)), [(2, 3), (2, 3)], []),
    "exp": (lambda a: ops.exp(a), [(3, 2)], []),
    "log": (lambda a: ops.log(ops.add(ops.square(a), 0.1)), [(4,)], []),
    "relu": (lambda a: ops.relu(a), [(4, 5)], [0.0]),
    "tanh": (lambda a: ops.tanh(a), [(4, 5)], []),
    "square": (lambda a: ops.square(a), [(3,)], []),
    "clip": (lambda a: ops.clip(a, -0.8, 1.2), [(6, 3)], [-0.8, 1.2]),
    "minimum": (lambda a, b: ops.minimum(a, ops.add(b, 0.3)), [(5,), (5,)], []),
    "matmul": (lambda a, b: ops.matmul(a, b), [(3, 4), (4, 2)], []),
    "matmul_batched": (lambda a, b: ops.matmul(a, b), [(2, 3, 4), (4, 5)], []),
    "reshape": (lambda a: ops.reshape(a, (6, 2)), [(3, 4)], []),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)], []),
    "take": (lambda a: ops.take(a, (np.array([0, 2, 2]), slice(None))), [(3, 4)], []),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), [(2, 3), (2, 5)], []),
    "stack": (lambda a, b: ops.stack([a, b], axis=1), [(2, 3), (2, 3)], []),
    "broadcast_to": (lambda a: ops.broadcast_to(a, (4, 3)), [(1, 3)], []),
    "sum": (lambda a: ops.sum(a, axis=1), [(3, 4)], []),
    "mean": (lambda a: ops.mean(a, axis=0, keepdims=True), [(3, 4)], []),
    "max": (lambda a: ops.max(a, axis=1), [(3, 7)], []),
    "softmax": (lambda a: ops.softmax(a, axis=-1), [(3, 5)], []),
    "log_softmax": (lambda a: ops.log_softmax(a, axis=0), [(4, 3)], []),
    "layer_norm": (lambda a, g, b: ops.layer_norm(a, g, b), [(3, 6), (6,), (6,)], []),
    "masked_fill": (lambda a: ops.softmax(ops.masked_fill(a, np.array([True, False, True]))), [(2, 3)], []),
    "attention": (lambda q, k, v: ops.attention(q, k, v, np.array([True, True, False, True])),
                  [(2, 3, 4), (2, 4, 4), (2, 4, 5)], []),
    "smooth_l1": (lambda a, b: ops.smooth_l1(a, b), [(4, 5), (4, 5)], []),
    "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1), [(2, 3, 7, 6), (4, 3, 3, 3), (4,)], []),
    "conv2d_nopad": (lambda x, w: ops.conv2d(x, w, stride=1), [(1, 2, 5, 5), (3, 2, 2, 2)], []),
    "maxpool2d": (lambda x: ops.maxpool2d(x, 2), [(2, 2, 4, 6)], []),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_central_differences(name):
    fn, shapes, kinks = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [_away_from(rng, s, kinks) for s in shapes]
    if name == "smooth_l1":
        # keep |x - y| away from the quadratic/linear switch at 1
        d = _away_from(rng, shapes[0], [-1.0, 0.0, 1.0], scale=3.0)
        arrays = [arrays[1] + d, arrays[1]]
    assert _check(fn, arrays, rng) < TOL


def test_softmax_symmetric():
    np.testing.assert_array_equal(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_smooth_l1_values():
    assert ops.smooth_l1(Tensor([1.5]), Tensor([1.5])).data[0] == 0.0
    assert ops.smooth_l1(Tensor([3.0]), Tensor([0.0])).data[0] == 2.5
    assert ops.smooth_l1(Tensor([0.5]), Tensor([0.0])).data[0] == 0.125


def test_attention_ignores_masked_keys():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 2))
    mask = np.array([True, False, True])
    a = ops.attention(Tensor(q), Tensor(k), Tensor(v), mask).data
    v2 = v.copy()
    v2[:, 1] = 1e3
    k2 = k.copy()
    k2[:, 1] = -7.0
    b = ops.attention(Tensor(q), Tensor(k2), Tensor(v2), mask).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ops.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_linear_map_gradient():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = rng.normal(size=(4, 1))
    backward(ops.sum(ops.matmul(w, x)))
    np.testing.assert_allclose(w.grad, np.broadcast_to(x.T, (3, 4)))


def test_unused_parameter_gets_zero_grad():
    store = ParamStore()
    rng = np.random.default_rng(0)
    a = store.glorot("a", (2, 2), rng)
    b = store.glorot("b", (2, 2), rng)
    backward(ops.sum(ops.square(a)))
    assert np.all(b.grad == 0.0)
    assert np.any(a.grad != 0.0)


def test_backward_on_detached_graph_raises():
    store = ParamStore()
    p = store.glorot("p", (2, 2), np.random.default_rng(0))
    loss = ops.sum(ops.square(p)).detach()
    with pytest.raises(DetachedGraphError):
        backward(loss)
    with no_grad():
        inert = ops.sum(p)
    with pytest.raises(DetachedGraphError):
        backward(inert)


def test_gradients_accumulate_until_step():
    store = ParamStore()
    p = store.add("p", np.array([1.0, 2.0]))
    backward(ops.sum(p))
    backward(ops.sum(p))
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])


def test_adam_first_step_magnitude_is_lr():
    store = ParamStore()
    p = store.add("p", np.array([0.7]))
    p.grad[...] = 1.0
    store.adam_step(1e-3)
    # bias-corrected first step: m_hat = 1, v_hat = 1, so the move is lr / (1 + eps)
    assert p.data[0] == pytest.approx(0.7 - 1e-3 / (1 + 1e-8), abs=1e-15)
    assert store.step == 1
    assert p.grad[0] == 0.0


def test_adam_zero_grad_keeps_params_and_counts_steps():
    store = ParamStore()
    rng = np.random.default_rng(3)
    store.glorot("w", (3, 3), rng)
    before = store.values()
    for k in range(4):
        store.adam_step(1e-2)
        assert store.step == k + 1
    np.testing.assert_array_equal(store["w"].data, before["w"])


def test_adam_matches_reference_update():
    rng = np.random.default_rng(5)
    store = ParamStore()
    p = store.add("p", rng.normal(size=4))
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad[...] = g
        store.adam_step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_glorot_bounds():
    store = ParamStore()
    w = store.glorot("w", (30, 10), np.random.default_rng(0))
    assert np.abs(w.data).max() <= np.sqrt(6 / 40)


def test_checkpoint_round_trip_and_header():
    rng = np.random.default_rng(0)
    tensors = {"predictor/a": rng.normal(size=(2, 3)), "planner/b": rng.normal(size=(4,)), "decision/c": np.array(2.5)}
    buf = io.BytesIO()
    write_checkpoint(buf, tensors)
    raw = buf.getvalue()
    assert raw.startswith(b"GCCPCKPT")
    back = read_checkpoint(io.BytesIO(raw))
    assert set(back) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(raw[:-3]))
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(b"garbage!" + raw[8:]))


def test_checkpoint_data_is_little_endian_float64():
    buf = io.BytesIO()
    write_checkpoint(buf, {"x": np.array([1.0])})
    assert buf.getvalue().endswith(np.array([1.0], dtype="<f8").tobytes())


def test_layers_gradcheck():
    rng = np.random.default_rng(2)
    store = ParamStore()
    att = nn.MultiHeadAttention(store, "att", 8, 2, rng)
    conv = nn.Conv2d(store, "conv", 1, 2, 3, rng, stride=2, padding=1)
    mlp = nn.MLP(store, "mlp", [8 + 2 * 2 * 2, 6, 3], rng)
    x = rng.normal(size=(2, 4, 8))
    img = rng.normal(size=(2, 1, 4, 4))
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    weights = rng.normal(size=(2, 4, 3))

    def loss_fn():
        h = att(Tensor(x), key_mask=mask)
        c = ops.reshape(ops.relu(conv(Tensor(img))), (2, 1, 8))
        c = ops.broadcast_to(c, (2, 4, 8))
        return ops.sum(ops.mul(mlp(ops.concat([h, c], axis=-1)), weights))

    assert store_gradcheck(store, loss_fn) < TOL


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    store = ParamStore()
    att = nn.MultiHeadAttention(store, "a", 8, 4, rng)
    x = np.random.default_rng(1).normal(size=(3, 5, 8))
    np.testing.assert_array_equal(att(Tensor(x)).data, att(Tensor(x)).data)
