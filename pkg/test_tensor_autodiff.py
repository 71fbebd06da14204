import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import NumericError, ShapeError, ValidationError
from tensor_autodiff import (
    TNSR_MAGIC,
    Graph,
    Tensor,
    clamp,
    concat,
    conv1d,
    conv2d,
    getitem,
    glu,
    glu_split,
    layer_norm,
    log,
    matmul,
    no_grad,
    pixel_shuffle_width,
    reshape,
    sigmoid,
    softmax,
    tensor_abs,
    tensor_from_bytes,
    tensor_mean,
    tensor_sum,
    tensor_to_bytes,
    transpose,
    load_tensor,
    save_tensor,
)

H = 1e-6
GRAD_TOL = 1e-6


def _weighted(op):
    """把任意输出形状的运算包装成标量：sum(op(...) * 固定随机权重)。"""

    def fn(*ts):
        out = op(*ts)
        w = Tensor(np.random.default_rng(123).normal(size=out.shape))
        return tensor_sum(out * w)

    return fn


def numeric_grad(fn, arrays, i):
    grad = np.zeros_like(arrays[i])
    for idx in np.ndindex(arrays[i].shape):
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[i][idx] += H
        minus[i][idx] -= H
        f_plus = fn(*[Tensor(a) for a in plus]).item()
        f_minus = fn(*[Tensor(a) for a in minus]).item()
        grad[idx] = (f_plus - f_minus) / (2 * H)
    return grad


def check_grad(op, *arrays):
    fn = _weighted(op)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    for i, t in enumerate(tensors):
        expected = numeric_grad(fn, arrays, i)
        err = np.max(np.abs(t.grad - expected)) / max(1.0, np.max(np.abs(expected)))
        assert err < GRAD_TOL, f"input {i}: relative gradient error {err:.2e}"


small_dim = st.integers(min_value=1, max_value=4)
seeds = st.integers(min_value=0, max_value=2**31 - 1)


# ==============================================================================
# --- 梯度检查 ---
# ==============================================================================

@settings(max_examples=20, deadline=None)
@given(rows=small_dim, cols=small_dim, seed=seeds)
def test_elementwise_gradients(rows, cols, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(rows, cols)), r.normal(size=(rows, cols))
    check_grad(lambda x, y: x + y, a, b)
    check_grad(lambda x, y: x - y, a, b)
    check_grad(lambda x, y: x * y, a, b)
    check_grad(sigmoid, a)
    check_grad(glu, a, b)


@settings(max_examples=20, deadline=None)
@given(rows=small_dim, cols=small_dim, seed=seeds)
def test_broadcast_gradients(rows, cols, seed):
    r = np.random.default_rng(seed)
    check_grad(lambda x, y: x * y + y, r.normal(size=(rows, cols)), r.normal(size=(cols,)))


@settings(max_examples=20, deadline=None)
@given(n=small_dim, k=small_dim, m=small_dim, seed=seeds)
def test_matmul_gradient(n, k, m, seed):
    r = np.random.default_rng(seed)
    check_grad(matmul, r.normal(size=(2, n, k)), r.normal(size=(k, m)))


@settings(max_examples=20, deadline=None)
@given(rows=small_dim, cols=st.integers(min_value=2, max_value=5), seed=seeds)
def test_normalisation_gradients(rows, cols, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(rows, cols))
    check_grad(lambda t: softmax(t, axis=-1), x)
    check_grad(lambda t: softmax(t, axis=0), x)
    check_grad(layer_norm, x, r.normal(size=cols), r.normal(size=cols))


@settings(max_examples=20, deadline=None)
@given(rows=small_dim, cols=small_dim, seed=seeds)
def test_log_abs_clamp_gradients_away_from_kinks(rows, cols, seed):
    r = np.random.default_rng(seed)
    positive = r.uniform(0.5, 2.0, size=(rows, cols))
    signed = positive * r.choice([-1.0, 1.0], size=(rows, cols))
    check_grad(log, positive)
    check_grad(tensor_abs, signed)
    inside = r.uniform(-0.5, 0.5, size=(rows, cols))
    check_grad(lambda t: clamp(t, -1.0, 1.0), inside)


@settings(max_examples=20, deadline=None)
@given(a=small_dim, b=small_dim, c=small_dim, seed=seeds)
def test_shape_op_gradients(a, b, c, seed):
    x = np.random.default_rng(seed).normal(size=(a, b, c))
    check_grad(lambda t: reshape(t, (a * b, c)), x)
    check_grad(lambda t: transpose(t, (2, 0, 1)), x)
    check_grad(lambda t: getitem(t, (slice(None), 0)), x)
    check_grad(lambda t: tensor_sum(t, axis=1, keepdims=True), x)
    check_grad(lambda t: tensor_mean(t, axis=(0, 2)), x)
    check_grad(lambda t, u: concat([t, u], axis=1), x, x[:, :1] * 2.0)


@settings(max_examples=20, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 2),
    o=st.integers(1, 2),
    h=st.integers(3, 6),
    w=st.integers(3, 6),
    k=st.integers(1, 3),
    stride=st.integers(1, 2),
    padding=st.integers(0, 1),
    seed=seeds,
)
def test_conv2d_gradient(n, c, o, h, w, k, stride, padding, seed):
    r = np.random.default_rng(seed)
    x, weight, bias = r.normal(size=(n, c, h, w)), r.normal(size=(o, c, k, k)), r.normal(size=o)
    check_grad(lambda a, b, d: conv2d(a, b, d, stride=stride, padding=padding), x, weight, bias)


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 3), length=st.integers(3, 8), k=st.integers(1, 3), padding=st.integers(0, 1), seed=seeds)
def test_conv1d_and_pixel_shuffle_gradients(c, length, k, padding, seed):
    r = np.random.default_rng(seed)
    check_grad(lambda a, b: conv1d(a, b, padding=padding), r.normal(size=(1, c, length)), r.normal(size=(2, c, k)))
    check_grad(lambda a: pixel_shuffle_width(a, 2), r.normal(size=(1, 2 * c, 2, length)))
    check_grad(lambda a: glu_split(a, axis=1), r.normal(size=(1, 2 * c, length)))


# ==============================================================================
# --- 前向正确性 ---
# ==============================================================================

def _conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride : y * stride + kh, z * stride : z * stride + kw]
                    out[i, j, y, z] = np.sum(patch * w[j]) + b[j]
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 1), (2, 2)])
def test_conv2d_matches_loop_oracle(rng, stride, padding):
    x, w, b = rng.normal(size=(2, 3, 9, 7)), rng.normal(size=(4, 3, 5, 3)), rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, _conv2d_loops(x, w, b, stride, padding), atol=1e-12)


def test_pixel_shuffle_interleaves_channel_groups():
    x = np.arange(2 * 2 * 1 * 3, dtype=float).reshape(1, 2 * 2, 1, 3)
    out = pixel_shuffle_width(Tensor(x), 2).data
    assert out.shape == (1, 2, 1, 6)
    # 通道 c 的第 w 列 = [x[c*2+0, w], x[c*2+1, w]]
    np.testing.assert_array_equal(out[0, 0, 0], [0, 3, 1, 4, 2, 5])


def test_glu_is_gated_product(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(glu(Tensor(a), Tensor(b)).data, a / (1 + np.exp(-b)), rtol=1e-12)


def test_layer_norm_normalises_last_axis(rng):
    x = rng.normal(3.0, 2.0, size=(4, 16))
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)


def test_softmax_rows_sum_to_one(rng):
    out = softmax(Tensor(rng.normal(size=(3, 7)) * 50), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)


# ==============================================================================
# --- 计算图语义 ---
# ==============================================================================

def test_leaf_gradients_accumulate_across_backward_calls():
    w = Tensor([2.0, -1.0], requires_grad=True)
    loss = tensor_sum(w * w)
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(w.grad, [8.0, -4.0])
    w.zero_grad()
    assert w.grad is None


def test_shared_subexpression_gradients_sum():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(12.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError, match="scalar"):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf
    z = x * 2.0
    assert z.requires_grad


def test_backward_is_linear(rng):
    x_data = rng.normal(size=(3, 4))

    def grad_of(build):
        x = Tensor(x_data, requires_grad=True)
        build(x).backward()
        return x.grad

    def f(x):
        return tensor_sum(sigmoid(x))

    def g(x):
        return tensor_sum(x * x)

    combined = grad_of(lambda x: f(x) * 2.0 + g(x) * 3.0)
    np.testing.assert_allclose(combined, 2.0 * grad_of(f) + 3.0 * grad_of(g), rtol=1e-12, atol=1e-15)


def test_forward_replay_matches_saved_activations(rng):
    x = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    gain, bias = Tensor(np.ones(8), requires_grad=True), Tensor(np.zeros(8), requires_grad=True)

    def forward():
        h = layer_norm(conv1d(x, w, padding=1), gain, bias)
        return tensor_mean(softmax(h, axis=-1) * h)

    first, second = Graph.of(forward()), Graph.of(forward())
    assert [n.op for n in first.nodes] == [n.op for n in second.nodes]
    for a, b in zip(first.nodes, second.nodes):
        np.testing.assert_array_equal(a.value, b.value)


def test_graph_is_topologically_ordered_and_acyclic():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = tensor_sum(sigmoid(matmul(x, x)) * x)
    graph = Graph.of(loss)
    assert graph.is_acyclic()
    ids = [node.id for node in graph.nodes]
    assert ids == sorted(ids)


def test_non_finite_values_raise_numeric_error():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        log(Tensor([0.0, 1.0]))


def test_shape_mismatch_names_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_empty_tensor_is_rejected():
    with pytest.raises(ValidationError, match="positive"):
        Tensor([])
    with pytest.raises(ValidationError):
        Tensor(np.zeros((3, 0)))


def test_tensor_data_is_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


# ==============================================================================
# --- TNSR 序列化 ---
# ==============================================================================

def test_tnsr_layout():
    blob = tensor_to_bytes(np.arange(6, dtype=float).reshape(2, 3))
    assert blob[:4] == TNSR_MAGIC
    assert int.from_bytes(blob[4:8], "little") == 2
    assert int.from_bytes(blob[8:16], "little") == 2
    assert int.from_bytes(blob[16:24], "little") == 3
    assert len(blob) == 24 + 6 * 8


def test_tnsr_file_round_trip_is_exact(rng):
    value = rng.normal(size=(3, 1, 4))
    buf = io.BytesIO()
    save_tensor(Tensor(value), buf)
    buf.seek(0)
    np.testing.assert_array_equal(load_tensor(buf), value)


def test_tnsr_rejects_bad_magic_and_truncation():
    with pytest.raises(ValidationError):
        tensor_from_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValidationError):
        tensor_from_bytes(tensor_to_bytes(np.ones(4))[:-8])
