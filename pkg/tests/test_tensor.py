import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from utnet import tensor as T
from utnet.errors import ContractError, DimensionError
from utnet.tensor import Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def triple_loop_matmul(a, b):
    m, p = a.shape
    q = b.shape[1]
    c = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            for k in range(p):
                c[i, j] += a[i, k] * b[k, j]
    return c


def loop_conv(x, w, b=None, stride=1, pad=0):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


def half_pixel(x, oh, ow):
    H, W = x.shape

    def coord(o, n_in, n_out):
        c = (o + 0.5) * n_in / n_out - 0.5
        c = min(max(c, 0.0), n_in - 1)
        i0 = int(math.floor(c))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    out = np.zeros((oh, ow))
    for i in range(oh):
        y0, y1, fy = coord(i, H, oh)
        for j in range(ow):
            x0, x1, fx = coord(j, W, ow)
            top = x[y0, x0] * (1 - fx) + x[y0, x1] * fx
            bot = x[y1, x0] * (1 - fx) + x[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


# --- matmul


def test_matmul_identity_and_zeros():
    b = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    assert np.array_equal(T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.rand(3, 4))).data, np.zeros((2, 4)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    assert np.abs(T.matmul(Tensor(a), Tensor(b)).data - triple_loop_matmul(a, b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# --- softmax


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor(np.full(5, 2.0)), axis=0).data, 0.2, atol=0, rtol=1e-15)
    out = T.softmax(Tensor(np.array([0.0, math.log(2)])), axis=0).data
    assert np.abs(out - [1 / 3, 2 / 3]).max() < 1e-15


def test_softmax_bad_axis():
    with pytest.raises(IndexError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_simplex_and_shift_invariance(x, c):
    p = T.softmax(Tensor(x), axis=1).data
    assert (p >= 0).all()
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9
    assert np.abs(T.softmax(Tensor(x + c), axis=1).data - p).max() < 1e-12


def test_softmax_large_logits_stable():
    p = T.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0])), axis=0).data
    assert np.all(np.isfinite(p)) and abs(p[0] - 0.5) < 1e-15


# --- conv2d


def test_conv_identity_and_zero_kernel():
    x = np.random.default_rng(2).standard_normal((2, 3, 4, 4))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(eye)).data, x)
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(np.zeros((5, 3, 3, 3))), pad=1).data, np.zeros((2, 5, 4, 4)))


def test_conv_matches_sliding_window_oracle():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((1, 4, 5, 5)), rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(2)
    assert np.abs(T.conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data - loop_conv(x, w, b, pad=1)).max() < 1e-12


@pytest.mark.parametrize("stride,pad,size", [(2, 1, 7), (1, 0, 6), (2, 0, 7)])
def test_conv_strided_matches_oracle(stride, pad, size):
    rng = np.random.default_rng(size)
    x, w = rng.standard_normal((2, 3, size, size)), rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    assert np.abs(out - loop_conv(x, w, stride=stride, pad=pad)).max() < 1e-12


def test_conv_asymmetric_pad_halves_even_maps():
    x = np.random.default_rng(4).standard_normal((1, 2, 8, 8))
    w = np.random.default_rng(5).standard_normal((3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=(1, 0)).data
    ref = loop_conv(np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1))), w, stride=2, pad=1)[:, :, :4, :4]
    assert out.shape == (1, 3, 4, 4) and np.abs(out - ref).max() < 1e-12


def test_conv_non_integral_output_rejected():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1)


def test_conv_rejects_5x5():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 5, 5))), pad=2)


# --- bilinear


def test_bilinear_identity_and_constant():
    x = np.random.default_rng(6).standard_normal((1, 2, 5, 7))
    assert np.abs(T.bilinear_resize(Tensor(x), 5, 7).data - x).max() < 1e-12
    c = T.bilinear_resize(Tensor(np.full((1, 1, 3, 4), 2.5)), 7, 2).data
    assert np.abs(c - 2.5).max() < 1e-12


def test_bilinear_2x2_to_4x4_half_pixel():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = T.bilinear_resize(Tensor(x[None, None]), 4, 4).data[0, 0]
    expected = np.array(
        [[0.0, 0.25, 0.75, 1.0], [0.5, 0.75, 1.25, 1.5], [1.5, 1.75, 2.25, 2.5], [2.0, 2.25, 2.75, 3.0]]
    )
    assert np.abs(out - expected).max() < 1e-12
    assert np.abs(out - half_pixel(x, 4, 4)).max() < 1e-12


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), finite, finite)
def test_bilinear_linear_and_matches_formula(h, w, oh, ow, a, b):
    rng = np.random.default_rng(h * 100 + w)
    x, y = rng.standard_normal((h, w)), rng.standard_normal((h, w))
    r = lambda z: T.bilinear_resize(Tensor(z[None, None]), oh, ow).data[0, 0]
    assert np.abs(r(a * x + b * y) - (a * r(x) + b * r(y))).max() < 1e-10 * (1 + abs(a) + abs(b))
    assert np.abs(r(x) - half_pixel(x, oh, ow)).max() < 1e-12


# --- pooling


def test_max_pool_and_adaptive_pool():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(T.max_pool_2d(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
    out = T.adaptive_max_pool_2d(Tensor(np.arange(25.0).reshape(1, 1, 5, 5)), 2, 2).data[0, 0]
    # bins floor(i*5/2)..ceil((i+1)*5/2): rows/cols {0..2} and {2..4}
    assert np.array_equal(out, [[12, 14], [22, 24]])


# --- backward


def test_backward_sum_and_square():
    x = Tensor(np.random.default_rng(7).standard_normal((3, 4)), requires_grad=True)
    with T.new_graph():
        T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))
    x.grad = None
    with T.new_graph():
        T.backward(T.sum_(T.mul(x, x)))
    assert np.abs(x.grad - 2 * x.data).max() < 1e-15


def test_backward_accumulates_and_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.new_graph():
        loss = T.sum_(x)
        T.backward(loss)
        T.backward(loss)
    assert np.array_equal(x.grad, np.full(3, 2.0))
    with T.new_graph(), pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_backward_requires_loss_on_active_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.new_graph():
        loss = T.sum_(x)
    with T.new_graph(), pytest.raises(ContractError):
        T.backward(loss)


def test_graph_nodes_in_insertion_order():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.new_graph() as g:
        T.sum_(T.relu(T.mul(x, 3.0)))
        assert [n.op for n in g.nodes] == ["mul", "relu", "sum"]


def test_composite_conv_softmax_matches_fd():
    rng = np.random.default_rng(8)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    r = rng.standard_normal((1, 3, 4, 4))
    f = lambda x: T.sum_(T.mul(T.softmax(T.conv2d(x, w, pad=1), axis=1), r))
    assert T.grad_check(f, Tensor(rng.standard_normal((1, 2, 4, 4)))) < 1e-5


@given(arrays(np.float64, 6, elements=st.integers(-64, 64).map(lambda v: v / 8)))
def test_grad_check_of_sum_is_exact(x):
    # dyadic inputs and step keep every float operation exact
    assert T.grad_check(T.sum_, Tensor(x), eps=2.0**-10) == 0.0


def test_grad_check_of_sum_on_random_floats_is_at_roundoff():
    assert T.grad_check(T.sum_, Tensor(np.random.default_rng(9).standard_normal(6))) < 1e-10


def test_grad_check_names_non_finite_op():
    x = Tensor(np.array([1.0, 0.0]))
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError, match="div"):
        T.grad_check(lambda t: T.sum_(T.div(1.0, t)), x)


@pytest.mark.parametrize("seed", range(5))
def test_primitive_grad_checks_over_seeds(seed):
    from utnet.gradcheck import REGISTRY

    for name, check in REGISTRY.items():
        if check.kind == "op":
            err, where = check.run(seed)
            assert err < 1e-5, (name, where, err)


def test_debug_mode_catches_nan():
    T.set_debug(True)
    try:
        with np.errstate(divide="ignore"), pytest.raises(FloatingPointError, match="div"):
            T.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    finally:
        T.set_debug(False)


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.size == 6 and t.data.dtype == np.float64 and t.data.flags.c_contiguous
    with pytest.raises(ContractError):
        t.item()


def test_forward_bit_identical_across_runs():
    def run():
        rng = np.random.default_rng(10)
        x, w = Tensor(rng.standard_normal((2, 3, 6, 6))), Tensor(rng.standard_normal((4, 3, 3, 3)))
        return T.softmax(T.gelu(T.conv2d(x, w, pad=1)), axis=1).data.tobytes()

    assert run() == run()


def test_serialization_round_trip(tmp_path):
    x = np.random.default_rng(11).standard_normal((2, 3, 4))
    T.save_tensor(Tensor(x), tmp_path, "w")
    assert json.loads((tmp_path / "w.json").read_text()) == {"name": "w", "dtype": "f64", "shape": [2, 3, 4]}
    assert (tmp_path / "w.f64").read_bytes() == x.astype("<f8").tobytes()
    assert np.array_equal(T.load_tensor(tmp_path, "w"), x)
