"""Autodiff core: loop oracles, finite-difference checks, contract errors."""

import numpy as np
import pytest

import afpa.tensor as T
from afpa.errors import ContractError, NumericError, ShapeError


# ---------------------------------------------------------------------------
# independent oracles


def matmul_loops(a, b):
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            for k in range(q):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv1d_loops(x, w, stride, padding):
    c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    out_len = (length + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, out_len))
    for o in range(c_out):
        for t in range(out_len):
            acc = 0.0
            for c in range(c_in):
                for j in range(k):
                    acc += w[o, c, j] * xp[c, t * stride + j]
            out[o, t] = acc
    return out


def conv2d_loops(x, w, stride, padding, groups=1):
    c_in, h, wd = x.shape
    c_out, c_per_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    in_per_g = c_in // groups
    out_per_g = c_out // groups
    for o in range(c_out):
        g = o // out_per_g
        for a in range(oh):
            for b in range(ow):
                acc = 0.0
                for ci in range(in_per_g):
                    c = g * in_per_g + ci
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[o, ci, i, j] * xp[c, a * stride + i, b * stride + j]
                out[o, a, b] = acc
    return out


def softmax_formula(row):
    e = np.exp(row - np.max(row))
    return e / e.sum()


# ---------------------------------------------------------------------------
# forward values against oracles


def test_matmul_identity():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.Tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.values, a.values)


def test_matmul_projector():
    p = T.Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(T.matmul(p, b).values, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_against_loops():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    out = T.matmul(T.Tensor(a), T.Tensor(b)).values
    assert np.max(np.abs(out - matmul_loops(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_softmax_symmetry_and_stability():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[0.5, 0.5]])
    out = T.softmax_rows(T.Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.values))
    assert out.values[0, 0] > 1 - 1e-9 and out.values[0, 1] < 1e-9


def test_softmax_matches_formula():
    row = np.array([1.0, 2.0, 3.0])
    out = T.softmax_rows(T.Tensor(row[None, :])).values[0]
    assert np.max(np.abs(out - softmax_formula(row))) < 1e-12


def test_softmax_rows_sum_to_one_and_open_interval():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 8)) * 5
    y = T.softmax_rows(T.Tensor(x)).values
    np.testing.assert_allclose(y.sum(axis=1), np.ones(6), atol=1e-9)
    assert np.all(y > 0) and np.all(y < 1)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        T.softmax_rows(T.Tensor([[np.nan, 0.0]]))


def test_conv1d_identity_kernel():
    x = T.Tensor([[1.0, 2.0, 3.0]])
    w = T.Tensor(np.ones((1, 1, 1)))
    np.testing.assert_array_equal(T.conv1d(x, w).values, [[1.0, 2.0, 3.0]])


def test_conv1d_box_sum_stride2():
    x = T.Tensor([[1.0, 1.0, 1.0, 1.0]])
    w = T.Tensor(np.ones((1, 1, 2)))
    np.testing.assert_array_equal(T.conv1d(x, w, stride=2).values, [[2.0, 2.0]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
def test_conv1d_against_loops(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 11))
    w = rng.standard_normal((3, 2, 4))
    out = T.conv1d(T.Tensor(x), T.Tensor(w), stride=stride, padding=padding).values
    assert np.max(np.abs(out - conv1d_loops(x, w, stride, padding))) < 1e-12


def test_conv1d_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv1d(T.Tensor(np.zeros((1, 3))), T.Tensor(np.zeros((1, 1, 5))))


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_conv2d_standard_against_loops(stride, padding):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=stride, padding=padding).values
    assert np.max(np.abs(out - conv2d_loops(x, w, stride, padding))) < 1e-12


def test_conv2d_depthwise_against_loops():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6, 5))
    w = rng.standard_normal((4, 1, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1, groups=4).values
    assert np.max(np.abs(out - conv2d_loops(x, w, 2, 1, groups=4))) < 1e-12


def test_concat_shape_law():
    a = T.Tensor(np.zeros((2, 3)))
    b = T.Tensor(np.zeros((2, 3)))
    assert T.concat([a, b], axis=1).shape == (2, 6)


def test_leaky_relu_definition():
    out = T.leaky_relu(T.Tensor([-1.0, 2.0]), slope=0.01)
    np.testing.assert_allclose(out.values, [-0.01, 2.0])


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(T.Tensor([[3.0, 3.0, 3.0]]), axis=1)
    np.testing.assert_allclose(out.values, np.zeros((1, 3)), atol=1e-12)


def test_cross_entropy_uniform_logits():
    c = 7
    loss = T.cross_entropy_with_logits(T.Tensor(np.zeros(c)), 3)
    assert abs(loss.item() - np.log(c)) < 1e-12


def test_cross_entropy_matches_neg_log_softmax():
    rng = np.random.default_rng(6)
    z = rng.standard_normal(5) * 3
    want = -np.log(softmax_formula(z)[2])
    got = T.cross_entropy_with_logits(T.Tensor(z), 2).item()
    assert abs(got - want) < 1e-12


# ---------------------------------------------------------------------------
# backward pass


def test_backward_sum_gives_ones():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_quadratic():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tensor_sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates_until_zeroed():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tensor_sum(x))
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_nonscalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_backward_diamond_graph():
    # y = sum((x + x) * x) = sum(2 x^2): grad = 4x
    x = T.Tensor([1.0, -2.0], requires_grad=True)
    T.backward(T.tensor_sum(T.mul(T.add(x, x), x)))
    np.testing.assert_allclose(x.grad, [4.0, -8.0])


def test_concat_backward_splits_gradient_exactly():
    rng = np.random.default_rng(7)
    a = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    weights = rng.standard_normal((2, 7))
    out = T.concat([a, b], axis=1)
    T.backward(T.tensor_sum(T.mul(out, T.Tensor(weights))))
    whole = np.sum(weights * weights)
    parts = np.sum(a.grad * a.grad) + np.sum(b.grad * b.grad)
    assert abs(parts - whole) < 1e-12


def test_tape_is_topologically_ordered():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    z = T.tensor_sum(T.add(y, x))
    order = T.tape(z)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_no_grad_skips_recording():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._backward is None


# ---------------------------------------------------------------------------
# finite-difference checks for every primitive (64-bit, dims <= 8)


def _rng():
    return np.random.default_rng(11)


PRIMITIVE_CASES = [
    ("add", lambda x: T.tensor_sum(T.mul(T.add(x, T.Tensor(_rng().standard_normal(x.shape))), x)), (4, 3)),
    ("add_scalar", lambda x: T.tensor_sum(T.mul(T.add(x, 1.7), x)), (5,)),
    ("neg", lambda x: T.tensor_sum(T.mul(T.neg(x), x)), (4,)),
    ("mul", lambda x: T.tensor_sum(T.mul(x, T.mul(x, x))), (3, 3)),
    ("sqrt", lambda x: T.tensor_sum(T.mul(T.sqrt(T.add(T.mul(x, x), 0.5)), x)), (6,)),
    ("clamp", lambda x: T.tensor_sum(T.mul(T.clamp(x, -0.5, 0.5), x)), (8,)),
    ("where", lambda x: T.tensor_sum(T.where(np.arange(6) % 2 == 0, T.mul(x, x), T.mul(x, 3.0))), (6,)),
    ("leaky_relu", lambda x: T.tensor_sum(T.mul(T.leaky_relu(x, 0.01), x)), (7,)),
    ("sum", lambda x: T.tensor_sum(x), (5,)),
    ("mean", lambda x: T.tensor_mean(T.mul(x, x)), (4, 2)),
    ("mean_pool", lambda x: T.tensor_sum(T.mul(T.mean_pool(x, axis=1), T.mean_pool(x, axis=1))), (3, 5)),
    ("global_avg_pool", lambda x: T.tensor_sum(T.mul(T.global_avg_pool(x), T.global_avg_pool(x))), (2, 3, 4)),
    ("reshape", lambda x: T.tensor_sum(T.mul(T.reshape(x, (6,)), T.reshape(x, (6,)))), (2, 3)),
    ("transpose", lambda x: T.tensor_sum(T.mul(T.transpose(x), T.transpose(x))), (3, 4)),
    ("narrow", lambda x: T.tensor_sum(T.mul(T.narrow(x, 1, 1, 2), T.narrow(x, 1, 1, 2))), (3, 4)),
    ("concat", lambda x: T.tensor_sum(T.mul(T.concat([x, x], axis=0), T.concat([x, x], axis=0))), (2, 3)),
    ("matmul", lambda x: T.tensor_sum(T.mul(T.matmul(x, T.transpose(x)), T.matmul(x, T.transpose(x)))), (3, 4)),
    ("linear", lambda x: T.tensor_sum(T.mul(T.linear(T.reshape(x, (6,)), T.Tensor(_rng().standard_normal((4, 6))), T.Tensor(_rng().standard_normal(4))), T.linear(T.reshape(x, (6,)), T.Tensor(_rng().standard_normal((4, 6))), None))), (6, 1)),
    ("softmax_rows", lambda x: T.tensor_sum(T.mul(T.softmax_rows(x), T.Tensor(_rng().standard_normal(x.shape)))), (4, 5)),
    ("layer_norm", lambda x: T.tensor_sum(T.mul(T.layer_norm(x, axis=1), T.Tensor(_rng().standard_normal(x.shape)))), (3, 6)),
    ("affine", lambda x: T.tensor_sum(T.mul(T.affine(x, T.Tensor([1.5, -0.5, 2.0]), T.Tensor([0.1, 0.2, 0.3]), axis=0), x)), (3, 4)),
    ("l2_normalize_rows", lambda x: T.tensor_sum(T.mul(T.l2_normalize_rows(x), T.Tensor(_rng().standard_normal(x.shape)))), (3, 5)),
    ("conv1d", lambda x: T.tensor_sum(T.mul(T.conv1d(x, T.Tensor(_rng().standard_normal((2, 2, 3))), stride=2, padding=1), T.Tensor(_rng().standard_normal((2, 4))))), (2, 8)),
    ("conv2d", lambda x: T.tensor_sum(T.mul(T.conv2d(x, T.Tensor(_rng().standard_normal((2, 2, 3, 3))), stride=2, padding=1), T.Tensor(_rng().standard_normal((2, 3, 3))))), (2, 5, 5)),
    ("conv2d_depthwise", lambda x: T.tensor_sum(T.mul(T.conv2d(x, T.Tensor(_rng().standard_normal((3, 1, 3, 3))), stride=1, padding=1, groups=3), T.Tensor(_rng().standard_normal((3, 4, 4))))), (3, 4, 4)),
    ("cross_entropy", lambda x: T.cross_entropy_with_logits(T.reshape(x, (8,)), 2), (8, 1)),
]


@pytest.mark.parametrize("name,f,shape", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_gradcheck_primitive(name, f, shape):
    rng = np.random.default_rng(hash(name) % (2**32))
    x = T.Tensor(rng.standard_normal(shape) * 0.7, requires_grad=True)
    assert T.grad_check(f, x) < 1e-5


def test_gradcheck_weight_sides():
    # check gradients flowing into the non-x operand of matmul / conv weights
    rng = np.random.default_rng(12)
    a = rng.standard_normal((3, 4))
    w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    err = T.grad_check(lambda t: T.tensor_sum(T.mul(T.matmul(T.Tensor(a), t), T.matmul(T.Tensor(a), t))), w)
    assert err < 1e-5
    x = rng.standard_normal((2, 6))
    wc = T.Tensor(rng.standard_normal((3, 2, 3)), requires_grad=True)
    sel = T.Tensor(rng.standard_normal((3, 3)))
    err = T.grad_check(lambda t: T.tensor_sum(T.mul(T.conv1d(T.Tensor(x), t, stride=2, padding=1), sel)), wc)
    assert err < 1e-5


def test_gradcheck_softmax_then_pick():
    rng = np.random.default_rng(13)
    x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    err = T.grad_check(lambda t: T.tensor_sum(T.narrow(T.softmax_rows(t), 1, 1, 1)), x)
    assert err < 1e-6


def test_grad_check_of_sum_is_exact():
    x = T.Tensor(np.random.default_rng(14).standard_normal(5), requires_grad=True)
    assert T.grad_check(T.tensor_sum, x) < 1e-9


def test_shape_strictness_no_general_broadcasting():
    a = T.Tensor(np.zeros((2, 3)))
    b = T.Tensor(np.zeros(3))
    with pytest.raises(ShapeError):
        T.add(a, b)
    with pytest.raises(ShapeError):
        T.mul(a, b)


def test_scalar_tensor_broadcast_allowed():
    a = T.Tensor(np.ones((2, 2)), requires_grad=True)
    s = T.Tensor(3.0, requires_grad=True)
    out = T.mul(a, s)
    np.testing.assert_array_equal(out.values, 3 * np.ones((2, 2)))
    T.backward(T.tensor_sum(out))
    assert abs(float(s.grad.reshape(())) - 4.0) < 1e-12
