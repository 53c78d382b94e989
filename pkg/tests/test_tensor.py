import math

import numpy as np
import pytest

from hici.tensor import (
    GraphError,
    ShapeError,
    Tensor,
    backward,
    concat_cols,
    concat_rows,
    cross_entropy_mean,
    embedding,
    finite_diff_grad,
    gelu,
    grad_or_zero,
    l2_normalize,
    layer_norm,
    matmul,
    matmul_nt,
    max_rows,
    mean_rows,
    mul_const,
    parameter,
    reduce_stats,
    scale,
    slice_cols,
    softmax_rows,
    softplus,
    std_rows,
    tsum,
)

from oracles import matmul_triple_loop, two_pass_stats


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out = matmul(Tensor(a), Tensor(b))
    assert np.abs(out.data - matmul_triple_loop(a, b)).max() <= 1e-15


def test_matmul_vs_triple_loop_8x8():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        out = matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - matmul_triple_loop(a, b)).max() <= 1e-13


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_nt_matches_transpose():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    assert np.array_equal(matmul_nt(Tensor(a), Tensor(b)).data, a @ b.T)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    assert np.array_equal(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_large_inputs_stable():
    out = softmax_rows(Tensor([[1000.0, 1000.0]])).data
    assert np.isfinite(out).all()
    assert np.array_equal(out, [[0.5, 0.5]])


def test_softmax_analytic():
    out = softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
    assert np.abs(out - [[0.25, 0.75]]).max() <= 1e-15


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(100):
        m, n = rng.integers(1, 8, size=2)
        x = rng.normal(scale=10.0, size=(m, n))
        sums = softmax_rows(Tensor(x)).data.sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-12


def test_softmax_mask_zeroes_hidden_positions():
    x = np.array([[1.0, 2.0, 3.0]])
    vis = np.array([[True, False, True]])
    out = softmax_rows(Tensor(x), visible=vis).data
    assert out[0, 1] == 0.0
    assert abs(out.sum() - 1.0) <= 1e-12


def test_softmax_mask_needs_one_visible():
    with pytest.raises(ShapeError, match="no visible"):
        softmax_rows(Tensor(np.zeros((1, 2))), visible=np.zeros((1, 2), dtype=bool))


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_row():
    out = layer_norm(Tensor([[1.0, 1.0, 1.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.abs(out.data).max() <= 1e-6


def test_layer_norm_already_normalized():
    out = layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.array_equal(out.data, [[-1.0, 1.0]])


def test_layer_norm_affine():
    out = layer_norm(Tensor([[0.0, 2.0]]), Tensor(2.0 * np.ones(2)),
                     Tensor(np.ones(2)), eps=0.0)
    assert np.array_equal(out.data, [[-1.0, 3.0]])


def test_layer_norm_standardizes():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 9))
    out = layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9)), eps=0.0).data
    assert np.abs(out.mean(axis=1)).max() <= 1e-12
    assert np.abs((out**2).mean(axis=1) - 1.0).max() <= 1e-9


# ---------------------------------------------------------------------------
# statistics


def test_reduce_stats_hand_example():
    mean, mx, mn, sd = reduce_stats(Tensor([[1.0, 3.0], [3.0, 1.0]]))
    assert np.array_equal(mean.data, [2.0, 2.0])
    assert np.array_equal(mx.data, [3.0, 3.0])
    assert np.array_equal(mn.data, [1.0, 1.0])
    assert np.array_equal(sd.data, [1.0, 1.0])


def test_reduce_stats_single_row():
    mean, mx, mn, sd = reduce_stats(Tensor([[5.0, 7.0]]))
    for t in (mean, mx, mn):
        assert np.array_equal(t.data, [5.0, 7.0])
    assert np.array_equal(sd.data, [0.0, 0.0])


def test_reduce_stats_vs_two_pass_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(100, 7))
    mean, mx, mn, sd = reduce_stats(Tensor(x))
    omean, omx, omn, osd = two_pass_stats(x)
    assert np.abs(mean.data - omean).max() <= 1e-12
    assert np.array_equal(mx.data, omx)
    assert np.array_equal(mn.data, omn)
    assert np.abs(sd.data - osd).max() <= 1e-12


def test_mean_rows_permutation_invariant_bitwise():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(13, 4))
    perm = rng.permutation(13)
    assert np.array_equal(mean_rows(Tensor(x)).data, mean_rows(Tensor(x[perm])).data)
    assert np.array_equal(std_rows(Tensor(x)).data, std_rows(Tensor(x[perm])).data)


# ---------------------------------------------------------------------------
# l2 normalize / softplus / gelu


def test_l2_normalize_345():
    out = l2_normalize(Tensor([3.0, 4.0]))
    assert np.abs(out.data - [0.6, 0.8]).max() <= 1e-15


def test_l2_normalize_zero_vector():
    assert np.array_equal(l2_normalize(Tensor([0.0, 0.0])).data, [0.0, 0.0])


def test_l2_normalize_idempotent_on_unit():
    v = np.array([1.0, 0.0, 0.0])
    assert np.abs(l2_normalize(Tensor(v)).data - v).max() <= 1e-15


def test_softplus_values():
    assert abs(softplus(Tensor([0.0])).data[0] - math.log(2.0)) <= 1e-15
    assert abs(softplus(Tensor([100.0])).data[0] - 100.0) <= 1e-12
    small = softplus(Tensor([-100.0])).data[0]
    assert abs(small - math.exp(-100.0)) <= 1e-10 * math.exp(-100.0)


def test_softplus_positive():
    rng = np.random.default_rng(7)
    x = rng.normal(scale=50.0, size=200)
    assert (softplus(Tensor(x)).data > 0).all()


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(8)
    x = rng.normal(scale=100.0, size=(5, 6))
    for out in (softmax_rows(Tensor(x)), gelu(Tensor(x)), softplus(Tensor(x)),
                layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)))):
        assert np.isfinite(out.data).all()


# ---------------------------------------------------------------------------
# autodiff


def test_backward_linear_layer():
    x = np.array([[1.0, 2.0, 3.0]])
    w = parameter(np.zeros((3, 2)))
    loss = tsum(matmul(Tensor(x), w))
    backward(loss)
    assert np.array_equal(w.grad, np.repeat(x.T, 2, axis=1))


def test_backward_disconnected_parameter_gets_zero():
    w = parameter(np.ones((2, 2)))
    loss = tsum(Tensor(np.ones((2, 2))))
    backward(loss)
    assert w.grad is None
    assert np.array_equal(grad_or_zero(w), np.zeros((2, 2)))


def test_double_backward_raises():
    w = parameter(np.ones((2, 2)))
    loss = tsum(matmul(w, w))
    backward(loss)
    with pytest.raises(GraphError, match="already ran"):
        backward(loss)


def test_backward_needs_scalar():
    w = parameter(np.ones((2, 2)))
    with pytest.raises(GraphError, match="scalar"):
        backward(matmul(w, w))


def test_gradient_shapes_match_parameters():
    rng = np.random.default_rng(9)
    w = parameter(rng.normal(size=(3, 4)))
    g = parameter(rng.normal(size=4))
    b = parameter(rng.normal(size=4))
    loss = tsum(layer_norm(matmul(Tensor(rng.normal(size=(2, 3))), w), g, b))
    backward(loss)
    for p in (w, g, b):
        assert p.grad.shape == p.data.shape


def _check_op_gradient(build_loss, p, tol=1e-6, h=1e-5, seed=0):
    """Reverse-mode vs. central differences for one parameterized loss."""
    loss = build_loss(p)
    backward(loss)
    g_ad = grad_or_zero(p).copy()

    def f(arr):
        saved = p.data
        p.data = arr
        val = build_loss(p).item()
        p.data = saved
        return val

    g_fd = finite_diff_grad(f, p.data.copy(), h=h)
    denom = max(np.linalg.norm(g_ad), np.linalg.norm(g_fd), 1e-300)
    assert np.linalg.norm(g_ad - g_fd) / denom <= tol


def _stats_stack(p):
    from hici.tensor import reshape

    mean, mx, mn, sd = reduce_stats(p)
    d = p.data.shape[1]
    return concat_rows([reshape(t, (1, d)) for t in (mean, mx, mn, sd)])


def _primitive_cases():
    rng = np.random.default_rng(42)
    c45 = rng.normal(size=(4, 5))
    c44 = rng.normal(size=(4, 4))
    c46 = rng.normal(size=(4, 6))
    b54 = rng.normal(size=(5, 4))
    vis = rng.random(size=(4, 5)) > 0.3
    vis[:, 0] = True
    ids = rng.integers(0, 4, size=6)
    emb_w = rng.normal(size=(6, 3))
    targets = rng.integers(0, 5, size=4)
    gain, bias = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
    return {
        "matmul": ((4, 5), lambda p: tsum(mul_const(matmul(p, Tensor(b54)), c44))),
        "matmul_nt": ((4, 5), lambda p: tsum(mul_const(matmul_nt(p, Tensor(c45)), c44))),
        "softmax": ((4, 5), lambda p: tsum(mul_const(softmax_rows(p), c45))),
        "softmax_masked": ((4, 5),
                           lambda p: tsum(mul_const(softmax_rows(p, visible=vis), c45))),
        "layer_norm_x": ((4, 5), lambda p: tsum(mul_const(layer_norm(p, gain, bias), c45))),
        "layer_norm_affine": ((5,),
                              lambda p: tsum(mul_const(layer_norm(Tensor(c45), p, bias), c45))),
        "stats": ((6, 5), lambda p: tsum(mul_const(_stats_stack(p), c45))),
        "l2_normalize": ((7,), lambda p: tsum(mul_const(l2_normalize(p), np.arange(7.0)))),
        "softplus": ((6,), lambda p: tsum(mul_const(softplus(p), np.arange(6.0) - 2))),
        "gelu": ((6,), lambda p: tsum(mul_const(gelu(p), np.arange(6.0) - 3))),
        "cross_entropy": ((4, 5), lambda p: cross_entropy_mean(p, targets)),
        "embedding": ((4, 3), lambda p: tsum(mul_const(embedding(p, ids), emb_w))),
        "concat_slice": ((4, 6), lambda p: tsum(mul_const(
            concat_cols([slice_cols(p, 3, 6), slice_cols(p, 0, 3)]), c46))),
        "scale": ((1,), lambda p: tsum(scale(Tensor(c45), p))),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_gradients_match_finite_differences(name):
    shape, build = _primitive_cases()[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    p = parameter(rng.normal(size=shape))
    _check_op_gradient(build, p)


# ---------------------------------------------------------------------------
# finite differences themselves


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda p: float(p[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) <= 1e-9


def test_finite_diff_constant():
    g = finite_diff_grad(lambda p: 1.0, np.array([3.0, -1.0]))
    assert np.array_equal(g, [0.0, 0.0])
