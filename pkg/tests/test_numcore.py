import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptreg import numcore as nc
from promptreg.numcore import Graph, Tensor


def test_softmax_uniform():
    out = nc.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_l2_normalize_345():
    np.testing.assert_allclose(nc.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)


def test_matmul_ones():
    out = nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out.data, [[3.0], [3.0]])


def test_matmul_shape_mismatch_names_extents():
    with pytest.raises(nc.ShapeError, match=r"\[2, 3\].*\[2, 1\]"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_add_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_non_finite_rejected():
    with pytest.raises(nc.NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(nc.NonFiniteError):
        nc.exp(Tensor([1000.0]))


def test_primitive_forward_dispatch():
    out = nc.primitive_forward("add", Tensor([1.0]), Tensor([2.0]))
    assert out.item() == 3.0
    with pytest.raises(ValueError):
        nc.primitive_forward("conv2d", Tensor([1.0]))


def test_power_rule():
    x = Tensor([3.0], requires_grad=True)
    with Graph():
        grads = nc.backward(x * x)
    assert grads[x][0] == 6.0


def test_softmax_sum_has_zero_gradient():
    z = Tensor(np.random.default_rng(0).normal(size=(1, 5)), requires_grad=True)
    with Graph():
        grads = nc.backward(nc.sum(nc.softmax_rows(z)))
    np.testing.assert_allclose(grads[z], 0.0, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Graph(), pytest.raises(nc.ShapeError):
        nc.backward(x * 2.0)


def test_unused_leaf_gets_exact_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    with Graph():
        loss = nc.sum(x * x)
        grads = nc.backward(loss, params=[x, y])
    assert np.array_equal(grads[y], np.zeros(1))
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_graph_visits_each_record_once_and_is_cleared():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        loss = nc.sum(nc.exp(x) * x)
        n = len(g)
        assert n == 3
        nc.backward(loss)
        assert len(g) == 0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Graph() as g, nc.no_grad():
        y = x * x
        assert len(g) == 0
        assert not y.requires_grad


def _composite(params):
    a, w1, w2, w3 = params
    h = nc.gelu(a @ w1)
    h = nc.layer_norm(h)
    h = nc.softmax_rows(h @ w2)
    h = nc.l2_normalize_rows(h @ w3 + a)
    return nc.sum(nc.log(nc.exp(h) + 1.0)) + nc.mean(nc.abs(h))


def test_random_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(1)
    params = [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True)
              for s in [(3, 4), (4, 5), (5, 6), (6, 4)]]
    err = nc.finite_difference_check(lambda: _composite(params), params, step=1e-5)
    assert err < 1e-4


def test_fd_quadratic_is_tight():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(5, 5))
    A = Tensor(A @ A.T)
    x = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    err = nc.finite_difference_check(lambda: nc.sum(nc.transpose(x) @ A @ x), [x], step=1e-5)
    assert err < 1e-8


def test_fd_step_zero_rejected():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        nc.finite_difference_check(lambda: x * x, [x], step=0.0)


# every primitive's Jacobian-vector product against central differences
def _jvp_cases():
    yield "matmul", lambda a, b: nc.matmul(a, b), [(2, 3, 4), (4, 2)]
    yield "add", nc.add, [(2, 3), (3,)]
    yield "sub", nc.sub, [(1, 3), (2, 3)]
    yield "scalar_mul", lambda a: nc.scalar_mul(a, -1.7), [(2, 3)]
    yield "elementwise_mul", nc.elementwise_mul, [(2, 3), (2, 1)]
    yield "concat_rows", nc.concat_rows, [(2, 3), (3, 2, 3)]
    yield "slice_rows", lambda a: nc.slice_rows(a, 1, 3), [(2, 4, 3)]
    yield "layer_norm", nc.layer_norm, [(3, 5)]
    yield "gelu", nc.gelu, [(3, 4)]
    yield "softmax_rows", nc.softmax_rows, [(3, 4)]
    yield "log", lambda a: nc.log(nc.exp(a) + 0.5), [(3,)]
    yield "exp", nc.exp, [(3, 2)]
    yield "abs", nc.abs, [(4,)]
    yield "sum", lambda a: nc.sum(a, axis=-1), [(3, 4)]
    yield "mean", lambda a: nc.mean(a, axis=0), [(3, 4)]
    yield "l2_normalize_rows", nc.l2_normalize_rows, [(3, 4)]
    yield "transpose", nc.transpose, [(2, 3, 4)]
    yield "permute", lambda a: nc.permute(a, (2, 0, 1)), [(2, 3, 4)]
    yield "reshape", lambda a: nc.reshape(a, (4, 3)), [(2, 6)]
    yield "clamp_min", lambda a: nc.clamp_min(a, 0.1), [(5,)]


@pytest.mark.parametrize("kind,fn,shapes", list(_jvp_cases()), ids=[c[0] for c in _jvp_cases()])
def test_primitive_jvp_matches_finite_differences(kind, fn, shapes):
    rng = np.random.default_rng(abs(hash(kind)) % 2**32)
    for trial in range(3):
        xs = [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True) for s in shapes]
        probe = None

        def loss():
            nonlocal probe
            out = fn(*xs)
            if probe is None:
                probe = Tensor(rng.uniform(-1, 1, size=out.shape))
            return nc.sum(out * probe)

        assert nc.finite_difference_check(loss, xs, step=1e-5) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.integers(1, 4))
def test_softmax_rows_simplex(vals, rows):
    out = nc.softmax_rows(Tensor(np.tile(vals, (rows, 1)))).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_l2_normalize_unit_norm(vals):
    x = np.array([vals])
    if np.linalg.norm(x) < 1e-100:
        return
    out = nc.l2_normalize_rows(Tensor(x)).data
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12


def test_l2_normalize_zero_row_passes_through_with_warning():
    with pytest.warns(nc.DegenerateInputWarning):
        out = nc.l2_normalize_rows(Tensor([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    np.testing.assert_allclose(out.data[1], [0.6, 0.8])


def test_constant_in_leaf_gives_exact_zero_gradient():
    x = Tensor([0.3, -0.2], requires_grad=True)
    c = Tensor([1.0, 1.0], requires_grad=True)
    with Graph():
        # c enters only through an expression that cancels exactly
        loss = nc.sum(x * x) + nc.sum(c - c)
        grads = nc.backward(loss)
    assert np.array_equal(grads[c], np.zeros(2))


def test_identical_graphs_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        params = [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True) for s in [(3, 4), (4, 5), (5, 6), (6, 4)]]
        with Graph():
            loss = _composite(params)
            grads = nc.backward(loss)
        return loss.data.tobytes(), [grads[p].tobytes() for p in params]

    assert run() == run()


def test_sgd_step_arithmetic():
    p = Tensor([1.0], requires_grad=True)
    nc.sgd_step([p], {p: np.array([2.0])}, 0.0025)
    assert p.data[0] == pytest.approx(0.995, abs=1e-15)
    assert p.grad is None


def test_sgd_zero_gradient_unchanged():
    p = Tensor([1.5, -2.0], requires_grad=True)
    nc.sgd_step([p], {p: np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_rejects_bad_inputs():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        nc.sgd_step([p], {p: np.array([1.0])}, -1.0)
    with pytest.raises(KeyError):
        nc.sgd_step([p], {}, 0.1)


def test_frozen_tensors_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_broadcast_gradients_reduce_to_operand_shape():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Graph(), warnings.catch_warnings():
        grads = nc.backward(nc.sum(a + b))
    assert grads[b].shape == (3,)
    np.testing.assert_array_equal(grads[b], [4.0, 4.0, 4.0])
