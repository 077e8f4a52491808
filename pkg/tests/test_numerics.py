import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from scanformer import numerics as nx
from scanformer.errors import ContractError, DimensionError, NumericalError
from scanformer.numerics import Tensor


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)
    out = nx.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_scalar_case():
    assert nx.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data[0, 0] == 6.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 4)).astype(np.float32)
    b = rng.normal(size=(4, 3)).astype(np.float32)
    out = nx.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(out - triple_loop(a, b)).max() <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31 - 1))
def test_matmul_oracle_up_to_32(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
    b = rng.uniform(-1, 1, size=(k, n)).astype(np.float32)
    out = nx.matmul(Tensor(a), Tensor(b)).data
    # float32 accumulation of k products in [-1, 1]
    assert np.abs(out - triple_loop(a, b)).max() <= 1e-6 * max(k, 1) * 4


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    res = nx.check_gradients(lambda: nx.matmul(a, b).sum(), [a, b])
    assert res.max_rel_error <= 1e-6


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    out = nx.softmax(Tensor(np.full(4, 3.0, dtype=np.float32)))
    np.testing.assert_allclose(out.data, 0.25)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.integers(1, 20), elements=st.floats(-50, 50, width=32)),
       st.floats(-100, 100, width=32))
def test_softmax_probability_and_shift(x, c):
    p = nx.softmax(Tensor(x)).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-6
    q = nx.softmax(Tensor((x + np.float32(c)).astype(np.float32))).data
    assert np.abs(p - q).max() <= 1e-5


def test_softmax_large_inputs_do_not_overflow():
    out = nx.softmax(Tensor(np.array([1e4, 1e4 - 1, -1e4], dtype=np.float32)))
    assert np.isfinite(out.data).all()


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_row_is_bias():
    d = 6
    bias = Tensor(np.arange(d, dtype=np.float32))
    out = nx.layer_norm(Tensor(np.full((2, d), 7.0, dtype=np.float32)), Tensor(np.ones(d, np.float32)), bias)
    np.testing.assert_allclose(out.data, np.broadcast_to(bias.data, (2, d)))


def test_layer_norm_two_values():
    out = nx.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    # 1 / sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.data, [0.999995, -0.999995], atol=1e-6)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(50, 32))
    g = rng.uniform(0.5, 2.0, size=32)
    out = nx.layer_norm(Tensor(x), Tensor(np.full(32, 1.5)), Tensor(np.zeros(32))).data
    assert np.abs(out.mean(axis=1)).max() <= 1e-4
    assert np.abs(out.var(axis=1) - 1.5 ** 2).max() <= 1e-3
    out = nx.layer_norm(Tensor(x), Tensor(g), Tensor(np.zeros(32))).data
    assert np.isfinite(out).all()


def test_layer_norm_rejects_wrong_gain():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


# -- backward -------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = leaf([1.0, -2.0, 3.0])
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])


def test_backward_unused_leaf_gets_no_gradient():
    x, y = leaf([1.0, 2.0]), leaf([3.0])
    (x * 2.0).sum().backward()
    assert y.grad is None or not y.grad.any()


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_leaf_gradients_accumulate():
    x = leaf([1.0, 2.0])
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])
    nx.zero_grad([x])
    assert x.grad is None


def test_shared_subexpression_visited_once():
    x = leaf([2.0])
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


# -- elementwise ops against finite differences -----------------------------------

UNARY = {
    "exp": nx.exp,
    "log": lambda t: nx.log(t * t + 1.0),
    "sigmoid": nx.sigmoid,
    "tanh": nx.tanh,
    "gelu": nx.gelu,
    "sqrt": lambda t: nx.sqrt(t * t + 0.5),
    "power": lambda t: nx.power(t, 3.0),
    "softmax": lambda t: nx.softmax(t, axis=-1) * np.arange(5.0),
    "layer_norm": lambda t: nx.layer_norm(t, Tensor(np.linspace(0.5, 1.5, 5)), Tensor(np.arange(5.0)))
    * np.arange(5.0),
    "mean": lambda t: t.mean(axis=0) * np.arange(5.0),
    "transpose": lambda t: nx.transpose(t) * np.arange(4.0),
    "reshape": lambda t: nx.reshape(t, (5, 4)) * np.arange(4.0),
    "getitem": lambda t: t[1:3, ::2] * 2.0,
    "gather": lambda t: t[:, np.array([0, 0, 3])],
    "concat": lambda t: nx.concat([t, t * t], axis=1),
    "broadcast": lambda t: nx.broadcast_to(t, (2, 4, 5)) * np.arange(5.0),
    "div": lambda t: t / (t * t + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(sorted(UNARY).index(name))
    x = leaf(rng.normal(size=(4, 5)))
    w = rng.normal(size=UNARY[name](Tensor(x.data)).shape)
    res = nx.check_gradients(lambda: (UNARY[name](x) * w).sum(), [x])
    assert res.max_rel_error <= 1e-3, (name, res.worst)


def test_binary_gradients():
    rng = np.random.default_rng(5)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)) + 3.0)
    f = lambda: ((a * b) + (a - b) + a / b + nx.maximum(a, b * 0.1) + nx.minimum(a, b * 0.1)).sum()
    assert nx.check_gradients(f, [a, b]).max_rel_error <= 1e-3


def test_bias_broadcast_gradient():
    rng = np.random.default_rng(6)
    x, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=4))
    res = nx.check_gradients(lambda: ((x + b) * (x + b)).sum(), [x, b])
    assert res.max_rel_error <= 1e-6


def test_restricted_broadcasting():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 1)))
    with pytest.raises(DimensionError):
        Tensor(np.ones(3)) + np.ones((2, 3))


def test_non_finite_results_signal():
    with pytest.raises(NumericalError):
        nx.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NumericalError):
        nx.exp(Tensor(np.array([1e4], dtype=np.float32)))
    with pytest.raises(NumericalError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


def test_straight_through_routes_gradient_to_soft():
    s = leaf([0.2, 0.7])
    out = nx.straight_through(s, [0.0, 1.0])
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    (out * np.array([3.0, 5.0])).sum().backward()
    np.testing.assert_array_equal(s.grad, [3.0, 5.0])


def test_clip_gradient_zero_outside():
    x = leaf([-2.0, 0.5, 2.0])
    nx.clip(x, 0.0, 1.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


# -- gradient checker -------------------------------------------------------------

def test_check_gradients_quadratic():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(4, 4))
    q = a @ a.T
    x = leaf(rng.normal(size=(4, 1)))
    f = lambda: nx.matmul(nx.transpose(x), nx.matmul(Tensor(q), x)).sum()
    assert nx.check_gradients(f, [x]).max_rel_error <= 1e-6


def test_check_gradients_linear():
    x = leaf(np.random.default_rng(8).normal(size=6))
    w = np.arange(1.0, 7.0)
    assert nx.check_gradients(lambda: (x * w).sum(), [x]).max_rel_error <= 1e-7


def test_check_gradients_flags_clamp_kink():
    from scanformer.selector import CLAMP_LOW, sharp_sigmoid
    x = leaf([CLAMP_LOW, 0.3])
    res = nx.check_gradients(lambda: sharp_sigmoid(x).sum(), [x])
    assert [k[1] for k in res.kinks] == [0]
    assert res.max_rel_error <= 1e-3


def test_check_gradients_catches_wrong_gradient():
    x = leaf([0.5, -1.0])

    def wrong_square(t):
        return nx._result(t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    assert nx.check_gradients(lambda: wrong_square(x).sum(), [x]).max_rel_error > 0.1


# -- dtype, meters, dump -------------------------------------------------------------

def test_float32_default_and_precision_switch():
    assert nx.tensor([1.0]).dtype == np.float32
    assert Tensor(np.ones(1)).dtype == np.float64  # explicit float dtypes are kept
    with nx.precision(np.float64):
        assert nx.tensor([1.0]).dtype == np.float64
    assert nx.tensor([1.0]).dtype == np.float32


def test_mac_meter_counts_matmul():
    meter = nx.MacMeter()
    with nx.count_macs(meter):
        nx.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
    assert meter.macs == 2 * 3 * 4 * 5


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_dump_grid():
    text = nx.dump(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)), 1)
    assert text.splitlines()[1:] == [" 1.0  2.0", " 3.0  4.0"]
