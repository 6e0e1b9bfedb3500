import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from duncert import tensor as T
from duncert.tensor import ContractError, DimensionError, NumericError, Rng, Tape, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def grad_of(f, x):
    x = leaf(x)
    with Tape() as tape:
        tape.backward(f(x))
    return x.grad


# --- forward examples -------------------------------------------------------------

def test_matvec_identity():
    np.testing.assert_array_equal(T.matvec(np.eye(2), [3.0, 4.0]).data, [3.0, 4.0])


def test_logsumexp_of_zeros_is_log2():
    assert T.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(0.693147, abs=1e-6)


def test_relu_definition():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


@pytest.mark.parametrize("L, h, expected", [
    (np.zeros((2, 2)), [3.0, 4.0], [3.0, 4.0]),
    (np.array([[0.0, 0.0], [1.0, 0.0]]), [1.0, 1.0], [2.0, 1.0]),
    (np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], dtype=float), [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]),
    (np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], dtype=float), [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
])
def test_lower_unit_triangular_matvec_examples(L, h, expected):
    np.testing.assert_allclose(T.lower_unit_triangular_matvec(L, h).data, expected)


def test_lower_unit_triangular_ignores_upper_and_diagonal():
    L = np.array([[5.0, 7.0], [1.0, 9.0]])
    np.testing.assert_allclose(T.lower_unit_triangular_matvec(L, [1.0, 1.0]).data, [2.0, 1.0])


@given(st.integers(1, 8), st.integers(0, 2 ** 31))
def test_lower_unit_triangular_matches_dense(D, seed):
    g = np.random.default_rng(seed)
    L, h = g.normal(size=(D, D)), g.normal(size=D)
    dense = (np.eye(D) + np.tril(L, -1)).T @ h
    assert np.max(np.abs(T.lower_unit_triangular_matvec(L, h).data - dense)) < 1e-12


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_matvec_matches_triple_loop_on_integers(n, m, seed):
    g = np.random.default_rng(seed)
    A, x = g.integers(-9, 10, size=(n, m)).astype(float), g.integers(-9, 10, size=m).astype(float)
    ref = np.zeros(n)
    for i in range(n):
        for j in range(m):
            ref[i] += A[i, j] * x[j]
    np.testing.assert_array_equal(T.matvec(A, x).data, ref)


def test_shape_mismatch_names_the_op():
    with pytest.raises(DimensionError, match="matmul"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError, match="add"):
        T.add(np.ones((2, 3)), np.ones(2))


def test_supported_broadcasts():
    a = Tensor(np.ones((2, 3)))
    assert (a + Tensor(np.arange(3.0))).shape == (2, 3)
    assert (a * Tensor(np.ones((2, 1)))).shape == (2, 3)
    assert (a * 2.0).shape == (2, 3)


# --- backward examples ---------------------------------------------------------------

def test_grad_of_sum_of_squares():
    np.testing.assert_allclose(grad_of(lambda x: T.tsum(T.square(x)), [1.0, 2.0]), [2.0, 4.0])


def test_grad_of_sum_relu():
    np.testing.assert_allclose(grad_of(lambda x: T.tsum(T.relu(x)), [-1.0, 3.0]), [0.0, 1.0])


def test_grad_of_logsumexp_at_zero():
    np.testing.assert_allclose(grad_of(T.logsumexp, [0.0, 0.0]), [0.5, 0.5])


def test_backward_rejects_non_scalar_loss():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = T.square(x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_without_tape_is_a_contract_error():
    with pytest.raises(ContractError):
        T.backward(T.tsum(leaf([1.0])))


def test_gradients_accumulate_across_uses():
    x = leaf([3.0])
    with Tape() as tape:
        tape.backward(T.tsum(x * x + x))
    np.testing.assert_allclose(x.grad, [7.0])


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        with T.no_grad():
            y = T.tsum(T.square(x))
        assert not y.requires_grad
        assert tape.nodes == []


def test_tape_is_reset_after_backward():
    x = leaf([1.0])
    with Tape() as tape:
        tape.backward(T.tsum(T.exp(x)))
        assert tape.nodes == []


# --- gradient checks on every primitive -----------------------------------------------

_W = np.array([[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]])

UNARY = {
    "square": lambda x: T.tsum(T.square(x) * _W),
    "exp": lambda x: T.tsum(T.exp(x) * _W),
    "tanh": lambda x: T.tsum(T.tanh(x) * _W),
    "softplus": lambda x: T.tsum(T.softplus(x) * _W),
    "sigmoid": lambda x: T.tsum(T.sigmoid(x) * _W),
    "relu": lambda x: T.tsum(T.relu(x) * _W),
    "neg": lambda x: T.tsum(T.neg(x) * _W),
    "scalar_mul": lambda x: T.tsum(T.scalar_mul(2.5, x) * _W),
    "sum_axis0": lambda x: T.tsum(T.square(T.tsum(x, axis=0))),
    "sum_axis1": lambda x: T.tsum(T.square(T.tsum(x, axis=1))),
    "mean": lambda x: T.square(T.mean(x * _W)),
    "mean_axis1": lambda x: T.tsum(T.square(T.mean(x, axis=1))),
    "logsumexp_axis1": lambda x: T.tsum(T.square(T.logsumexp(x, axis=1))),
    "logsumexp_axis0": lambda x: T.tsum(T.logsumexp(x * _W, axis=0)),
    "log_softmax": lambda x: T.tsum(T.log_softmax(x) * _W),
    "transpose": lambda x: T.tsum(T.transpose(x) * _W.T),
    "reshape": lambda x: T.tsum(T.reshape(x, (3, 2)) * _W.reshape(3, 2)),
    "slice": lambda x: T.tsum(T.square(T.tslice(x, (slice(None), slice(1, 3))))),
    "concat": lambda x: T.tsum(T.square(T.concat([x, x * _W], axis=0))),
    "matmul": lambda x: T.tsum(T.square(T.matmul(x, Tensor(_W.T)))),
    "matmul_right": lambda x: T.tsum(T.tanh(T.matmul(Tensor(_W.T), x))),
    "matvec": lambda x: T.tsum(T.square(T.matvec(x, Tensor([1.0, -2.0, 0.5])))),
    "add_row": lambda x: T.tsum(T.square(x + Tensor([1.0, 2.0, 3.0]))),
    "mul_col": lambda x: T.tsum(T.square(x * Tensor([[2.0], [-1.0]]))),
    "div": lambda x: T.tsum(T.div(Tensor(_W), 3.0 + T.square(x))),
    "sub": lambda x: T.tsum(T.square(Tensor(_W) - x)),
    "lut_matvec_h": lambda x: T.tsum(T.square(T.lower_unit_triangular_matvec(Tensor(np.ones((3, 3))), x))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients_match_finite_differences(name):
    g = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    for _ in range(20):
        data = g.uniform(-2.0, 2.0, (2, 3))
        if name == "relu":
            data = np.where(np.abs(data) < 1e-2, 0.5, data)
        assert T.finite_diff_check(UNARY[name], Tensor(data), 1e-5) < 1e-6


@pytest.mark.parametrize("op", [T.log, T.sqrt])
def test_log_and_sqrt_gradients(op):
    g = np.random.default_rng(0)
    for _ in range(20):
        data = g.uniform(0.2, 3.0, (2, 3))
        assert T.finite_diff_check(lambda x: T.tsum(op(x) * _W), Tensor(data)) < 1e-6


@given(st.integers(1, 5), st.integers(0, 2 ** 31))
def test_lower_unit_triangular_gradient_wrt_factor(D, seed):
    g = np.random.default_rng(seed)
    h = Tensor(g.normal(size=(4, D)))
    w = Tensor(g.normal(size=(4, D)))
    err = T.finite_diff_check(lambda L: T.tsum(T.lower_unit_triangular_matvec(L, h) * w),
                              Tensor(g.normal(size=(D, D))))
    assert err < 1e-6


def test_finite_diff_check_on_quadratic():
    assert T.finite_diff_check(lambda t: T.tsum(T.square(t)), Tensor([1.0, 2.0]), 1e-5) < 1e-8


def test_finite_diff_check_raises_on_non_finite():
    with pytest.raises(NumericError):
        T.finite_diff_check(lambda t: T.tsum(T.log(t)), Tensor([0.0, 1.0]))


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ContractError):
        T.finite_diff_check(lambda t: T.tsum(t), Tensor([1.0]), 0.0)


def test_finite_diff_check_restores_theta():
    theta = Tensor([0.3, -0.7])
    T.finite_diff_check(lambda t: T.tsum(T.exp(t)), theta)
    np.testing.assert_array_equal(theta.data, [0.3, -0.7])


# --- randomness ---------------------------------------------------------------------

def test_standard_normal_moments():
    z = T.sample_standard_normal(Rng(2024), (1_000_000,)).data
    assert abs(z.mean()) < 0.005
    assert abs(z.var() - 1.0) < 0.01


def test_same_seed_same_stream():
    np.testing.assert_array_equal(Rng(7).normal((100,)), Rng(7).normal((100,)))
    assert not np.array_equal(Rng(7).normal((100,)), Rng(8).normal((100,)))


def test_state_round_trip_resumes_stream():
    a = Rng(3)
    a.normal((11,))
    b = Rng.from_state(a.state())
    np.testing.assert_array_equal(a.uniform((5,)), b.uniform((5,)))


def test_spawn_does_not_advance_parent():
    a = Rng(5)
    a.spawn(1).normal((3,))
    np.testing.assert_array_equal(a.uniform((4,)), Rng(5).uniform((4,)))
    assert not np.array_equal(Rng(5).spawn(1).uniform((4,)), Rng(5).spawn(2).uniform((4,)))


@given(st.integers(1, 200), st.integers(0, 2 ** 40))
def test_permutation_is_a_permutation(n, seed):
    np.testing.assert_array_equal(np.sort(Rng(seed).permutation(n)), np.arange(n))


def test_uniform_range():
    u = Rng(1).uniform((10_000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3)))
    assert t.size == math.prod(t.shape)
    with pytest.raises(ContractError):
        t.item()
