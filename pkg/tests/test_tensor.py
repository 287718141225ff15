import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from grc import tensor as T
from grc.errors import DimensionError, NumericError, TapeError
from grc.oracle import finite_diff_grad, relative_error
from grc.tensor import Tape, Tensor


def check_op_grad(op, *shapes, seed=0, positive=False):
    """Compare tape gradients of sum(op(*xs) * R) against central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = op(*[Tensor(x) for x in xs]).shape
    weights = rng.standard_normal(out_shape)

    def loss_of(arrays):
        return float((op(*[Tensor(a) for a in arrays]).data * weights).sum())

    params = [Tensor(x.copy(), requires_grad=True) for x in xs]
    with Tape() as tape:
        loss = T.sum_(op(*params) * Tensor(weights))
    tape.backward(loss)
    for i, p in enumerate(params):
        def f(theta, i=i):
            arrays = [x.copy() for x in xs]
            arrays[i] = theta
            return loss_of(arrays)
        num = finite_diff_grad(f, xs[i].copy())
        err = relative_error(p.grad, num).max()
        assert err < 1e-5, f"input {i}: relative error {err:.3e}"


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)


def test_matmul_row_by_column():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs((Tensor(a) @ Tensor(b)).data - ref).max() < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((3, 2)))


def test_matmul_batch_broadcast_grad():
    check_op_grad(lambda a, b: a @ b, (2, 3, 4), (4, 2))
    check_op_grad(lambda a, b: a @ b, (3, 4), (2, 4, 5))


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_stay_finite():
    y = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_formula():
    x = np.array([1.0, 2.0, 3.0])
    e = np.exp(x - x.max())
    np.testing.assert_allclose(T.softmax_lastdim(Tensor(x)).data, e / e.sum(), rtol=0, atol=1e-15)


def test_softmax_empty_last_dim():
    with pytest.raises(DimensionError):
        T.softmax_lastdim(Tensor(np.zeros((2, 0))))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
                  elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax_lastdim(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


# -- sigmoid ---------------------------------------------------------------

def test_sigmoid_zero_is_half():
    assert T.sigmoid(Tensor(0.0)).data == 0.5


def test_sigmoid_saturates():
    assert T.sigmoid(Tensor(30.0)).data > 1 - 1e-9


def test_sigmoid_matches_formula():
    assert abs(T.sigmoid(Tensor(1.5)).data - 1 / (1 + math.exp(-1.5))) < 1e-15


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_sigmoid_open_interval(x):
    y = T.sigmoid(Tensor(x)).data
    assert np.all((y > 0) & (y < 1))


# -- concat ----------------------------------------------------------------

def test_concat_scalars():
    assert T.concat_channels(Tensor([[1.0]]), Tensor([[2.0]])).data.tolist() == [[1.0, 2.0]]


def test_concat_with_empty_channels():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.concat_channels(x, Tensor(np.zeros((2, 0)))).data, x.data)


def test_concat_slices_back():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    y = T.concat_channels(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(y[:, :3], a)
    np.testing.assert_array_equal(y[:, 3:], b)


def test_concat_leading_mismatch():
    with pytest.raises(DimensionError):
        T.concat_channels(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


# -- gradients of every op ---------------------------------------------------

OP_CASES = [
    ("add", lambda a, b: a + b, [(2, 3), (2, 3)]),
    ("add_lead", lambda a, b: a + b, [(2, 3), (3,)]),
    ("sub", lambda a, b: a - b, [(4, 2, 3), (2, 3)]),
    ("mul", lambda a, b: a * b, [(2, 3), (2, 3)]),
    ("scalar", lambda a: 3.0 * a - 1.5, [(3,)]),
    ("sigmoid", T.sigmoid, [(2, 5)]),
    ("gelu", T.gelu, [(2, 5)]),
    ("matmul", lambda a, b: a @ b, [(2, 3), (3, 4)]),
    ("transpose", lambda a: a.transpose_last(), [(2, 3, 4)]),
    ("reshape", lambda a: a.reshape(3, 8), [(2, 3, 4)]),
    ("permute", lambda a: a.permute(1, 0, 2), [(2, 3, 4)]),
    ("expand", lambda a: T.expand(a, (3,)), [(2, 4)]),
    ("concat", T.concat_channels, [(2, 3), (2, 2)]),
    ("slice", lambda a: T.slice_last(a, 1, 3), [(2, 4)]),
    ("sum_axis", lambda a: a.sum(axis=1), [(2, 3, 4)]),
    ("mean_axis", lambda a: a.mean(axis=0), [(3, 4)]),
    ("mean_all", lambda a: a.mean(), [(3, 4)]),
    ("softmax", T.softmax_lastdim, [(3, 5)]),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(2, 3, 6), (6,), (6,)]),
]


@pytest.mark.parametrize("name,op,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradient_matches_finite_differences(name, op, shapes):
    check_op_grad(op, *shapes)


def test_embedding_grad_accumulates_repeated_ids():
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal((5, 3))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    check_op_grad(lambda w: T.embedding(w, ids), (5, 3))
    w = Tensor(w0, requires_grad=True)
    with Tape() as tape:
        loss = T.embedding(w, ids).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad[:, 0], [2, 1, 2, 0, 1])


def test_cross_entropy_value_and_grad():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0], [3.0, -1.0, 0.0]])
    targets = np.array([1, -1, 0])
    ce = T.cross_entropy(Tensor(logits), targets).data
    ref = -np.mean([logits[i, t] - np.log(np.exp(logits[i]).sum()) for i, t in ((0, 1), (2, 0))])
    assert abs(ce - ref) < 1e-14
    check_op_grad(lambda z: T.cross_entropy(z, targets), (3, 3))


def test_cross_entropy_all_ignored():
    with pytest.raises(DimensionError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, -1]))


def test_dropout_training_and_eval():
    x = Tensor(np.ones((100, 100)))
    assert T.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    y = T.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_broadcast_is_leading_only():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 1)))


# -- tape --------------------------------------------------------------------

def test_backward_visits_in_reverse_order():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    with Tape() as tape:
        y = T.sigmoid(x)
        z = y * y
        loss = z.sum()
    trace = []
    tape.backward(loss, trace=trace)
    assert trace == ["sum", "mul", "sigmoid"]


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_gradients_accumulate_across_tapes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_replay_is_bit_identical():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    grads = []
    for _ in range(2):
        pa = Tensor(a, requires_grad=True)
        with Tape() as tape:
            loss = T.softmax_lastdim(T.gelu(pa @ Tensor(b))).mean()
        tape.backward(loss)
        grads.append((loss.data.copy(), pa.grad.copy()))
    assert grads[0][0].tobytes() == grads[1][0].tobytes()
    assert grads[0][1].tobytes() == grads[1][1].tobytes()


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    assert y._tape is None


def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            Tensor(np.array([1e308])) * 10.0
    finally:
        T.set_debug(False)


def test_float32_precision_is_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.gelu(x @ x).sum()
    tape.backward(loss)
    assert loss.dtype == np.float32 and x.grad.dtype == np.float32
