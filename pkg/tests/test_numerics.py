import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hseq import numerics as nx
from hseq.numerics import ContractError, NumericError, ShapeError, Tape, Tensor, grad_check


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = t64(np.eye(2))
    b = t64([[1, 2], [3, 4]])
    np.testing.assert_array_equal(nx.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_arithmetic():
    assert nx.matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    w = rng.normal(size=(5, 3))
    assert grad_check(lambda x: nx.sum(nx.mul(nx.matmul(x, t64(b)), t64(w))), a) < 1e-6
    assert grad_check(lambda x: nx.sum(nx.mul(nx.matmul(t64(a), x), t64(w))), b) < 1e-6


def test_batched_matmul_with_2d_weight_gradient():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 4, 3))
    b = rng.normal(size=(3, 5))
    w = rng.normal(size=(2, 4, 5))
    assert grad_check(lambda x: nx.sum(nx.mul(nx.matmul(t64(a), x), t64(w))), b) < 1e-6
    assert grad_check(lambda x: nx.sum(nx.mul(nx.matmul(x, t64(b)), t64(w))), a) < 1e-6


# ---------------------------------------------------------------------------
# softmax_masked
# ---------------------------------------------------------------------------


def test_softmax_equal_scores_full_mask():
    p = nx.softmax_masked(t64(np.zeros((4, 4))), np.ones((4, 4), bool))
    np.testing.assert_allclose(p.data, 0.25, atol=0)


def test_softmax_single_visible_entry():
    mask = np.eye(3, dtype=bool)
    p = nx.softmax_masked(t64(np.random.default_rng(0).normal(size=(3, 3))), mask)
    np.testing.assert_array_equal(p.data, np.eye(3))


def test_softmax_matches_direct_formula():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(6, 6)) * 3
    mask = rng.random((6, 6)) < 0.5
    mask[np.arange(6), np.arange(6)] = True
    # oracle: exponentiate visible entries, normalize by their row sum
    e = np.where(mask, np.exp(s), 0.0)
    expected = e / e.sum(axis=1, keepdims=True)
    got = nx.softmax_masked(t64(s), mask).data
    assert np.max(np.abs(got - expected)) < 1e-6
    assert np.all(got[~mask] == 0.0)


def test_softmax_empty_row_is_contract_violation():
    mask = np.ones((3, 3), bool)
    mask[1] = False
    with pytest.raises(ContractError):
        nx.softmax_masked(t64(np.zeros((3, 3))), mask)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_rows_sum_to_one_masked_exact_zero(dtype):
    rng = np.random.default_rng(3)
    s = Tensor(rng.normal(size=(2, 3, 9, 9)).astype(dtype) * 20)
    mask = rng.random((9, 9)) < 0.4
    mask[np.arange(9), np.arange(9)] = True
    p = nx.softmax_masked(s, mask).data
    assert p.dtype == dtype
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p[..., ~mask] == 0.0)


def test_softmax_gradient():
    rng = np.random.default_rng(4)
    mask = np.tril(np.ones((5, 5), bool))
    w = rng.normal(size=(5, 5))
    assert grad_check(lambda x: nx.sum(nx.mul(nx.softmax_masked(x, mask), t64(w))), rng.normal(size=(5, 5))) < 1e-6


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


def test_grad_check_square_sum():
    x = t64([1.0, 2.0, 3.0], grad=True)
    with Tape() as tape:
        y = nx.sum(nx.mul(x, x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [2, 4, 6])
    assert grad_check(lambda v: nx.sum(nx.mul(v, v)), [1.0, 2.0, 3.0]) < 1e-7


def test_grad_check_constant_function():
    assert grad_check(lambda v: t64(3.0), [1.0, 2.0]) == 0.0


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericError):
        grad_check(lambda v: nx.sum(v), [1.0, np.nan])
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        grad_check(lambda v: nx.sum(nx.log(v)), [-1.0, 1.0])


# ---------------------------------------------------------------------------
# every primitive against central differences
# ---------------------------------------------------------------------------

UNARY = {
    "exp": lambda x: nx.exp(x),
    "sigmoid": nx.sigmoid,
    "silu": nx.silu,
    "sqrt": lambda x: nx.sqrt(nx.add_scalar(nx.mul(x, x), 1.0)),
    "log": lambda x: nx.log(nx.add_scalar(nx.mul(x, x), 0.5)),
    "neg": nx.neg,
    "add_scalar": lambda x: nx.add_scalar(x, 2.5),
    "mul_scalar": lambda x: nx.mul_scalar(x, -1.5),
    "pow_scalar": lambda x: nx.pow_scalar(nx.add_scalar(nx.mul(x, x), 1.0), -0.5),
    "transpose": lambda x: nx.transpose(x),
    "reshape": lambda x: nx.reshape(x, (-1,)),
    "sum_axis": lambda x: nx.sum(x, axis=-1, keepdims=True),
    "mean_axis": lambda x: nx.mean(x, axis=0),
    "slice": lambda x: nx.slice_axis(x, 1, x.shape[1], axis=1),
    "concat": lambda x: nx.concat([x, nx.mul_scalar(x, 2.0)], axis=0),
    "take_rows": lambda x: nx.take(x, [0, x.shape[0] - 1, 0], axis=0),
}


@settings(max_examples=8, deadline=None)
@given(
    name=st.sampled_from(sorted(UNARY)),
    rows=st.integers(2, 32),
    cols=st.integers(2, 32),
    seed=st.integers(0, 2**16),
)
def test_unary_primitives_grad(name, rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, cols))
    f = UNARY[name]
    probe = t64(rng.normal(size=f(t64(x)).shape))
    assert grad_check(lambda v: nx.sum(nx.mul(f(v), probe)), x) < 1e-5


BINARY = {
    "add": nx.add,
    "sub": nx.sub,
    "mul": nx.mul,
    "div": lambda a, b: nx.div(a, nx.add_scalar(nx.mul(b, b), 1.0)),
}


@settings(max_examples=8, deadline=None)
@given(
    name=st.sampled_from(sorted(BINARY)),
    rows=st.integers(1, 32),
    cols=st.integers(1, 32),
    bias=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_binary_primitives_grad(name, rows, cols, bias, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, cols))
    b = rng.normal(size=(cols,) if bias else (rows, cols))
    f = BINARY[name]
    probe = t64(rng.normal(size=(rows, cols)))
    assert grad_check(lambda v: nx.sum(nx.mul(f(v, t64(b)), probe)), a) < 1e-5
    assert grad_check(lambda v: nx.sum(nx.mul(f(t64(a), v), probe)), b) < 1e-5


def test_embedding_and_cross_entropy_grad():
    rng = np.random.default_rng(5)
    table = rng.normal(size=(7, 4))
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    probe = t64(rng.normal(size=(2, 3, 4)))
    assert grad_check(lambda v: nx.sum(nx.mul(nx.embedding(v, ids), probe)), table) < 1e-6
    logits = rng.normal(size=(5, 7))
    targets = np.array([0, 6, 2, 2, 5])
    assert grad_check(lambda v: nx.cross_entropy(v, targets), logits) < 1e-6


def test_cross_entropy_value():
    logits = np.log(np.array([[0.25, 0.75], [0.5, 0.5]]))
    ce = nx.cross_entropy(t64(logits), [1, 0]).data
    assert ce == pytest.approx(-(np.log(0.75) + np.log(0.5)) / 2)


def test_take_with_repeats_accumulates():
    x = t64(np.arange(6.0).reshape(3, 2), grad=True)
    with Tape() as tape:
        y = nx.sum(nx.take(x, [1, 1, 2], axis=0))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[0, 0], [2, 2], [1, 1]])


def test_no_recording_outside_tape():
    x = t64([1.0], grad=True)
    y = nx.mul(x, x)
    assert not y.requires_grad


def test_backward_visits_nodes_in_reverse_order():
    order = []
    x = t64([1.0, 2.0], grad=True)
    with Tape() as tape:
        a = nx.mul_scalar(x, 2.0)
        b = nx.exp(a)
        c = nx.sum(b)
    assert [n.out for n in tape.nodes] == [a, b, c]
    for node in tape.nodes:
        fn = node.backward
        node.backward = lambda g, fn=fn, node=node: (order.append(node.out), fn(g))[1]
    tape.backward(c)
    assert order == [c, b, a]


def test_backward_is_deterministic():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(16, 8)).astype(np.float32)
    x = rng.normal(size=(4, 16)).astype(np.float32)

    def run():
        p = Tensor(w.copy(), requires_grad=True)
        with Tape() as tape:
            loss = nx.mean(nx.silu(nx.matmul(Tensor(x), p)))
        tape.backward(loss)
        return p.grad

    assert run().tobytes() == run().tobytes()


def test_precision_is_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    assert nx.add(x, 1.0).dtype == np.float32
    assert nx.mul(2.0, x).dtype == np.float32
    assert (x @ np.ones((2, 2))).dtype == np.float32
