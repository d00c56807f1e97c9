import numpy as np
import pytest

from vfxdiff import numerics as nm


def test_matmul_identity():
    x = np.array([[2.0, 3.0, 4.0], [5.0, 6.0, 7.0]])
    out = nm.matmul(nm.constant(np.eye(2)), nm.constant(x))
    assert np.array_equal(out.data, x)


def test_matmul_hand_example():
    a = nm.constant([[1.0, 2.0], [3.0, 4.0]])
    b = nm.constant([[5.0], [6.0]])
    assert np.array_equal(nm.matmul(a, b).data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nm.matmul(nm.constant(np.zeros((2, 3))), nm.constant(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = nm.parameter(rng.normal(size=(3, 4)))
    b = nm.parameter(rng.normal(size=(4, 2)))
    ones = nm.constant(np.ones((3, 2)))
    # sum(A @ B) via mse against zero is awkward; use explicit sum through matmul with ones
    def f():
        prod = nm.matmul(a, b)
        total = nm.matmul(nm.matmul(nm.constant(np.ones((1, 3))), prod), nm.constant(np.ones((2, 1))))
        return total

    assert nm.finite_diff_check(f, [a, b]) <= 1e-6


def test_masked_softmax_symmetric_row():
    out = nm.masked_softmax_rows(nm.constant([[0.0, 0.0]]), np.zeros((1, 2)))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_masked_softmax_blocked_entry_exact_zero():
    out = nm.masked_softmax_rows(nm.constant([[3.0, 100.0]]), np.array([[0.0, -np.inf]]))
    assert out.data[0, 0] == 1.0
    assert out.data[0, 1] == 0.0


def test_masked_softmax_scalar_oracle():
    out = nm.masked_softmax_rows(nm.constant([[1.0, 2.0, 3.0]]), np.zeros((1, 3)))
    assert np.allclose(out.data, [[0.09003, 0.24473, 0.66524]], atol=1e-5)


def test_masked_softmax_fully_masked_row_fails():
    mask = np.array([[0.0, 0.0], [-np.inf, -np.inf]])
    with pytest.raises(ValueError, match="no attendable positions"):
        nm.masked_softmax_rows(nm.constant(np.zeros((2, 2))), mask)


def test_masked_softmax_rejects_other_mask_values():
    with pytest.raises(ValueError, match="0 or -inf"):
        nm.masked_softmax_rows(nm.constant(np.zeros((1, 2))), np.array([[0.0, -1.0]]))


def test_gelu_at_zero_and_asymptote():
    out = nm.gelu(nm.constant([[0.0, 10.0]]))
    assert out.data[0, 0] == 0.0
    assert abs(out.data[0, 1] - 10.0) <= 1e-3


def test_gelu_gradient_at_half():
    x = nm.parameter([[0.5]])
    err = nm.finite_diff_check(lambda: nm.gelu(x), [x])
    assert err <= 1e-6


def test_mse_examples():
    assert nm.mse(nm.constant([[1.0, 2.0]]), nm.constant([[1.0, 2.0]])).item() == 0.0
    assert nm.mse(nm.constant([[0.0, 0.0]]), nm.constant([[1.0, 3.0]])).item() == 5.0


def test_mse_gradient():
    rng = np.random.default_rng(1)
    p = nm.parameter(rng.normal(size=(3, 3)))
    t = nm.constant(rng.normal(size=(3, 3)))
    assert nm.finite_diff_check(lambda: nm.mse(p, t), [p], h=1e-5) <= 1e-8


def test_finite_diff_square_at_three():
    x = nm.parameter([[3.0]])
    err = nm.finite_diff_check(lambda: nm.emul(x, x), [x], h=1e-5)
    assert err <= 1e-9
    assert x.grad.item() == pytest.approx(6.0, abs=1e-12)


def test_finite_diff_rejects_nonfinite_forward():
    x = nm.parameter([[np.inf]])
    with pytest.raises(ValueError, match="non-finite"):
        nm.finite_diff_check(lambda: nm.emul(x, x), [x])


def test_backward_requires_scalar_root():
    with pytest.raises(ValueError, match="scalar"):
        nm.backward(nm.parameter(np.zeros((2, 2))))


def test_gradients_accumulate_through_shared_nodes():
    x = nm.parameter([[1.5]])
    y = nm.add(nm.emul(x, x), nm.emul(x, x))  # 2x^2 -> dy/dx = 4x
    nm.backward(y)
    assert x.grad.item() == pytest.approx(6.0)


def test_masked_attention_layer_gradcheck():
    rng = np.random.default_rng(7)
    q = nm.parameter(rng.normal(size=(4, 3)))
    k = nm.parameter(rng.normal(size=(4, 3)))
    v = nm.parameter(rng.normal(size=(4, 3)))
    mask = np.zeros((4, 4))
    mask[0, 2] = mask[2, 0] = -np.inf
    target = nm.constant(rng.normal(size=(4, 3)))

    def f():
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / np.sqrt(3.0))
        probs = nm.masked_softmax_rows(scores, mask)
        return nm.mse(nm.matmul(probs, v), target)

    assert nm.finite_diff_check(f, [q, k, v]) <= 1e-4


def _random_graph_case(op_name, rng):
    """Scalar-valued graph exercising one op on random inputs; returns (f, params)."""
    def wrap(node):
        rows = nm.constant(rng.normal(size=(1, node.shape[0])))
        cols = nm.constant(rng.normal(size=(node.shape[1], 1)))
        return lambda: nm.matmul(nm.matmul(rows, node_fn()), cols)

    if op_name == "matmul":
        a = nm.parameter(rng.normal(size=(3, 4)))
        b = nm.parameter(rng.normal(size=(4, 2)))
        node_fn = lambda: nm.matmul(a, b)
        return wrap(node_fn()), [a, b]
    if op_name == "add":
        a = nm.parameter(rng.normal(size=(3, 3)))
        b = nm.parameter(rng.normal(size=(3, 3)))
        node_fn = lambda: nm.add(a, b)
        return wrap(node_fn()), [a, b]
    if op_name == "add_bias":
        a = nm.parameter(rng.normal(size=(4, 3)))
        b = nm.parameter(rng.normal(size=(1, 3)))
        node_fn = lambda: nm.add_bias(a, b)
        return wrap(node_fn()), [a, b]
    if op_name == "scale":
        a = nm.parameter(rng.normal(size=(3, 3)))
        c = float(rng.normal())
        node_fn = lambda: nm.scale(a, c)
        return wrap(node_fn()), [a]
    if op_name == "emul":
        a = nm.parameter(rng.normal(size=(3, 3)))
        b = nm.parameter(rng.normal(size=(3, 3)))
        node_fn = lambda: nm.emul(a, b)
        return wrap(node_fn()), [a, b]
    if op_name == "mul_const":
        a = nm.parameter(rng.normal(size=(3, 3)))
        arr = rng.normal(size=(3, 3))
        node_fn = lambda: nm.mul_const(a, arr)
        return wrap(node_fn()), [a]
    if op_name == "scale_rows":
        a = nm.parameter(rng.normal(size=(3, 4)))
        col = nm.parameter(rng.normal(size=(3, 1)))
        node_fn = lambda: nm.scale_rows(a, col)
        return wrap(node_fn()), [a, col]
    if op_name == "transpose":
        a = nm.parameter(rng.normal(size=(3, 4)))
        node_fn = lambda: nm.transpose(a)
        return wrap(node_fn()), [a]
    if op_name == "masked_softmax_rows":
        a = nm.parameter(rng.normal(size=(3, 4)))
        mask = np.where(rng.random((3, 4)) < 0.3, -np.inf, 0.0)
        mask[:, 0] = 0.0  # keep every row attendable
        node_fn = lambda: nm.masked_softmax_rows(a, mask)
        return wrap(node_fn()), [a]
    if op_name == "gelu":
        a = nm.parameter(rng.normal(size=(3, 3)))
        node_fn = lambda: nm.gelu(a)
        return wrap(node_fn()), [a]
    if op_name == "rmsnorm_rows":
        a = nm.parameter(rng.normal(size=(3, 4)) + 0.5)
        node_fn = lambda: nm.rmsnorm_rows(a)
        return wrap(node_fn()), [a]
    if op_name == "slice_rows":
        a = nm.parameter(rng.normal(size=(4, 3)))
        node_fn = lambda: nm.slice_rows(a, 1, 3)
        return wrap(node_fn()), [a]
    if op_name == "slice_cols":
        a = nm.parameter(rng.normal(size=(3, 5)))
        node_fn = lambda: nm.slice_cols(a, 2, 4)
        return wrap(node_fn()), [a]
    if op_name == "concat_rows":
        a = nm.parameter(rng.normal(size=(2, 3)))
        b = nm.parameter(rng.normal(size=(3, 3)))
        node_fn = lambda: nm.concat_rows([a, b])
        return wrap(node_fn()), [a, b]
    if op_name == "concat_cols":
        a = nm.parameter(rng.normal(size=(3, 2)))
        b = nm.parameter(rng.normal(size=(3, 3)))
        node_fn = lambda: nm.concat_cols([a, b])
        return wrap(node_fn()), [a, b]
    if op_name == "embed_rows":
        table = nm.parameter(rng.normal(size=(5, 3)))
        ids = rng.integers(0, 5, size=4)
        node_fn = lambda: nm.embed_rows(table, ids)
        return wrap(node_fn()), [table]
    if op_name == "permute_flat":
        a = nm.parameter(rng.normal(size=(3, 4)))
        perm = rng.permutation(12)
        node_fn = lambda: nm.permute_flat(a, perm, (4, 3))
        return wrap(node_fn()), [a]
    if op_name == "mse":
        a = nm.parameter(rng.normal(size=(3, 3)))
        t = nm.constant(rng.normal(size=(3, 3)))
        return (lambda: nm.mse(a, t)), [a]
    raise AssertionError(op_name)


ALL_OPS = (
    "matmul", "add", "add_bias", "scale", "emul", "mul_const", "scale_rows", "transpose",
    "masked_softmax_rows", "gelu", "rmsnorm_rows", "slice_rows", "slice_cols",
    "concat_rows", "concat_cols", "embed_rows", "permute_flat", "mse",
)


@pytest.mark.parametrize("op_name", ALL_OPS)
def test_every_primitive_op_gradcheck_100_trials(op_name):
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        f, params = _random_graph_case(op_name, rng)
        assert nm.finite_diff_check(f, params, h=1e-5) <= 1e-4, f"{op_name} trial {trial}"


def test_masked_softmax_rows_sum_to_one_and_blocked_zero():
    rng = np.random.default_rng(5)
    for _ in range(50):
        scores = nm.constant(rng.normal(size=(6, 6)) * 5)
        mask = np.where(rng.random((6, 6)) < 0.4, -np.inf, 0.0)
        mask[:, 0] = 0.0
        out = nm.masked_softmax_rows(scores, mask).data
        assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-12
        assert np.all(out[np.isneginf(mask)] == 0.0)


def test_matmul_associativity_on_random_triples():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b, c = (rng.normal(size=(8, 8)) for _ in range(3))
        left = (a @ b) @ c
        right = a @ (b @ c)
        assert np.abs(left - right).max() <= 1e-9
