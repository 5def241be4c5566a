import numpy as np
import pytest

from xrec import numerics as nx


def test_matmul_identity():
    out = nx.matmul(nx.constant([[1, 2], [3, 4]]), nx.constant([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetric():
    np.testing.assert_allclose(nx.softmax(nx.constant([0.0, 0.0])).data, [0.5, 0.5])


def test_cross_entropy_two_way_tie():
    loss = nx.cross_entropy(nx.constant([[0.0, 0.0]]), np.array([0]))
    assert loss.item() == pytest.approx(np.log(2))


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown op_kind"):
        nx.record("conv2d", nx.constant([1.0]))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(nx.ShapeError) as err:
        nx.matmul(nx.constant(np.ones((2, 3))), nx.constant(np.ones((2, 3))))
    msg = str(err.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_requires_grad_propagates():
    a = nx.parameter([1.0, 2.0])
    b = nx.constant([3.0, 4.0])
    assert nx.add(a, b).requires_grad
    assert not nx.add(b, b).requires_grad


def test_tape_records_only_when_active():
    x = nx.parameter([1.0])
    with nx.Tape() as tape:
        nx.add(x, x)
        nx.scale(x, 2.0)
    nx.add(x, x)
    assert len(tape) == 2


def test_backward_sum_is_ones():
    x = nx.parameter([1.0, -2.0, 3.0])
    with nx.Tape() as tape:
        loss = nx.total(x)
    nx.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [1, 1, 1])


def test_backward_square():
    x = nx.parameter([2.0])
    with nx.Tape() as tape:
        loss = nx.total(nx.multiply(x, x))
    nx.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [4.0])


def test_frozen_leaf_gets_no_grad():
    w = nx.constant([1.0, 2.0])
    x = nx.parameter([3.0, 4.0])
    with nx.Tape() as tape:
        loss = nx.total(nx.multiply(w, x))
    nx.backward(loss, tape)
    assert w.grad is None
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_gradients_accumulate_over_uses():
    x = nx.parameter([1.5])
    with nx.Tape() as tape:
        y = nx.add(nx.scale(x, 3.0), nx.multiply(x, x))
        loss = nx.total(y)
    nx.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [3.0 + 2 * 1.5])


def test_backward_requires_scalar_on_tape():
    x = nx.parameter([1.0, 2.0])
    with nx.Tape() as tape:
        y = nx.scale(x, 2.0)
    with pytest.raises(nx.ShapeError):
        nx.backward(y, tape)
    with nx.Tape() as other:
        loss = nx.total(x)
    with pytest.raises(ValueError):
        nx.backward(loss, tape)
    nx.backward(loss, other)


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        nx.log(nx.constant([1.0, 0.0]))


def test_grad_check_examples():
    assert nx.grad_check(lambda x: nx.total(nx.multiply(x, x)), [1.0, 2.0, 3.0]) <= 1e-4
    assert nx.grad_check(lambda x: nx.total(nx.constant([5.0])), [1.0, 2.0]) == 0.0
    rng = np.random.default_rng(3)
    softmax_then_ce = lambda x: nx.cross_entropy(nx.concat_rows([nx.log(nx.softmax(x))]), np.array([2]))
    assert nx.grad_check(softmax_then_ce, rng.normal(size=8)) <= 1e-4


def test_grad_check_rejects_vector_output():
    with pytest.raises(nx.ShapeError):
        nx.grad_check(lambda x: nx.scale(x, 2.0), [1.0, 2.0])


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    one = nx.softmax(nx.matmul(nx.constant(a), nx.constant(b))).data
    two = nx.softmax(nx.matmul(nx.constant(a), nx.constant(b))).data
    assert np.array_equal(one, two)


def test_suffix_broadcast_bias():
    x = nx.parameter(np.ones((2, 3, 4)))
    b = nx.parameter(np.arange(4.0))
    with nx.Tape() as tape:
        loss = nx.total(nx.add(x, b))
    nx.backward(loss, tape)
    np.testing.assert_allclose(b.grad, np.full(4, 6.0))
    with pytest.raises(nx.ShapeError):
        nx.add(nx.constant(np.ones((2, 3))), nx.constant(np.ones(2)))


def test_decoupled_sgd_without_decay_is_plain_descent():
    p = nx.parameter([1.0, -2.0])
    p.grad = np.array([0.5, 0.25])
    nx.DecoupledSGD([p], lr=0.1, weight_decay=0.0).step()
    expected = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, 0.25])
    assert np.array_equal(p.data, expected)


def test_decoupled_sgd_decay():
    p = nx.parameter([2.0])
    p.grad = np.array([0.0])
    nx.DecoupledSGD([p], lr=0.5, weight_decay=0.1).step()
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)


def test_adam_moves_toward_minimum():
    p = nx.parameter([3.0])
    opt = nx.Adam([p], lr=0.1)
    for _ in range(200):
        with nx.Tape() as tape:
            loss = nx.total(nx.multiply(p, p))
        opt.zero_grad()
        nx.backward(loss, tape)
        opt.step()
    assert abs(p.data[0]) < 0.1


from gradcases import ALL_CASES, OP_CASES, worst_error  # noqa: E402


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_gradient_matches_central_differences(name):
    assert worst_error(name) <= 1e-4


def test_every_op_kind_has_a_gradient_case():
    covered = {n.split("[")[0] for n in OP_CASES} | {"relu-or-gelu"} - {"gelu", "relu"}
    assert set(nx.OP_KINDS) <= covered
