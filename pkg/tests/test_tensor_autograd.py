"""Tests for tensor_autograd: forward values, tape semantics and gradients."""

import math

import numpy as np
import pytest

from tensor_autograd import (
    BackwardError,
    MaskError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    cross_entropy,
    exp,
    gelu,
    getitem,
    grad_check,
    grad_check_many,
    layernorm,
    log,
    matmul,
    relu,
    rmsnorm,
    silu,
    softmax_lastdim,
    swap_last,
    transpose,
)

NEG_INF = -np.inf


def _rand(shape, seed=0):
    return np.random.default_rng(seed).uniform(-2.0, 2.0, size=shape)


# --- scalars ---

def test_item_of_one_element_tensor():
    assert Tensor(np.array([[2.5]])).item() == 2.5
    assert Tensor(np.float64(-1.0)).item() == -1.0


@pytest.mark.parametrize("shape", [(2,), (0,), (2, 3)])
def test_item_of_larger_tensor_is_a_shape_error(shape):
    with pytest.raises(ShapeError, match="one-element"):
        Tensor(np.zeros(shape)).item()


# --- matmul ---

def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_small_product():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_zero_annihilates():
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(_rand((3, 4))))
    assert out.shape == (2, 4)
    assert not out.data.any()


def test_matmul_batch_broadcast():
    a = Tensor(_rand((5, 2, 3)))
    b = Tensor(_rand((3, 4), seed=1))
    assert matmul(a, b).shape == (5, 2, 4)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


# --- softmax ---

def test_softmax_uniform():
    out = softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_closed_form():
    out = softmax_lastdim(Tensor([0.0, math.log(2.0)], precision="double"))
    np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], rtol=1e-12)


def test_softmax_single_survivor_is_exact():
    out = softmax_lastdim(Tensor([5.0, 9.0]), np.array([0.0, NEG_INF]))
    assert out.data[0] == 1.0
    assert out.data[1] == 0.0


def test_softmax_rows_sum_to_one():
    out = softmax_lastdim(Tensor(_rand((6, 11)) * 10))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-6)


def test_softmax_all_masked_row_rejected():
    with pytest.raises(MaskError):
        softmax_lastdim(Tensor([1.0, 2.0]), np.array([NEG_INF, NEG_INF]))


def test_softmax_mask_values_validated():
    with pytest.raises(MaskError):
        softmax_lastdim(Tensor([1.0, 2.0]), np.array([0.0, -1.0]))


def test_softmax_mask_must_broadcast():
    with pytest.raises(ShapeError):
        softmax_lastdim(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))


# --- activations and norms ---

def test_activation_values():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert silu(Tensor([0.0])).data[0] == 0.0
    assert silu(Tensor([1.0], precision="double")).data[0] == pytest.approx(0.731059, abs=1e-6)


def test_layernorm_constant_vector_is_zero():
    out = layernorm(Tensor([3.0, 3.0, 3.0, 3.0]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-6)


def test_layernorm_zero_weight_gives_bias():
    bias = np.array([0.5, -1.0, 2.0])
    out = layernorm(Tensor(_rand((4, 3))), Tensor(np.zeros(3)), Tensor(bias))
    np.testing.assert_allclose(out.data, np.broadcast_to(bias, (4, 3)), rtol=1e-6)


def test_rmsnorm_known_values():
    out = rmsnorm(Tensor([3.0, 4.0], precision="double"), Tensor(np.ones(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [0.848528, 1.131371], atol=1e-6)


def test_norm_parameter_shape_checked():
    with pytest.raises(ShapeError):
        rmsnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


# --- cross entropy ---

def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((3, 4)), precision="double"), [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-6)


def test_cross_entropy_confident_logit():
    loss = cross_entropy(Tensor([[10.0, -10.0]], precision="double"), [0])
    assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_scaled_one_hot_goes_to_zero():
    one_hot = np.eye(3)
    losses = [cross_entropy(Tensor(one_hot * s, precision="double"), [0, 1, 2]).item() for s in (1, 10, 100)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-30


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# --- tape and backward ---

def test_backward_sum_gives_ones():
    w = Tensor(_rand((3, 2)), requires_grad=True)
    with Tape():
        backward(w.sum())
    np.testing.assert_array_equal(w.grad, np.ones((3, 2)))


def test_backward_quadratic():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = (w * w).sum()
        backward(loss)
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_accumulates_two_consumers():
    data = _rand((4,))
    shared = Tensor(data, requires_grad=True, precision="double")
    with Tape():
        backward((exp(shared) + shared * shared).sum())

    first = Tensor(data, requires_grad=True, precision="double")
    second = Tensor(data, requires_grad=True, precision="double")
    with Tape():
        backward(exp(first).sum())
    with Tape():
        backward((second * second).sum())
    np.testing.assert_allclose(shared.grad, first.grad + second.grad, rtol=1e-12)


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        out = w * 2.0
        with pytest.raises(BackwardError):
            backward(out)


def test_backward_needs_tape():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(BackwardError):
        backward(w.sum())


def test_inference_mode_records_nothing():
    w = Tensor([1.0, 2.0], requires_grad=True)
    out = (w * w).sum()
    assert out.node_id is None


def test_tape_skips_constant_subgraphs():
    frozen = Tensor([1.0, 2.0])
    with Tape() as tape:
        frozen * 3.0
    assert len(tape) == 0


def test_record_all_reaches_interior_activation():
    x = Tensor(np.array([1.0, -2.0, 3.0]), precision="double")
    with Tape(record_all=True):
        hidden = x * 2.0
        loss = relu(hidden).sum()
        backward(loss, retain=[hidden])
    np.testing.assert_array_equal(hidden.grad, [1.0, 0.0, 1.0])
    assert x.grad is None


def test_node_ids_follow_record_order():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        a = w * 2.0
        b = a + 1.0
    assert (a.node_id, b.node_id) == (0, 1)
    assert len(tape) == 2


# --- gradient checks ---

def test_grad_check_square():
    report = grad_check(lambda x: (x * x).sum(), _rand((3, 3)), h=1e-4)
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_grad_check_constant_function():
    report = grad_check(lambda x: Tensor(np.array(3.0), precision="double"), _rand((2,)))
    assert report.max_rel_error == 0.0


def test_grad_check_cross_entropy_of_linear_map():
    weight = _rand((4, 3), seed=3)
    labels = np.array([0, 2, 1, 2, 0])
    report = grad_check(lambda x: cross_entropy(x @ Tensor(weight, precision="double"), labels),
                        _rand((5, 4), seed=4), tol=1e-5)
    assert report.passed, report


@pytest.mark.parametrize("name, fn", [
    ("exp", lambda x: exp(x).sum()),
    ("log", lambda x: log(x * x + 1.0).sum()),
    ("gelu", lambda x: gelu(x).sum()),
    ("silu", lambda x: silu(x).sum()),
    ("div", lambda x: (1.0 / (x * x + 0.5)).sum()),
    ("softmax", lambda x: (softmax_lastdim(x) * Tensor(_rand((3, 4), seed=9))).sum()),
    ("masked_softmax", lambda x: (softmax_lastdim(x, np.array([0.0, NEG_INF, 0.0, 0.0]))
                                  * Tensor(_rand((3, 4), seed=9))).sum()),
    ("transpose", lambda x: (transpose(x, (1, 0)) @ Tensor(_rand((3, 2), seed=5))).sum()),
    ("swap_last", lambda x: (swap_last(x) * swap_last(x)).mean()),
    ("getitem", lambda x: (getitem(x, (slice(None), [0, 0, 2])) * Tensor(_rand((3, 3), seed=8))).sum()),
    ("concat", lambda x: (concat([x, x * 2.0], axis=0) * Tensor(_rand((6, 4), seed=6))).sum()),
    ("mean_axis", lambda x: (x.mean(axis=0) * Tensor([1.0, -2.0, 3.0, 0.5])).sum()),
    ("reshape", lambda x: (x.reshape(2, 6) @ Tensor(_rand((6, 1), seed=7))).sum()),
])
def test_grad_check_ops(name, fn):
    report = grad_check(fn, _rand((3, 4), seed=2))
    assert report.passed, f"{name}: {report.max_rel_error}"


def test_grad_check_norms_with_parameters():
    x = Tensor(_rand((3, 5)), requires_grad=True, precision="double")
    w = Tensor(_rand((5,), seed=1), requires_grad=True, precision="double")
    b = Tensor(_rand((5,), seed=2), requires_grad=True, precision="double")
    proj = Tensor(_rand((3, 5), seed=3), precision="double")
    report = grad_check_many(lambda: (layernorm(x, w, b) * proj).sum() + (rmsnorm(x, w) * proj).sum(),
                             {"x": x, "w": w, "b": b})
    assert report.passed, report.per_tensor


def test_grad_check_many_needs_double():
    x = Tensor(_rand((2,)), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check_many(lambda: x.sum(), {"x": x})
