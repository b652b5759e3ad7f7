import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from toalign import autodiff as ad
from toalign.autodiff import ConfigError, ContractError, DimensionError, Tensor
from toalign.gradcheck import numerical_grad, rel_error


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def fd_check(build, inputs, step=1e-5):
    for t in inputs:
        t.grad = None
    ad.backward(build())
    return max(rel_error(t.grad, numerical_grad(lambda: build().item(), t.data, step)) for t in inputs)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# matmul


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_times_column():
    assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    assert fd_check(lambda: ad.sum_all(ad.matmul(a, b)), [a, b]) < 1e-6


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 4)))
    g = rng.normal(size=(2, 4))
    ad.backward(ad.sum_all(ad.hadamard(ad.matmul(a, b), Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


# conv2d


def test_conv_zero_kernels():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5)))
    assert np.all(ad.conv2d(x, Tensor(np.zeros((3, 2, 3, 3)))).data == 0)


def test_conv_delta_kernel_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 6, 7)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(x, Tensor(k)).data, x.data)


def test_conv_matches_direct_cross_correlation():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(2, 4, 5)), rng.normal(size=(3, 2, 3, 3))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * k[o])
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(k)).data, ref, atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(3, 2, 4, 4)), Tensor(rng.normal(size=(2, 2, 3, 3)))
    batched = ad.conv2d(Tensor(x), k).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], ad.conv2d(Tensor(x[n]), k).data, atol=1e-13)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_gradient_matches_fd():
    rng = np.random.default_rng(4)
    x, k = leaf(rng.normal(size=(2, 5, 4))), leaf(rng.normal(size=(3, 2, 3, 3)))
    proj = Tensor(rng.normal(size=(3, 5, 4)))
    assert fd_check(lambda: ad.sum_all(ad.hadamard(ad.conv2d(x, k), proj)), [x, k]) < 1e-5


def test_im2col_row_order():
    x = Tensor(np.arange(2 * 3 * 3, dtype=float).reshape(1, 2, 3, 3))
    cols = ad.im2col(x).data
    assert cols.shape == (18, 9)
    # row (c=1, dy=1, dx=1) is channel 1 itself
    np.testing.assert_array_equal(cols[9 + 4], x.data[0, 1].ravel())


# relu


def test_relu_sign_cases():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


@given(arrays(np.float64, 6, elements=st.floats(0, 100)))
def test_relu_identity_on_nonnegative(x):
    np.testing.assert_array_equal(ad.relu(Tensor(x)).data, x)


def test_relu_subgradient_at_zero():
    x = leaf([0.0, 1.0, -1.0])
    ad.backward(ad.sum_all(ad.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_relu_gradient_away_from_kinks():
    x = leaf(np.array([-2.0, -0.5, 0.01, 0.3, 4.0]))
    assert fd_check(lambda: ad.sum_all(ad.relu(x)), [x], step=1e-4) < 1e-6


# dropout


def test_dropout_rate_zero_identity_both_modes():
    x = Tensor(np.arange(5.0))
    for train in (True, False):
        np.testing.assert_array_equal(ad.dropout(x, 0.0, train, np.random.default_rng(0)).data, x.data)


@pytest.mark.parametrize("rate", [0.0, 0.1, 0.5, 0.9])
def test_dropout_eval_identity(rate):
    x = Tensor(np.linspace(-1, 1, 7))
    np.testing.assert_array_equal(ad.dropout(x, rate, False).data, x.data)


def test_dropout_monte_carlo_keep_fraction_and_mean():
    out = ad.dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(0)).data
    assert abs(np.mean(out != 0) - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.02


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_bad_rate(rate):
    with pytest.raises(ConfigError):
        ad.dropout(Tensor([1.0]), rate, True, np.random.default_rng(0))


def test_dropout_gradient_follows_mask():
    x = leaf(np.ones(50))
    out = ad.dropout(x, 0.3, True, np.random.default_rng(5))
    ad.backward(ad.sum_all(out))
    np.testing.assert_array_equal(x.grad, out.data)


# gap


def test_gap_constant_map():
    assert np.all(ad.gap(Tensor(np.full((3, 4, 5), 2.5))).data == 2.5)


def test_gap_single_cell_identity():
    f = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(ad.gap(Tensor(f.reshape(3, 1, 1))).data, f)


def test_gap_arithmetic_mean():
    assert ad.gap(Tensor(np.array([[[0.0, 2.0], [4.0, 6.0]]]))).data.tolist() == [3.0]


def test_gap_backward_uniform():
    F = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
    ad.backward(ad.sum_all(ad.gap(F)))
    np.testing.assert_allclose(F.grad, np.full((2, 3, 4), 1 / 12))


# hadamard


def test_hadamard_identity_and_arithmetic():
    a = Tensor([1.0, 2.0])
    np.testing.assert_array_equal(ad.hadamard(a, Tensor(np.ones(2))).data, a.data)
    assert ad.hadamard(a, Tensor([3.0, 4.0])).data.tolist() == [3.0, 8.0]


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_hadamard_commutes(a, b):
    np.testing.assert_array_equal(ad.hadamard(Tensor(a), Tensor(b)).data, ad.hadamard(Tensor(b), Tensor(a)).data)


def test_hadamard_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.hadamard(Tensor(np.ones(3)), Tensor(np.ones(2)))


# softmax cross-entropy


@pytest.mark.parametrize("k", [2, 3, 7])
def test_ce_uniform_is_log_k(k):
    assert abs(ad.softmax_cross_entropy(Tensor(np.full(k, 0.3)), 0).item() - math.log(k)) < 1e-12


def test_ce_confident_case():
    loss = ad.softmax_cross_entropy(Tensor([10.0, -10.0]), 0).item()
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_ce_large_logits_stay_finite():
    assert np.isfinite(ad.softmax_cross_entropy(Tensor([1000.0, -1000.0, 0.0]), 2).item())


def test_ce_backward_is_softmax_minus_onehot():
    z = leaf([0.5, -1.0, 2.0])
    ad.backward(ad.softmax_cross_entropy(z, 1))
    p = np.exp(z.data) / np.exp(z.data).sum()
    np.testing.assert_allclose(z.grad, p - np.eye(3)[1], atol=1e-15)


def test_ce_gradient_matches_fd():
    z = leaf(np.random.default_rng(0).normal(size=5))
    assert fd_check(lambda: ad.softmax_cross_entropy(z, 3), [z]) < 1e-6


@pytest.mark.parametrize("k", [-1, 3])
def test_ce_label_out_of_range(k):
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros(3)), k)


def test_ce_batch_is_mean_of_rows():
    rng = np.random.default_rng(1)
    z, y = rng.normal(size=(4, 3)), np.array([0, 2, 1, 1])
    batch = ad.softmax_cross_entropy(Tensor(z), y).item()
    rows = [ad.softmax_cross_entropy(Tensor(z[i]), int(y[i])).item() for i in range(4)]
    assert batch == pytest.approx(np.mean(rows), abs=1e-14)


# binary cross-entropy


@pytest.mark.parametrize("target", [0.0, 1.0])
def test_bce_half(target):
    assert ad.binary_cross_entropy(Tensor(0.5), target).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_confident_correct():
    assert ad.binary_cross_entropy(Tensor(1 - 1e-7), 1.0).item() < 1e-6


def test_bce_clamps_boundaries():
    assert ad.binary_cross_entropy(Tensor(0.0), 1.0).item() == pytest.approx(-math.log(1e-7))
    assert np.isfinite(ad.binary_cross_entropy(Tensor(1.0), 0.0).item())


def test_two_sample_domain_loss_is_two_ln2():
    half = Tensor(0.5)
    total = ad.binary_cross_entropy(half, 1.0).item() + ad.binary_cross_entropy(half, 0.0).item()
    assert abs(total - 2 * math.log(2)) < 1e-12


def test_sigmoid_range_is_clamped():
    p = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert p[0] >= 1e-7 and p[2] <= 1 - 1e-7 and p[1] == 0.5


# grl


def test_grl_identity_forward():
    x = Tensor([1.0, 2.0, 3.0])
    assert ad.grl(x, 0.7).data.tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 0.7])
def test_grl_backward_is_minus_lambda_upstream(lam):
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=4))
    g = rng.normal(size=4)
    ad.backward(ad.sum_all(ad.hadamard(ad.grl(x, lam), Tensor(g))))
    np.testing.assert_array_equal(x.grad, -lam * g)


def test_grl_zero_blocks_gradient():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum_all(ad.grl(x, 0.0)))
    assert np.all(x.grad == 0)


def test_grl_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        ad.grl(Tensor([1.0]), -0.1)


# backward and grad


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
@settings(max_examples=20)
def test_sum_gives_ones(shape):
    x = leaf(np.random.default_rng(0).normal(size=shape))
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones(shape))


def test_half_squared_norm_gives_x():
    x = leaf([1.0, -2.0, 3.5])
    ad.backward(ad.scale(ad.sum_all(ad.hadamard(x, x)), 0.5))
    np.testing.assert_array_equal(x.grad, x.data)


def test_backward_accumulates_and_zero_grads_resets():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum_all(x))
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    ad.zero_grads([x])
    assert x.grad is None


def test_summed_losses_equal_separate_backwards():
    rng = np.random.default_rng(3)
    w = leaf(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))

    def l1():
        return ad.softmax_cross_entropy(ad.matmul(x, w), np.array([0, 1, 1, 0]))

    def l2():
        return ad.mean(ad.relu(ad.matmul(x, w)))

    ad.backward(ad.add(l1(), l2()))
    together = w.grad.copy()
    w.grad = None
    ad.backward(l1())
    ad.backward(l2())
    np.testing.assert_allclose(w.grad, together, rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.backward(ad.relu(leaf([1.0, 2.0])))


def test_diamond_graph_visits_each_node_once():
    x = leaf(3.0)
    y = ad.hadamard(x, x)
    z = ad.add(y, y)
    ad.backward(z)
    assert x.grad == pytest.approx(12.0)


def test_grad_does_not_touch_dot_grad():
    x = leaf([1.0, 2.0])
    (g,) = ad.grad(ad.sum_all(ad.hadamard(x, x)), [x])
    np.testing.assert_array_equal(g, [2.0, 4.0])
    assert x.grad is None


def test_outputs_finite_on_valid_inputs():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(2, 1, 8, 8)))
    k = leaf(rng.normal(size=(4, 1, 3, 3)))
    logits = ad.gap(ad.max_pool2(ad.relu(ad.conv2d(x, k))))
    loss = ad.softmax_cross_entropy(logits, np.array([0, 3]))
    ad.backward(loss)
    assert np.isfinite(loss.item()) and np.all(np.isfinite(x.grad)) and np.all(np.isfinite(k.grad))


# sgd


def test_sgd_vanilla_step():
    p = leaf([1.0])
    p.grad = np.array([2.0])
    ad.sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.8)


def test_sgd_zero_grad_fixed_point():
    p = leaf([1.5, -2.0])
    p.grad = np.zeros(2)
    ad.sgd_step([p], 0.1, momentum=0.9)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_momentum_recurrence():
    p = leaf([0.0])
    opt = ad.SGD([p], momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step(0.1)
    assert p.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_missing_grad():
    with pytest.raises(ContractError):
        ad.sgd_step([leaf([1.0])], 0.1)
