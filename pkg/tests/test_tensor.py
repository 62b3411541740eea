import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caid import tensor as T
from caid.tensor import ShapeError, Tensor, no_grad

from gradcases import OP_CASES, worst_error


def test_relu_example():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_l2_normalize_example():
    out = T.l2_normalize(Tensor([3.0, 4.0], dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.6, 0.8], rtol=0, atol=1e-12)


def test_identity_conv_kernel():
    img = np.random.default_rng(0).random((2, 1, 5, 5)).astype(np.float32)
    out = T.conv2d(Tensor(img), Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    assert np.array_equal(out.data, img)


@pytest.mark.parametrize("h,k,s,p", [(32, 3, 2, 1), (16, 3, 1, 1), (7, 3, 2, 1), (8, 1, 2, 0), (5, 3, 1, 0)])
def test_conv_output_size(h, k, s, p):
    x = Tensor(np.zeros((1, 2, h, h), np.float32))
    w = Tensor(np.zeros((3, 2, k, k), np.float32))
    assert T.conv2d(x, w, stride=s, padding=p).shape == (1, 3, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert exc.value.op == "matmul"
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


def test_stop_gradient_product_rule():
    x = Tensor(3.0, requires_grad=True, dtype=np.float64)
    (x * T.stop_gradient(x)).backward()
    assert x.grad == 3.0


def test_stop_gradient_forward_identity():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(T.stop_gradient(t).data, t.data)


def test_loss_built_only_from_stop_gradient_has_zero_grads():
    w = Tensor(np.ones((3, 3)), requires_grad=True, dtype=np.float64)
    h = T.matmul(Tensor(np.eye(3)), w)
    loss = T.tsum(T.stop_gradient(h) * T.stop_gradient(h))
    loss.backward()
    assert w.grad is None or not np.any(w.grad)


def test_backward_sum_and_square():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 2)))
    y = Tensor(5.0, requires_grad=True, dtype=np.float64)
    (y * y).backward()
    assert y.grad == 10.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_grads_accumulate_over_uses():
    x = Tensor(2.0, requires_grad=True, dtype=np.float64)
    (x * x + x * 3.0).backward()
    assert x.grad == 7.0
    # a second backward adds on top
    (x * 1.0).backward()
    assert x.grad == 8.0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = T.tsum(x * 2.0)
    assert not y.requires_grad


def test_gradient_check_quadratic():
    x = Tensor(2.0, requires_grad=True, dtype=np.float64)
    assert T.gradient_check(lambda: x * x, [x], eps=1e-5) < 1e-8


def test_gradient_check_rejects_bad_eps():
    x = Tensor(2.0, requires_grad=True, dtype=np.float64)
    with pytest.raises(ValueError):
        T.gradient_check(lambda: x * x, [x], eps=0.0)


def test_batchnorm_train_gradcheck_2x3x4x4():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True, dtype=np.float64)
    g = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    w = rng.standard_normal((2, 3, 4, 4))

    def f():
        return T.tsum(T.batch_norm(x, g, b, np.zeros(3), np.ones(3), True) * Tensor(w))

    assert T.gradient_check(f, [x, g, b]) < 1e-5


def test_batchnorm_running_stats():
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    assert worst_error(OP_CASES[name], range(5)) < 1e-5


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 2, 6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        loss = T.mean_square(T.relu(T.conv2d(x, w, stride=2, padding=1)))
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    y = 1.0 - T.sigmoid(x) * 2.0
    assert y.dtype == np.float32


def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setattr(T, "DEBUG", True)
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        T.log(Tensor(np.array([0.0, 1.0])))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=8).filter(
    lambda v: np.linalg.norm(v) > 1e-3))
def test_l2_normalize_unit_norm(values):
    out = T.l2_normalize(Tensor(np.array(values), dtype=np.float64)).data
    assert abs(np.linalg.norm(out) - 1.0) < 1e-6


def test_l2_normalize_zero_row_is_finite():
    out = T.l2_normalize(Tensor(np.zeros((2, 3)), dtype=np.float64)).data
    assert np.all(out == 0)
