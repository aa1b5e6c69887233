import numpy as np
import pytest

from nilmadv import tensor as T

from conftest import numerical_grad, rel_error


def naive_conv(x, w, b):
    c_in, length = x.shape
    c_out, _, k = w.shape
    out = np.zeros((c_out, length - k + 1))
    for o in range(c_out):
        for t in range(length - k + 1):
            s = b[o]
            for c in range(c_in):
                for j in range(k):
                    s += x[c, t + j] * w[o, c, j]
            out[o, t] = s
    return out


class TestConv1d:
    def test_hand_example(self):
        out = T.conv1d_forward([[1.0, 2.0, 3.0]], [[[1.0, 0.0, -1.0]]], [0.0])
        assert out.tolist() == [[-2.0]]

    def test_unit_kernel_is_identity(self, rng):
        x = rng.normal(size=(1, 12))
        np.testing.assert_array_equal(T.conv1d_forward(x, np.ones((1, 1, 1)), [0.0]), x)

    def test_zero_kernel(self, rng):
        x = rng.normal(size=(3, 10))
        out = T.conv1d_forward(x, np.zeros((2, 3, 4)), np.zeros(2))
        assert out.shape == (2, 7)
        assert not out.any()

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_naive_loops(self, seed):
        r = np.random.default_rng(seed)
        c_in, c_out = r.integers(1, 4, size=2)
        k = int(r.integers(1, 6))
        length = int(r.integers(k, k + 12))
        x = r.normal(size=(c_in, length))
        w = r.normal(size=(c_out, c_in, k))
        b = r.normal(size=c_out)
        np.testing.assert_allclose(T.conv1d_forward(x, w, b), naive_conv(x, w, b), rtol=0, atol=1e-12)

    def test_batched_equals_per_sample(self, rng):
        x = rng.normal(size=(4, 2, 15))
        w = rng.normal(size=(3, 2, 5))
        b = rng.normal(size=3)
        batched = T.conv1d_forward(x, w, b)
        for i in range(4):
            np.testing.assert_allclose(batched[i], T.conv1d_forward(x[i], w, b), atol=1e-12)

    def test_shape_errors_name_dimensions(self):
        with pytest.raises(T.ShapeError, match="channels_in"):
            T.conv1d_forward(np.ones((2, 5)), np.ones((1, 3, 2)), [0.0])
        with pytest.raises(T.ShapeError, match="shorter than kernel"):
            T.conv1d_forward(np.ones((1, 2)), np.ones((1, 1, 3)), [0.0])
        with pytest.raises(T.ShapeError, match="bias"):
            T.conv1d_forward(np.ones((1, 5)), np.ones((2, 1, 3)), [0.0])

    def test_backward_zero_grad(self, rng):
        x = rng.normal(size=(2, 9))
        w = rng.normal(size=(3, 2, 4))
        gx, gw, gb = T.conv1d_backward(np.zeros((3, 6)), x, w)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_backward_unit_kernel(self, rng):
        g = rng.normal(size=(1, 8))
        gx, _, _ = T.conv1d_backward(g, rng.normal(size=(1, 8)), np.ones((1, 1, 1)))
        np.testing.assert_array_equal(gx, g)

    def test_backward_finite_differences(self, rng):
        x = rng.normal(size=(2, 11))
        w = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=3)
        r = rng.normal(size=(3, 8))
        loss = lambda: float(np.sum(r * T.conv1d_forward(x, w, b)))
        gx, gw, gb = T.conv1d_backward(r, x, w)
        assert rel_error(gx, numerical_grad(loss, x)) < 1e-6
        assert rel_error(gw, numerical_grad(loss, w)) < 1e-6
        assert rel_error(gb, numerical_grad(loss, b)) < 1e-6

    def test_backward_rejects_bad_grad_shape(self, rng):
        with pytest.raises(T.ShapeError):
            T.conv1d_backward(np.zeros((3, 5)), np.zeros((2, 9)), np.zeros((3, 2, 4)))


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_array_equal(T.dense_forward(x, np.eye(5), np.zeros(5)), x)

    def test_hand_example(self):
        assert T.dense_forward([2.0, 3.0], [[1.0, 1.0]], [0.0]).tolist() == [5.0]

    def test_matches_naive_dot(self, rng):
        x = rng.normal(size=7)
        w = rng.normal(size=(4, 7))
        b = rng.normal(size=4)
        expected = [b[i] + sum(w[i, j] * x[j] for j in range(7)) for i in range(4)]
        np.testing.assert_allclose(T.dense_forward(x, w, b), expected, rtol=0, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(T.ShapeError, match="inner extent"):
            T.dense_forward(np.ones(3), np.ones((2, 4)), np.zeros(2))

    def test_backward(self, rng):
        x = rng.normal(size=(3, 6))
        w = rng.normal(size=(4, 6))
        b = rng.normal(size=4)
        zero = T.dense_backward(np.zeros((3, 4)), x, w)
        assert all(not g.any() for g in zero)
        g = rng.normal(size=(3, 6))
        np.testing.assert_array_equal(T.dense_backward(g, x, np.eye(6))[0], g)

        r = rng.normal(size=(3, 4))
        loss = lambda: float(np.sum(r * T.dense_forward(x, w, b)))
        gx, gw, gb = T.dense_backward(r, x, w)
        assert rel_error(gx, numerical_grad(loss, x)) < 1e-6
        assert rel_error(gw, numerical_grad(loss, w)) < 1e-6
        assert rel_error(gb, numerical_grad(loss, b)) < 1e-6


class TestReluAndLoss:
    def test_relu(self):
        assert T.relu([-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]
        x = np.array([0.5, 1.0, 3.0])
        np.testing.assert_array_equal(T.relu(x), x)

    def test_relu_backward_zero_at_kink(self):
        g = T.relu_backward([1.0, 1.0, 1.0], [-1.0, 0.0, 2.0])
        assert g.tolist() == [0.0, 0.0, 1.0]

    def test_relu_backward_fd(self, rng):
        x = rng.normal(size=20)
        x[np.abs(x) < 1e-2] = 0.5
        r = rng.normal(size=20)
        loss = lambda: float(np.sum(r * T.relu(x)))
        assert rel_error(T.relu_backward(r, x), numerical_grad(loss, x)) < 1e-8

    def test_mse(self, rng):
        loss, grad = T.mse_loss([1.0, 2.0], [1.0, 2.0])
        assert loss == 0.0 and not grad.any()
        loss, grad = T.mse_loss([2.0], [0.0])
        assert loss == 4.0 and grad.tolist() == [4.0]

        pred = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, 4))
        _, grad = T.mse_loss(pred, target)
        fd = numerical_grad(lambda: T.mse_loss(pred, target)[0], pred)
        assert rel_error(grad, fd) < 1e-8


def test_kernels_are_deterministic(rng):
    x = rng.normal(size=(8, 3, 40))
    w = rng.normal(size=(5, 3, 6))
    b = rng.normal(size=5)
    a = T.conv1d_forward(x, w, b)
    assert a.tobytes() == T.conv1d_forward(x, w, b).tobytes()
    g = rng.normal(size=a.shape)
    first = T.conv1d_backward(g, x, w)
    second = T.conv1d_backward(g, x, w)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(first, second))
