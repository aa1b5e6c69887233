import numpy as np
import pytest

from nilmadv import nn
from nilmadv.tensor import ShapeError

from conftest import numerical_grad, rel_error


def small_net(seed, mode=nn.MIDPOINT, window=17):
    builder = nn.build_seq2point if mode == nn.MIDPOINT else nn.build_seq2seq
    return builder(window, filters=(3, 2), kernel_sizes=(4, 3), hidden=6, seed=seed)


def linear_net(rng, n, mode=nn.FULL_WINDOW):
    m = n if mode == nn.FULL_WINDOW else 1
    layer = nn.Dense(rng.normal(size=(m, n)), rng.normal(size=m))
    return nn.Network([layer], n, mode)


class TestArchitecture:
    def test_seq2point_shape_contract(self):
        net = nn.build_seq2point(99)
        assert net.forward(np.zeros(99)).shape == (1,)
        assert net.forward(np.zeros((1, 99))).shape == (1, 1)

    def test_seq2seq_shape_contract(self):
        net = nn.build_seq2seq(99)
        assert net.forward(np.zeros(99)).shape == (99,)
        assert net.forward(np.zeros((3, 99))).shape == (3, 99)

    @pytest.mark.parametrize("window", [14, 16, 9])
    def test_seq2point_rejects_bad_window(self, window):
        with pytest.raises(ValueError):
            nn.build_seq2point(window)

    def test_window_too_short_for_kernels(self):
        with pytest.raises(ShapeError):
            nn.build_seq2point(15)

    def test_parameter_counts_by_hand(self):
        # conv: 1*30*10+30, 30*30*8+30, 30*40*6+40, 40*50*5+50, 50*50*5+50
        conv = 330 + 7230 + 7240 + 10050 + 12550
        # 99 - (9 + 7 + 5 + 4 + 4) = 70 positions x 50 channels -> dense 1024
        hidden = 3500 * 1024 + 1024
        assert nn.build_seq2point(99).n_params() == conv + hidden + 1024 + 1
        assert nn.build_seq2seq(99).n_params() == conv + hidden + 1024 * 99 + 99

    def test_layer_shapes_must_compose(self, rng):
        with pytest.raises(ShapeError, match="layer 1"):
            nn.Network([nn.Dense(np.ones((3, 4)), np.zeros(3)), nn.Dense(np.ones((1, 2)), np.zeros(1))],
                       4, nn.MIDPOINT)
        with pytest.raises(ShapeError, match="extent"):
            nn.Network([nn.Dense(np.ones((3, 4)), np.zeros(3))], 4, nn.MIDPOINT)

    def test_init_is_seeded_and_bounded(self):
        a = nn.build_seq2point(31, filters=(4,), kernel_sizes=(5,), hidden=8, seed=3)
        b = nn.build_seq2point(31, filters=(4,), kernel_sizes=(5,), hidden=8, seed=3)
        assert a.checksum() == b.checksum()
        w = a.layers[0].kernels
        assert np.abs(w).max() <= np.sqrt(6.0 / (5 + 20))
        assert not a.layers[0].bias.any()


class TestForward:
    def test_zero_params_give_zero_prediction(self):
        net = small_net(0)
        for p in net.params:
            p[...] = 0.0
        assert not net.forward(np.random.default_rng(0).normal(size=(4, 17))).any()

    def test_single_conv_net_by_hand(self, rng):
        w = rng.normal(size=(1, 1, 3))
        b = rng.normal(size=1)
        # conv(3) on 7 samples -> 5 outputs, dense 5 -> 1
        dw = rng.normal(size=(1, 5))
        db = rng.normal(size=1)
        net = nn.Network([nn.Conv1D(w, b), nn.ReLU(), nn.Flatten(), nn.Dense(dw, db)], 7, nn.MIDPOINT)
        x = rng.normal(size=7)
        conv = [b[0] + sum(x[t + j] * w[0, 0, j] for j in range(3)) for t in range(5)]
        expected = db[0] + sum(dw[0, t] * max(c, 0.0) for t, c in enumerate(conv))
        assert net.forward(x)[0] == pytest.approx(expected, abs=1e-12)

    def test_deterministic(self, rng):
        net = small_net(1, nn.FULL_WINDOW)
        x = rng.normal(size=(5, 17))
        assert net.forward(x).tobytes() == net.forward(x).tobytes()

    def test_rejects_wrong_length(self):
        with pytest.raises(ShapeError):
            small_net(0).forward(np.zeros(16))


class TestInputGradient:
    def test_zero_when_prediction_matches(self, rng):
        net = small_net(2, nn.FULL_WINDOW)
        x = rng.normal(size=17)
        assert not net.input_gradient(x, net.forward(x)).any()

    def test_linear_closed_form(self, rng):
        n = 6
        net = linear_net(rng, n)
        w, b = net.layers[0].weights, net.layers[0].bias
        x, y = rng.normal(size=n), rng.normal(size=n)
        expected = (2.0 / n) * w.T @ (w @ x + b - y)
        np.testing.assert_allclose(net.input_gradient(x, y), expected, atol=1e-12)

    @pytest.mark.parametrize("mode", [nn.MIDPOINT, nn.FULL_WINDOW])
    def test_finite_differences(self, rng, mode):
        net = small_net(5, mode)
        x = rng.normal(size=17)
        y = rng.normal(size=net.output_len)
        fd = numerical_grad(lambda: float(np.mean((net.forward(x) - y) ** 2)), x)
        assert rel_error(net.input_gradient(x, y), fd) < 1e-4

    def test_batch_rows_are_independent(self, rng):
        net = small_net(6, nn.FULL_WINDOW)
        x = rng.normal(size=(3, 17))
        y = rng.normal(size=(3, 17))
        g = net.input_gradient(x, y)
        for i in range(3):
            np.testing.assert_allclose(g[i], net.input_gradient(x[i], y[i]), atol=1e-14)

    def test_parameters_unchanged(self, rng):
        net = small_net(7)
        before = net.checksum()
        net.input_gradient(rng.normal(size=(4, 17)), rng.normal(size=4))
        assert net.checksum() == before

    def test_shape_mismatch(self, rng):
        net = small_net(8)
        with pytest.raises(ShapeError):
            net.input_gradient(rng.normal(size=(2, 17)), rng.normal(size=3))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.5, -2.0])]
        state = nn.AdamState.for_params(p)
        nn.adam_step(state, p, [np.zeros(2)], 1e-4)
        assert p[0].tolist() == [1.5, -2.0]
        assert state.step == 1

    def test_first_step_by_hand(self):
        p = [np.array([0.0])]
        state = nn.AdamState.for_params(p)
        nn.adam_step(state, p, [np.array([1.0])], 1e-4)
        m_hat = 0.1 / (1 - 0.9)
        v_hat = 0.001 / (1 - 0.999)
        assert p[0][0] == pytest.approx(-1e-4 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-12)
        assert p[0][0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_constant_gradient_step_tends_to_lr(self):
        p = [np.array([0.0])]
        state = nn.AdamState.for_params(p)
        prev = 0.0
        for _ in range(2000):
            nn.adam_step(state, p, [np.array([0.3])], 1e-3)
            step, prev = prev - p[0][0], p[0][0]
        assert step == pytest.approx(1e-3, rel=1e-6)

    def test_state_shapes(self, rng):
        net = small_net(0)
        state = nn.AdamState.for_params(net.params)
        assert [m.shape for m in state.m] == [p.shape for p in net.params]


class TestTrain:
    def toy(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 4))
        return x, 2.0 * x

    def test_linear_toy_converges(self):
        x, y = self.toy()
        net = linear_net(np.random.default_rng(1), 4)
        result = nn.train(net, (x, y), nn.TrainConfig(epochs=200, learning_rate=1e-2, batch_size=16))
        assert result.losses[-1] < 1e-3
        avg = np.convolve(result.losses, np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(avg) <= 0)

    def test_seeded_runs_are_bit_identical(self):
        nets = []
        for _ in range(2):
            net = small_net(3, nn.FULL_WINDOW, window=17)
            xs = np.random.default_rng(4).normal(size=(40, 17))
            nn.train(net, (xs, xs * 0.5), nn.TrainConfig(epochs=3, learning_rate=1e-3, batch_size=8, seed=9))
            nets.append(net)
        assert nets[0].checksum() == nets[1].checksum()

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            nn.TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            nn.TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            nn.TrainConfig(batch_size=0)
        assert nn.TrainConfig().epochs == 150 and nn.TrainConfig().learning_rate == 1e-4

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            nn.train(small_net(0), (np.zeros((0, 17)), np.zeros(0)), nn.TrainConfig(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self):
        net = small_net(0)
        x = np.full((4, 17), 1e200)
        with pytest.raises(nn.TrainingError, match="non-finite"):
            nn.train(net, (x, np.zeros(4)), nn.TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path, rng):
    net = small_net(11, nn.FULL_WINDOW)
    net.norm_stats = {"aggregate": (300.0, 250.0), "appliance": (20.0, 150.0)}
    path = tmp_path / "m.npz"
    net.save(path)
    loaded = nn.Network.load(path)
    x = rng.normal(size=(5, 17))
    assert loaded.forward(x).tobytes() == net.forward(x).tobytes()
    assert loaded.checksum() == net.checksum()
    assert loaded.norm_stats == net.norm_stats
    assert loaded.output_mode == nn.FULL_WINDOW
