import numpy as np
import pytest

from psdlab.nn import (BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool, Network, OptimizerState,
                       OutputLinear, ReLU, ShapeError, batchnorm_backward, batchnorm_forward, conv2d_backward,
                       conv2d_forward, dense_backward, dense_forward, dropout, half_mse_loss, load_checkpoint,
                       maxpool_backward, maxpool_forward, pool_output_size, read_checkpoint, relu,
                       relu_backward, save_checkpoint, sgdm_step)

H = 1e-5


def numeric_grad(f, x):
    """Central differences of scalar f with respect to every entry of x (x is perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + H
        up = f()
        x[i] = old - H
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * H)
    return g


def rel_error(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def naive_conv(x, w, b, pad):
    n, c, hgt, wid = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = hgt + 2 * pad - k + 1, wid + 2 * pad - k + 1
    out = np.zeros((n, f, ho, wo))
    for a in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    out[a, o, i, j] = b[o] + np.sum(w[o] * xp[a, :, i:i + k, j:j + k])
    return out


class TestConv:
    def test_all_ones_window(self):
        out = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 5, 5)), np.zeros(1))
        assert out.shape == (1, 1, 3, 3) and np.all(out == 9)

    def test_delta_filter_identity(self):
        w = np.zeros((1, 1, 5, 5))
        w[0, 0, 2, 2] = 1
        x = np.random.default_rng(0).normal(size=(2, 1, 6, 7))
        assert np.array_equal(conv2d_forward(x, w, np.zeros(1)), x)

    def test_bias_only(self):
        out = conv2d_forward(np.zeros((1, 2, 4, 4)), np.random.default_rng(0).normal(size=(3, 2, 5, 5)),
                             np.array([1.0, -2.0, 0.5]))
        assert np.all(out[0, 0] == 1.0) and np.all(out[0, 1] == -2.0) and np.all(out[0, 2] == 0.5)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 5, 5)), np.zeros(1))

    def test_zero_grad(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 5, 5))
        gx, gw, gb = conv2d_backward(x, w, np.zeros((1, 3, 5, 5)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_adjoint(self):
        w = np.zeros((1, 1, 5, 5))
        w[0, 0, 2, 2] = 1
        g = np.zeros((1, 1, 6, 6))
        g[0, 0, 3, 4] = 1
        gx, _, _ = conv2d_backward(np.zeros((1, 1, 6, 6)), w, g)
        assert np.array_equal(gx, g)

    def test_grad_shape_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_backward(np.zeros((1, 1, 6, 6)), np.zeros((2, 1, 5, 5)), np.zeros((1, 2, 5, 5)))

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_naive_loops(self, seed):
        rng = np.random.default_rng(seed)
        c, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.normal(size=(2, c, 8, 8))
        w = rng.normal(size=(f, c, 5, 5))
        b = rng.normal(size=f)
        assert np.abs(conv2d_forward(x, w, b) - naive_conv(x, w, b, 2)).max() < 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(2, 2, 5, 5)), rng.normal(size=2)
        g = rng.normal(size=(1, 2, 8, 8))
        gx, gw, gb = conv2d_backward(x, w, g)
        f = lambda: float(np.sum(conv2d_forward(x, w, b) * g))
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4
        assert rel_error(gw, numeric_grad(f, w)) < 1e-4
        assert rel_error(gb, numeric_grad(f, b)) < 1e-4

    def test_strided_finite_differences(self):
        rng = np.random.default_rng(7)
        x, w, b = rng.normal(size=(2, 1, 7, 7)), rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
        out = conv2d_forward(x, w, b, padding=1, stride=2)
        g = rng.normal(size=out.shape)
        gx, gw, _ = conv2d_backward(x, w, g, padding=1, stride=2)
        f = lambda: float(np.sum(conv2d_forward(x, w, b, padding=1, stride=2) * g))
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4
        assert rel_error(gw, numeric_grad(f, w)) < 1e-4


class TestRelu:
    def test_values(self):
        assert relu(np.array([-1.0]))[0] == 0 and relu(np.array([2.0]))[0] == 2

    def test_gradient_at_zero_is_zero(self):
        assert relu_backward(np.array([0.0]), np.array([1.0]))[0] == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4, 5))
        x[np.abs(x) < 1e-3] = 0.5
        g = rng.normal(size=x.shape)
        f = lambda: float(np.sum(relu(x) * g))
        assert rel_error(relu_backward(x, g), numeric_grad(f, x)) < 1e-4


class TestBatchNorm:
    def test_normalizes(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(6, 3, 4, 4))
        z = (z - z.mean(axis=(0, 2, 3), keepdims=True)) / z.std(axis=(0, 2, 3), keepdims=True)
        x = 5 + 2 * z
        out, _ = batchnorm_forward(x, np.ones(3), np.zeros(3))
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)
        shifted, _ = batchnorm_forward(x, np.ones(3), np.full(3, 3.0))
        np.testing.assert_allclose(shifted.mean(axis=(0, 2, 3)), 3, atol=1e-6)

    def test_batch_of_one(self):
        with pytest.raises(ShapeError):
            batchnorm_forward(np.zeros((1, 2, 3, 3)), np.ones(2), np.zeros(2))

    def test_running_statistics(self):
        x = np.array([[1.0], [3.0]])
        rm, rv = np.zeros(1), np.ones(1)
        batchnorm_forward(x, np.ones(1), np.zeros(1), "train", rm, rv)
        # batch mean 2, unbiased variance 2
        np.testing.assert_allclose(rm, [0.2])
        np.testing.assert_allclose(rv, [0.9 + 0.2])
        out, _ = batchnorm_forward(np.array([[0.2]]), np.ones(1), np.zeros(1), "infer", rm, rv)
        assert abs(out[0, 0]) < 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 2, 3, 3))
        gamma, beta = rng.normal(size=2), rng.normal(size=2)
        g = rng.normal(size=x.shape)
        _, cache = batchnorm_forward(x, gamma, beta)
        gx, gg, gb = batchnorm_backward(g, cache)
        f = lambda: float(np.sum(batchnorm_forward(x, gamma, beta)[0] * g))
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4
        assert rel_error(gg, numeric_grad(f, gamma)) < 1e-4
        assert rel_error(gb, numeric_grad(f, beta)) < 1e-4

    def test_dense_inputs_and_infer_gradients(self):
        rng = np.random.default_rng(3)
        x, gamma, beta = rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=3)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        g = rng.normal(size=x.shape)
        _, cache = batchnorm_forward(x, gamma, beta, "infer", rm, rv)
        gx, _, _ = batchnorm_backward(g, cache)
        f = lambda: float(np.sum(batchnorm_forward(x, gamma, beta, "infer", rm, rv)[0] * g))
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4


class TestMaxPool:
    def test_hand_example(self):
        out, _ = maxpool_forward(np.arange(1.0, 17.0).reshape(1, 1, 4, 4))
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 11

    def test_constant(self):
        out, _ = maxpool_forward(np.full((1, 2, 9, 9), 4.0))
        assert out.shape == (1, 2, 4, 4) and np.all(out == 4)

    def test_size_ladder(self):
        sizes = [32]
        for _ in range(4):
            sizes.append(pool_output_size(sizes[-1]))
        assert sizes == [32, 15, 7, 3, 1]

    def test_too_small(self):
        with pytest.raises(ShapeError):
            maxpool_forward(np.zeros((1, 1, 2, 5)))

    def test_first_argmax_on_ties(self):
        x = np.zeros((1, 1, 3, 3))
        _, arg = maxpool_forward(x)
        g = maxpool_backward(np.ones((1, 1, 1, 1)), arg, x.shape)
        assert g[0, 0, 0, 0] == 1 and g.sum() == 1

    def test_overlapping_windows_accumulate(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1
        out, arg = maxpool_forward(x)
        assert np.all(out == 1)
        assert maxpool_backward(np.ones_like(out), arg, x.shape)[0, 0, 2, 2] == 4

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.permutation(2 * 2 * 7 * 7).reshape(2, 2, 7, 7) * 0.1
        out, arg = maxpool_forward(x)
        g = rng.normal(size=out.shape)
        f = lambda: float(np.sum(maxpool_forward(x)[0] * g))
        assert rel_error(maxpool_backward(g, arg, x.shape), numeric_grad(f, x)) < 1e-4


class TestDropout:
    def test_identity_cases(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        assert dropout(x, 0.2, "infer")[0] is x
        assert np.array_equal(dropout(x, 0.0, "train", np.random.default_rng(0))[0], x)

    def test_zeroed_fraction(self):
        out, _ = dropout(np.ones(10 ** 6), 0.2, "train", np.random.default_rng(0))
        frac = np.mean(out == 0)
        assert 0.198 <= frac <= 0.202
        assert np.allclose(out[out != 0], 1.25)

    def test_seeded(self):
        a, _ = dropout(np.ones(100), 0.2, "train", np.random.default_rng(5))
        b, _ = dropout(np.ones(100), 0.2, "train", np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_per_channel(self):
        out, _ = dropout(np.ones((8, 16, 3, 3)), 0.5, "train", np.random.default_rng(1), per_channel=True)
        per_map = out.reshape(8, 16, 9)
        assert np.all(per_map.min(axis=2) == per_map.max(axis=2))

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            dropout(np.ones(3), 1.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_layer_backward_uses_mask(self, seed):
        layer = Dropout(0.2, seed=seed)
        x = np.random.default_rng(seed).normal(size=(4, 6))
        out = layer.forward(x, train=True)
        g = np.random.default_rng(seed + 1).normal(size=x.shape)
        mask = np.divide(out, x)
        np.testing.assert_allclose(layer.backward(g), g * mask, rtol=1e-12)


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(dense_forward(x, np.eye(4), np.zeros(4)), x)

    def test_hand_example(self):
        assert dense_forward(np.array([[1.0, 2.0]]), np.array([[1.0], [3.0]]), np.array([0.5]))[0, 0] == 7.5

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            dense_forward(np.zeros((1, 3)), np.zeros((2, 1)), np.zeros(1))

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        g = rng.normal(size=(3, 2))
        gx, gw, gb = dense_backward(x, w, g)
        f = lambda: float(np.sum(dense_forward(x, w, b) * g))
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4
        assert rel_error(gw, numeric_grad(f, w)) < 1e-4
        assert rel_error(gb, numeric_grad(f, b)) < 1e-4


class TestLoss:
    def test_zero(self):
        loss, grad = half_mse_loss(np.ones((2, 5)), np.ones((2, 5)))
        assert loss == 0 and not grad.any()

    def test_hand_example(self):
        loss, grad = half_mse_loss(np.array([[2.0, -3, 0, -4, 0]]), np.zeros((1, 5)))
        assert loss == pytest.approx(2.9, abs=1e-15)
        np.testing.assert_allclose(grad, [[0.4, -0.6, 0, -0.8, 0]])

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        pred, target = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        _, grad = half_mse_loss(pred, target)
        f = lambda: half_mse_loss(pred, target)[0]
        assert rel_error(grad, numeric_grad(f, pred)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            half_mse_loss(np.zeros((2, 5)), np.zeros((5, 2)))


class TestSgdm:
    def test_two_steps(self):
        w = np.array([1.0])
        state = OptimizerState(lr=0.1, momentum=0.9)
        sgdm_step({"w": w}, {"w": np.array([0.5])}, state)
        assert state.velocity["w"][0] == pytest.approx(-0.05) and w[0] == pytest.approx(0.95)
        sgdm_step({"w": w}, {"w": np.array([0.5])}, state)
        assert state.velocity["w"][0] == pytest.approx(-0.095) and w[0] == pytest.approx(0.855)

    def test_no_momentum_is_plain_descent(self):
        w = np.array([2.0, -1.0])
        state = OptimizerState(lr=0.25, momentum=0.0)
        for _ in range(3):
            before = w.copy()
            sgdm_step({"w": w}, {"w": np.array([1.0, -4.0])}, state)
            np.testing.assert_allclose(w, before - 0.25 * np.array([1.0, -4.0]))

    def test_defaults_and_shapes(self):
        state = OptimizerState()
        assert (state.lr, state.momentum) == (1e-4, 0.9)
        w = np.zeros((2, 3))
        sgdm_step({"w": w}, {"w": np.ones((2, 3))}, state)
        assert state.velocity["w"].shape == w.shape
        with pytest.raises(ShapeError):
            sgdm_step({"w": w}, {"w": np.ones(6)}, state)


def small_network(seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    layers = [Conv2D(1, 3, 5, 2, 1, rng, dtype), BatchNorm(3, dtype), ReLU(), MaxPool(3, 2), Dropout(0.2, seed=seed),
              Flatten(), Dense(3 * 3 * 3, 4, rng, dtype), BatchNorm(4, dtype), ReLU(), OutputLinear(4, 5, rng, dtype)]
    net = Network(layers, (1, 8, 8), dtype)
    net.shapes()
    return net


class TestNetwork:
    def test_he_initialization(self):
        layer = Conv2D(16, 64, 5, rng=np.random.default_rng(0))
        assert layer.params["w"].std() == pytest.approx(np.sqrt(2 / (16 * 25)), rel=0.02)
        assert not layer.params["b"].any()
        dense = Dense(400, 300, np.random.default_rng(0))
        assert dense.params["w"].std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)

    def test_shapes(self):
        assert small_network().shapes()[-1] == (5,)

    def test_whole_network_gradient(self):
        net = small_network(seed=2)
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(4, 1, 8, 8)), rng.normal(size=(4, 5))
        dropout_layer = net.layers[4]
        rng_state = dropout_layer.rng.bit_generator.state

        def loss():
            # same dropout mask on every evaluation
            dropout_layer.rng.bit_generator.state = rng_state
            return half_mse_loss(net.forward(x, train=True), y)[0]

        dropout_layer.rng.bit_generator.state = rng_state
        _, grad = half_mse_loss(net.forward(x, train=True), y)
        net.backward(grad)
        analytic = {k: g.copy() for k, g in net.named_grads().items()}
        for name, p in net.named_params().items():
            numeric = numeric_grad(loss, p)
            if np.abs(numeric).max() < 1e-8:
                # conv bias ahead of batch norm: the true gradient is zero
                assert np.abs(analytic[name]).max() < 1e-12, name
            else:
                assert rel_error(analytic[name], numeric) < 1e-4, name

    def test_infer_independent_of_batch(self):
        net = small_network(seed=4)
        x = np.random.default_rng(5).normal(size=(6, 1, 8, 8))
        net.forward(x, train=True)
        batched = net.forward(x)
        single = np.concatenate([net.forward(x[i:i + 1]) for i in range(6)])
        np.testing.assert_allclose(batched, single, rtol=0, atol=1e-12)
        assert np.array_equal(net.forward(x), batched)

    def test_loss_non_increasing_small_lr(self):
        net = small_network(seed=6)
        for layer in net.layers:
            if isinstance(layer, Dropout):
                layer.p = 0.0
        rng = np.random.default_rng(7)
        x, y = rng.normal(size=(8, 1, 8, 8)), rng.normal(size=(8, 5))
        state = OptimizerState(lr=1e-6, momentum=0.9)
        losses = []
        for _ in range(20):
            loss, grad = half_mse_loss(net.forward(x, train=True), y)
            losses.append(loss)
            net.backward(grad)
            sgdm_step(net.named_params(), net.named_grads(), state)
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_input_shape_checked(self):
        with pytest.raises(ShapeError):
            small_network().forward(np.zeros((2, 1, 9, 9)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_network(seed=8)
        x = np.random.default_rng(9).normal(size=(5, 1, 8, 8))
        net.forward(x, train=True)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, {"note": "hi"})
        back, extra = load_checkpoint(path)
        assert extra == {"note": "hi"}
        assert [l.spec() for l in back.layers] == [l.spec() for l in net.layers]
        for name, arr in {**net.named_params(), **net.named_buffers()}.items():
            assert np.array_equal(arr, {**back.named_params(), **back.named_buffers()}[name])
        assert np.array_equal(back.forward(x), net.forward(x))

    def test_layout(self, tmp_path):
        net = small_network(seed=1)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net)
        raw = path.read_bytes()
        assert raw[:8] == b"PSDCKPT1"
        n = int.from_bytes(raw[8:16], "little")
        header, arrays = read_checkpoint(path)
        total = sum(a.size for a in arrays.values())
        assert len(raw) == 16 + n + 8 * total
        assert "running_mean" in " ".join(arrays) and header["input_shape"] == [1, 8, 8]

    def test_float32_reload(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, small_network(seed=3))
        net, _ = load_checkpoint(path, dtype="float32")
        assert net.forward(np.zeros((2, 1, 8, 8))).dtype == np.float32

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\0" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)
