import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from analogcim.converters import ConverterAttachment
from analogcim.errors import ConfigurationError, TrainingError
from analogcim.tensor_net import forward
from analogcim.train import (TrainConfig, accuracy, grad_S, grad_check, load_dataset, noisy_forward,
                             quantized_op, save_dataset, separable_pair, stage1_train, stage2_train, toy_mlp)
from analogcim.train import autodiff as ad
from analogcim.train.quant import ResidualTape, fake_quant, quant_mask
from analogcim.train.trainer import (TrainableState, build_graph, constraint_error, cosine_lr, exp_lr,
                                     weight_noise)

from conftest import dense_net
from oracles import central_difference, logistic_regression_accuracy

FAST = TrainConfig(epochs_stage1=3, epochs_stage2=2, batch_size=16, seed=0)


def _scalar_grad(build, *arrays):
    """Analytic gradients of sum(build(*nodes) * probe) for each input array."""
    nodes = [ad.param(a) for a in arrays]
    out = build(*nodes)
    probe = np.random.default_rng(9).standard_normal(out.shape)
    ad.backward(out, probe)
    return [n.grad for n in nodes], probe


class TestAutodiff:
    @pytest.mark.parametrize("op", ["add", "mul", "matmul"])
    def test_binary_ops(self, op, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2) if op == "matmul" else (1, 4))
        fn = getattr(ad, op)
        (ga, gb), probe = _scalar_grad(fn, a, b)
        na = central_difference(lambda v: float(np.sum(fn(ad.const(v), ad.const(b)).value * probe)), a)
        nb = central_difference(lambda v: float(np.sum(fn(ad.const(a), ad.const(v)).value * probe)), b)
        np.testing.assert_allclose(ga, na, atol=1e-6)
        np.testing.assert_allclose(gb, nb, atol=1e-6)

    def test_conv2d(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 27))
        f = lambda xx, ww: ad.conv2d(xx, ww, (3, 3), (2, 2), (1, 1))  # noqa: E731
        (gx, gw), probe = _scalar_grad(f, x, w)
        nx = central_difference(lambda v: float(np.sum(f(ad.const(v), ad.const(w)).value * probe)), x)
        nw = central_difference(lambda v: float(np.sum(f(ad.const(x), ad.const(v)).value * probe)), w)
        np.testing.assert_allclose(gx, nx, atol=1e-6)
        np.testing.assert_allclose(gw, nw, atol=1e-6)

    @pytest.mark.parametrize("m", [1, 2])
    def test_depthwise(self, m, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((3 * m, 9))
        f = lambda xx, ww: ad.depthwise_conv2d(xx, ww, (3, 3), (1, 1), (1, 1))  # noqa: E731
        (gx, gw), probe = _scalar_grad(f, x, w)
        nx = central_difference(lambda v: float(np.sum(f(ad.const(v), ad.const(w)).value * probe)), x)
        nw = central_difference(lambda v: float(np.sum(f(ad.const(x), ad.const(v)).value * probe)), w)
        np.testing.assert_allclose(gx, nx, atol=1e-6)
        np.testing.assert_allclose(gw, nw, atol=1e-6)

    @pytest.mark.parametrize("kind", ["avg_pool", "max_pool"])
    def test_pool(self, kind, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        f = lambda xx: ad.pool2d(xx, kind, (2, 2), (2, 2), (0, 0))  # noqa: E731
        (gx,), probe = _scalar_grad(f, x)
        nx = central_difference(lambda v: float(np.sum(f(ad.const(v)).value * probe)), x)
        np.testing.assert_allclose(gx, nx, atol=1e-6)

    def test_cross_entropy(self, rng):
        z = rng.standard_normal((5, 3))
        y = np.array([0, 2, 1, 1, 0])
        node = ad.param(z)
        ad.backward(ad.softmax_cross_entropy(node, y))
        gz = node.grad
        nz = central_difference(lambda v: float(ad.softmax_cross_entropy(ad.const(v), y).value), z)
        np.testing.assert_allclose(gz, nz, atol=1e-7)

    def test_fanout_accumulates(self):
        a = ad.param(np.array([2.0, 3.0]))
        out = ad.mul(a, a)
        ad.backward(out)
        np.testing.assert_array_equal(a.grad, [4.0, 6.0])

    def test_straight_through(self):
        w0 = ad.param(np.array([1.0, 5.0]))
        w = ad.straight_through(w0, np.array([1.0, 2.0]))
        ad.backward(ad.mul(w, np.array([3.0, 4.0])))
        np.testing.assert_array_equal(w0.grad, [3.0, 4.0])


class TestFakeQuant:
    def test_forward_matches_converter(self):
        x = np.linspace(-2, 2, 41)
        out = fake_quant(ad.const(x), ad.param(1.0), 4).value
        from analogcim.converters import QuantizerParams, fake_quantize
        np.testing.assert_array_equal(out, fake_quantize(x, QuantizerParams(4, 1.0)))

    def test_ste_gradients(self):
        x = ad.param(np.array([-3.0, -0.31, 0.2, 0.49, 2.5]))
        r = ad.param(1.0)
        out = fake_quant(x, r, 3)  # n = 3, step 1/3
        ad.backward(out)
        np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 0])
        u = np.array([-0.93, 0.6, 1.47])
        inside = (np.sign(u) * np.floor(np.abs(u) + 0.5) - u) / 3
        assert float(r.grad) == pytest.approx(-1 + 1 + inside.sum())

    def test_range_gradient_clipped_element_vs_fd(self):
        # every element clipped: out = sign(x) * r, exact derivative sign(x)
        x = np.array([-5.0, 4.0, 7.0])
        f = lambda rv: float(np.sum(fake_quant(ad.const(x), ad.const(rv), 5).value))  # noqa: E731
        r = ad.param(1.3)
        ad.backward(fake_quant(ad.const(x), r, 5))
        assert float(r.grad) == pytest.approx(1.0)
        assert (f(1.3 + 1e-6) - f(1.3 - 1e-6)) / 2e-6 == pytest.approx(1.0, abs=1e-4)

    def test_range_gradient_inside_vs_surrogate_fd(self, rng):
        x = rng.uniform(-0.8, 0.8, 50)
        tape = ResidualTape()
        fake_quant(ad.const(x), ad.const(1.0), 4, tape, "q")
        tape.freeze()
        r = ad.param(1.0)
        ad.backward(fake_quant(ad.const(x), r, 4, tape, "q"))
        f = lambda rv: float(np.sum(fake_quant(ad.const(x), ad.const(rv), 4, tape, "q").value))  # noqa: E731
        assert float(r.grad) == pytest.approx((f(1 + 1e-5) - f(1 - 1e-5)) / 2e-5, abs=1e-6)

    def test_bypass(self):
        x = ad.param(np.array([0.123, 9.0]))
        r = ad.param(1.0)
        out = fake_quant(x, r, 4, bypass=np.array([True, True]))
        ad.backward(out)
        np.testing.assert_array_equal(out.value, [0.123, 9.0])
        assert float(r.grad) == 0.0


class TestQuantMask:
    def test_zero_probability_disables(self, rng):
        assert quant_mask(rng, 0.0, (3, 4), False) is None

    def test_whole_tensor_rate(self):
        rng = np.random.default_rng(3)
        draws = [bool(quant_mask(rng, 0.5, (4, 4), False).all()) for _ in range(10_000)]
        assert np.mean(draws) == pytest.approx(0.5, abs=0.02)

    def test_per_element_rate(self):
        m = quant_mask(np.random.default_rng(4), 0.5, (100, 100), True)
        assert m.shape == (100, 100) and m.mean() == pytest.approx(0.5, abs=0.02)

    def test_whole_tensor_is_uniform(self, rng):
        m = quant_mask(rng, 0.5, (2, 3, 4, 4), False)
        assert m.shape == (1, 1, 1, 1)


class TestGradS:
    def test_hand_example(self):
        assert grad_S([0.4], [2.0], [0.5], 1.0, clip=None) == pytest.approx(1.6)
        assert grad_S([0.4], [2.0], [0.5], 1.0) == pytest.approx(0.01)

    def test_zero(self):
        assert grad_S([0.0, 0.0], [1.0, 2.0], [1.0, 1.0], 0.7) == 0.0

    def test_negative_s_flips(self):
        a = grad_S([0.1, -0.3], [1.0, 2.0], [0.5, 2.0], 1.0, clip=None)
        assert grad_S([0.1, -0.3], [1.0, 2.0], [0.5, 2.0], -1.0, clip=None) == pytest.approx(-a)

    def test_subgradient_at_zero(self):
        assert grad_S([1.0], [1.0], [1.0], 0.0, clip=None) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=5), st.floats(-3, 3))
    def test_clip_bound(self, grads, s):
        n = len(grads)
        assert abs(grad_S(grads, [1.0] * n, [0.5] * n, s)) <= 0.01


class TestGradCheck:
    def test_dense_weights(self, mlp, rng):
        x = rng.standard_normal((6, 8))
        y = rng.integers(0, 3, 6)
        errs = grad_check(mlp, x, y, "weights")
        assert max(errs.values()) < 1e-3, errs

    def test_conv_weights(self, cnn, rng):
        x = rng.standard_normal((3, 1, 8, 8))
        y = rng.integers(0, 4, 3)
        errs = grad_check(cnn, x, y, "weights", max_entries=25)
        assert max(errs.values()) < 1e-3, errs

    def test_ranges(self, mlp, rng):
        x = rng.standard_normal((6, 8))
        y = rng.integers(0, 3, 6)
        errs = grad_check(mlp, x, y, "ranges", r_adc={"fc1": 2.5, "fc2": 3.0}, S=0.8)
        assert max(errs.values()) < 1e-2, errs

    def test_unknown_mode(self, mlp):
        with pytest.raises(ConfigurationError):
            grad_check(mlp, np.zeros((1, 8)), np.zeros(1, dtype=int), "bogus")


class TestNoisyForward:
    def test_eta_zero_is_clipped_forward(self, mlp, rng):
        x = rng.standard_normal((5, 8))
        bounds = {n: (-0.3, 0.3) for n in ("fc1", "fc2")}
        got = noisy_forward(mlp, x, 0.0, rng, bounds)
        from dataclasses import replace
        clipped = replace(mlp, layers=[replace(l, weights=np.clip(l.weights, -0.3, 0.3)) if l.weights is not None
                                       else l for l in mlp.layers])
        np.testing.assert_allclose(got, forward(clipped, x), atol=1e-6)  # float32 weight storage

    def test_noise_std(self):
        s = weight_noise((100_000,), 0.1, 2.0, np.random.default_rng(0)).std()
        assert s == pytest.approx(0.2, rel=0.02)

    def test_resampled_each_pass(self, mlp, rng):
        x = rng.standard_normal((2, 8))
        assert not np.array_equal(noisy_forward(mlp, x, 0.1, rng), noisy_forward(mlp, x, 0.1, rng))

    def test_ste_gradient_reaches_master(self, rng):
        w = rng.standard_normal((3, 4))
        net = dense_net(w)
        state = TrainableState.from_net(net)
        state.bounds = {"fc": (-0.5, 0.5)}
        x = rng.standard_normal((5, 4))
        y = rng.integers(0, 3, 5)
        g = build_graph(net, state, x, clip=True, eta=0.1, rng=np.random.default_rng(1))
        ad.backward(ad.softmax_cross_entropy(g.logits, y))
        # gradient wrt the perturbed weights, recomputed on a graph fed those weights directly
        perturbed = g.logits.parents[0].parents[0].parents[1].parents[0].value
        probe = ad.param(perturbed)
        logits = ad.bias_add(ad.matmul(ad.const(x), ad.transpose(probe, (1, 0))), ad.const(np.zeros(3)))
        ad.backward(ad.softmax_cross_entropy(logits, y))
        np.testing.assert_allclose(g.w["fc"].grad, probe.grad, atol=1e-12)


class TestQuantizedOp:
    def _layer(self, rng):
        return dense_net(rng.standard_normal((5, 7))).layers[0]

    def test_mask_one_is_float(self, rng):
        layer = self._layer(rng)
        x = rng.standard_normal((4, 7))
        att = ConverterAttachment.build("fc", 3, 0.5, 0.5)
        np.testing.assert_allclose(quantized_op(x, layer, att, mask_p=1.0), x @ layer.weights.T, atol=1e-12)

    def test_sixteen_bits_close_to_float(self, rng):
        layer = self._layer(rng)
        x = rng.uniform(-1, 1, (4, 7))
        y = x @ layer.weights.T
        att = ConverterAttachment.build("fc", 16, 1.0, float(np.abs(y).max()) * 1.01)
        np.testing.assert_allclose(quantized_op(x, layer, att), y, atol=1e-3)


class TestStage1:
    def test_separable_pair(self):
        data = separable_pair(300, dim=8, margin=0.5, seed=2)
        oracle = logistic_regression_accuracy(data.x.astype(np.float64), data.y)
        assert oracle == 1.0
        net = toy_mlp(in_dim=8, hidden=16, classes=2, seed=1)
        res = stage1_train(net, data, TrainConfig(epochs_stage1=20, seed=0))
        assert accuracy(res.net, data) >= 0.99

    def test_zero_epochs_only_clips(self, mlp, patterns):
        data = separable_pair(40, dim=8)
        mlp2 = toy_mlp(in_dim=8, hidden=12, classes=2, seed=0)
        res = stage1_train(mlp2, data, TrainConfig(epochs_stage1=0))
        for layer in mlp2.analog_layers():
            k = 2 * np.std(layer.weights)
            np.testing.assert_allclose(res.net.layer(layer.name).weights, np.clip(layer.weights, -k, k), rtol=1e-6)
        assert res.log == []

    def test_deterministic(self):
        data = separable_pair(64, dim=8)
        net = toy_mlp(in_dim=8, hidden=8, classes=2)
        a = stage1_train(net, data, FAST)
        b = stage1_train(net, data, FAST)
        for k in a.master:
            np.testing.assert_array_equal(a.master[k], b.master[k])

    def test_divergence_raises(self):
        data = separable_pair(64, dim=8)
        cfg = TrainConfig(epochs_stage1=3, batch_size=16, lr_stage1=1e200)
        with np.errstate(all="ignore"), pytest.raises(TrainingError, match="stage 1: loss became nan"):
            stage1_train(toy_mlp(in_dim=8, hidden=8, classes=2), data, cfg)

    def test_empty_set(self, mlp):
        from analogcim.train import Dataset
        with pytest.raises(ConfigurationError):
            stage1_train(mlp, Dataset(np.zeros((0, 8)), np.zeros(0)), FAST)


class TestStage2:
    @pytest.fixture(scope="class")
    @classmethod
    def trained(cls):
        data = separable_pair(128, dim=8, seed=3)
        net = toy_mlp(in_dim=8, hidden=16, classes=2, seed=2)
        s1 = stage1_train(net, data, FAST)
        s2 = stage2_train(s1, data, FAST)
        return data, s1, s2

    def test_constraint_and_clip_every_step(self, trained):
        _, _, s2 = trained
        assert s2.log
        for row in s2.log:
            assert row["s_constraint_err"] < 1e-12
            assert abs(row["s_grad"]) <= 0.01

    def test_exported_ranges_satisfy_constraint(self, trained):
        _, _, s2 = trained
        conv = s2.net.converters
        assert conv["dac_bits"] == conv["adc_bits"] + 1
        for name, e in conv["layers"].items():
            assert e["r_dac"] * e["w_max"] / e["r_adc"] == pytest.approx(abs(conv["S"]), rel=1e-12)
        assert constraint_error(s2.state) < 1e-12

    def test_bounds_frozen(self, trained):
        _, s1, s2 = trained
        for name, (lo, hi) in s2.state.bounds.items():
            k = 2 * np.std(s1.master[name])
            assert (lo, hi) == pytest.approx((-k, k))
        with pytest.raises(TrainingError):
            s2.state.refresh_bounds(2.0)

    def test_exported_weights_clipped_noise_free(self, trained):
        _, _, s2 = trained
        for name, e in s2.net.converters["layers"].items():
            w = s2.net.layer(name).weights
            np.testing.assert_allclose(w, np.clip(s2.master[name], e["w_min"], e["w_max"]), rtol=1e-6)

    def test_reduces_to_finetune(self):
        data = separable_pair(128, dim=8, seed=3)
        net = toy_mlp(in_dim=8, hidden=16, classes=2, seed=2)
        cfg = TrainConfig(epochs_stage1=5, epochs_stage2=3, eta=0.0, quant_noise_p=1.0, adc_bits=16, batch_size=16)
        s1 = stage1_train(net, data, cfg)
        s2 = stage2_train(s1, data, cfg)
        assert abs(accuracy(s2.net, data) - accuracy(s1.net, data)) <= 0.005

    def test_deterministic(self, trained):
        data, s1, s2 = trained
        again = stage2_train(s1, data, FAST)
        for k in s2.master:
            np.testing.assert_array_equal(again.master[k], s2.master[k])
        assert again.state.S == s2.state.S

    def test_noise_only_variant_has_no_ranges(self, trained):
        data, s1, _ = trained
        from dataclasses import replace
        res = stage2_train(s1, data, replace(FAST, train_ranges=False))
        assert res.net.converters["trained"] is False
        assert "S" not in res.log[-1]


class TestSchedules:
    def test_cosine(self):
        assert cosine_lr(0.1, 0, 100) == 0.1
        assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)

    def test_exponential_range_lr(self):
        assert exp_lr(1e-3, 1e-4, 0, 11) == pytest.approx(1e-3)
        assert exp_lr(1e-3, 1e-4, 10, 11) == pytest.approx(1e-4)

    def test_stage2_lr_default(self):
        assert TrainConfig(lr_stage1=0.05).stage2_lr == pytest.approx(0.005)

    @pytest.mark.parametrize("kw", [{"eta": -0.1}, {"quant_noise_p": 1.5}, {"optimizer": "lbfgs"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)


def test_dataset_round_trip(tmp_path):
    data = separable_pair(20, dim=3)
    save_dataset(data, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.y, data.y)


def test_missing_dataset_names_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="x.aont"):
        load_dataset(tmp_path)
