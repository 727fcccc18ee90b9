import numpy as np
import pytest

from stacknet import model as sn
from stacknet import tensor_core as tc
from stacknet.errors import ConfigError, DimensionError, StateError

TOY = dict(channel_widths=(3, 4, 4, 5), height=8, width=8)


def toy_model(seed=0, r=3, depth=2, dtype=np.float64):
    return sn.build_stacknet(sn.StackNetConfig(kernel_r=r, stack_depth=depth, seed=seed, **TOY), dtype=dtype)


def min_abs_preactivation(model, x):
    sn.forward(model, x)
    return min(
        np.abs(layer._cache[1]).min() for layer in model.layers if isinstance(layer, sn.Conv) and layer.activation
    )


class TestArchitecture:
    @pytest.mark.parametrize("r", [3, 5])
    def test_default_depth_layer_count(self, r):
        assert sn.layer_count(sn.build_stacknet(sn.StackNetConfig(kernel_r=r, stack_depth=5))) == 24

    @pytest.mark.parametrize("depth,count", [(1, 16), (2, 18), (5, 24), (6, 26)])
    def test_formula(self, depth, count):
        m = sn.build_stacknet(sn.StackNetConfig(stack_depth=depth, channel_widths=(2, 2, 2, 2)))
        assert sn.layer_count(m) == count == sn.expected_layer_count(depth)

    def test_stack_kernels(self):
        m = sn.build_stacknet(sn.StackNetConfig(kernel_r=5, stack_depth=3, channel_widths=(2, 3, 4, 5)))
        assert all(c.weight.shape[2:] == (5, 5) for c in m.enc1 + m.enc2)
        assert all(c.weight.shape[2:] == (3, 3) for c in m.enc3 + m.bottom + m.dec1 + m.dec2 + m.dec3)
        assert m.head.weight.shape == (1, 2, 1, 1)

    @pytest.mark.parametrize(
        "kw", [dict(kernel_r=4), dict(stack_depth=0), dict(height=100), dict(channel_widths=(1, 2, 3))]
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            sn.StackNetConfig(**kw)

    def test_seed_determinism(self):
        a, b = toy_model(seed=7), toy_model(seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.value, pb.value)
        c = toy_model(seed=8)
        assert not np.array_equal(a.parameters()[0].value, c.parameters()[0].value)

    def test_biases_zero(self):
        m = toy_model()
        assert all(not layer.bias.value.any() for layer in m.layers)


class TestForward:
    def test_zero_weights_give_half(self):
        m = toy_model()
        for p in m.parameters():
            p.value[...] = 0
        out = sn.forward(m, np.random.default_rng(0).standard_normal((2, 2, 8, 8)))
        assert np.all(out == 0.5)

    def test_shape_96(self):
        m = sn.build_stacknet(sn.StackNetConfig(channel_widths=(2, 2, 2, 2), stack_depth=1, height=96, width=96))
        out = sn.forward(m, np.zeros((1, 2, 96, 96), dtype=np.float32))
        assert out.shape == (1, 1, 96, 96)

    @pytest.mark.slow
    def test_shape_full_size_input(self):
        m = sn.build_stacknet(sn.StackNetConfig(channel_widths=(4, 4, 4, 4), stack_depth=5))
        x = np.random.default_rng(0).standard_normal((4, 2, 200, 200)).astype(np.float32)
        out = sn.forward(m, x, cache=False)
        assert out.shape == (4, 1, 200, 200)
        assert np.all((out >= 0) & (out <= 1))

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            sn.forward(toy_model(), np.zeros((1, 2, 12, 12)))

    def test_wrong_channels(self):
        with pytest.raises(DimensionError):
            sn.forward(toy_model(), np.zeros((1, 3, 8, 8)))

    def test_batch_decomposition(self):
        m = sn.build_stacknet(sn.StackNetConfig(stack_depth=2, channel_widths=(4, 4, 4, 4), height=16, width=16))
        x = np.random.default_rng(3).standard_normal((5, 2, 16, 16)).astype(np.float32)
        full = sn.forward(m, x, cache=False)
        single = np.concatenate([sn.forward(m, x[i : i + 1], cache=False) for i in range(5)])
        np.testing.assert_array_equal(full, single)

    def test_stack_semantics(self):
        """The first stack applies f(W_L * f(... f(W_0 * x))) layer by layer."""
        m = toy_model(depth=3)
        x = np.random.default_rng(0).standard_normal((1, 2, 8, 8))
        sn.forward(m, x)
        y = x
        for conv in m.enc1:
            y = tc.relu(tc.conv2d(y, conv.weight.value, conv.bias.value))
        np.testing.assert_array_equal(y, tc.relu(m.enc1[-1]._cache[1]))


class TestBackward:
    def test_requires_forward(self):
        with pytest.raises(StateError):
            sn.backward(toy_model(), np.zeros((1, 1, 8, 8)))

    def test_zero_loss_grad(self):
        m = toy_model()
        out = sn.forward(m, np.random.default_rng(0).standard_normal((1, 2, 8, 8)))
        sn.backward(m, np.zeros_like(out))
        assert all(not p.grad.any() for p in m.parameters())

    def test_accumulation_doubles(self):
        m = toy_model()
        out = sn.forward(m, np.random.default_rng(0).standard_normal((1, 2, 8, 8)))
        g = np.random.default_rng(1).standard_normal(out.shape)
        sn.backward(m, g)
        once = [p.grad.copy() for p in m.parameters()]
        sn.backward(m, g)
        for p, g1 in zip(m.parameters(), once):
            np.testing.assert_array_equal(p.grad, 2 * g1)

    def test_whole_model_finite_differences(self):
        x = None
        for seed in range(50):
            rng = np.random.default_rng(seed)
            m = toy_model(seed=seed)
            x = rng.standard_normal((1, 2, 8, 8))
            if min_abs_preactivation(m, x) > 1e-3:
                break
        else:
            pytest.fail("no kink-free sample found")
        w = np.random.default_rng(99).standard_normal((1, 1, 8, 8))
        m.zero_grad()
        sn.forward(m, x)
        sn.backward(m, w)
        worst = 0.0
        for p in m.parameters():
            analytic = p.grad.copy()

            def loss(v, p=p):
                saved = p.value.copy()
                p.value[...] = v
                val = float(np.sum(w * sn.forward(m, x, cache=False)))
                p.value[...] = saved
                return val

            rep = tc.grad_check(loss, lambda v: analytic, p.value, n_samples=12, rng=0)
            worst = max(worst, rep.max_rel_error)
        assert worst < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = sn.build_stacknet(sn.StackNetConfig(kernel_r=5, stack_depth=2, channel_widths=(3, 4, 5, 6), seed=2**63 + 5))
        path = tmp_path / "m.snet"
        sn.write_checkpoint(m, path)
        m2 = sn.read_checkpoint(path)
        assert m2.config == m.config
        for a, b in zip(m.parameters(), m2.parameters()):
            assert a.value.tobytes() == b.value.tobytes()
        assert sn.save_checkpoint(m2) == path.read_bytes()

    def test_layout(self):
        m = toy_model(dtype=np.float32)
        data = sn.save_checkpoint(m)
        assert data[:4] == b"SNET"
        n_params = sum(p.value.size for p in m.parameters())
        assert len(data) == 4 + 4 + sn._CONFIG_STRUCT.size + 4 * n_params

    def test_bad_magic_and_truncation(self):
        data = sn.save_checkpoint(toy_model(dtype=np.float32))
        with pytest.raises(ConfigError):
            sn.load_checkpoint(b"XXXX" + data[4:])
        with pytest.raises(ConfigError):
            sn.load_checkpoint(data[:-3])
