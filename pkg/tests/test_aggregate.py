import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stacknet import model as sn
from stacknet.aggregate import EnsembleSpec, aggregate_probs, binarize, ensemble_predict, predict_volume
from stacknet.errors import ConfigError, DimensionError
from stacknet.preprocess import Volume
from stacknet.synth import PhantomSpec, generate_phantom

prob_arrays = arrays(np.float32, (3, 4, 2), elements=st.floats(0, 1, width=32))


def pv(a):
    return Volume(np.asarray(a), kind="probability")


class TestAggregate:
    def test_mean_of_two(self):
        out = aggregate_probs([pv(np.full((1, 1, 1), 0.2)), pv(np.full((1, 1, 1), 0.6))])
        assert out.data[0, 0, 0] == 0.4
        assert binarize(out).data[0, 0, 0] == 1

    def test_single_identity(self):
        a = np.random.default_rng(0).random((3, 3, 2))
        np.testing.assert_array_equal(aggregate_probs([pv(a)]).data, a)

    @pytest.mark.parametrize("k", [2, 3, 5, 7])
    def test_copies_bit_exact(self, k):
        a = np.random.default_rng(k).random((8, 8, 4)).astype(np.float32)
        out = aggregate_probs([pv(a)] * k)
        assert np.array_equal(out.data, a)

    def test_fixed_order_sum(self):
        rng = np.random.default_rng(1)
        vols = [rng.random((4, 4, 2)) for _ in range(3)]
        expected = ((vols[0] + vols[1]) + vols[2]) / 3
        assert np.array_equal(aggregate_probs([pv(v) for v in vols]).data, expected)

    def test_errors(self):
        with pytest.raises(ConfigError):
            aggregate_probs([])
        with pytest.raises(DimensionError):
            aggregate_probs([pv(np.zeros((2, 2, 2))), pv(np.zeros((2, 2, 3)))])

    @given(st.lists(prob_arrays, min_size=1, max_size=5))
    @settings(max_examples=60, deadline=None)
    def test_bounded_by_inputs(self, arrs):
        out = aggregate_probs([pv(a) for a in arrs]).data
        stack = np.stack(arrs)
        assert np.all(out >= stack.min(0)) and np.all(out <= stack.max(0))

    @given(prob_arrays)
    @settings(max_examples=60, deadline=None)
    def test_binarize_of_pair(self, a):
        assert np.array_equal(binarize(aggregate_probs([pv(a), pv(a)])).data, binarize(pv(a)).data)

    @given(prob_arrays, prob_arrays, prob_arrays)
    @settings(max_examples=60, deadline=None)
    def test_monotone(self, a, b, bump):
        raised = np.maximum(b, bump)
        before = binarize(aggregate_probs([pv(a), pv(b)])).data
        after = binarize(aggregate_probs([pv(a), pv(raised)])).data
        assert np.all(after >= before)


class TestBinarize:
    def test_boundary(self):
        out = binarize(pv(np.array([0.4, 0.39, 0.41, 1.0, 0.0]).reshape(5, 1, 1)))
        assert out.data.ravel().tolist() == [1, 0, 1, 1, 0]
        assert out.kind == "binary-mask"

    def test_all_below(self):
        assert not binarize(pv(np.full((3, 3, 3), 0.3))).data.any()

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            EnsembleSpec([])
        with pytest.raises(ConfigError):
            EnsembleSpec([object()], threshold=1.0)


def small_record():
    return generate_phantom(PhantomSpec(dims=(24, 24, 8), n_small=1, n_medium=0, n_large=0, seed=4))


def small_model(**kw):
    cfg = dict(stack_depth=1, channel_widths=(2, 2, 2, 2), height=16, width=16)
    cfg.update(kw)
    return sn.build_stacknet(sn.StackNetConfig(**cfg))


class TestPredictVolume:
    def test_zero_model_gives_half_inside_window(self):
        m = small_model()
        for p in m.parameters():
            p.value[...] = 0
        rec = small_record()
        prob = predict_volume(m, rec)
        assert prob.dims == rec.dims and prob.kind == "probability"
        # 24 -> 16 crops 4 voxels on each side
        assert np.all(prob.data[4:20, 4:20] == 0.5)
        outside = np.ones(rec.dims, bool)
        outside[4:20, 4:20] = False
        assert not prob.data[outside].any()

    def test_padding_target(self):
        m = small_model(height=32, width=32)
        prob = predict_volume(m, small_record())
        assert prob.dims == (24, 24, 8)
        assert np.all((prob.data >= 0) & (prob.data <= 1))

    def test_deterministic(self):
        m = small_model()
        rec = small_record()
        assert np.array_equal(predict_volume(m, rec).data, predict_volume(m, rec).data)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            predict_volume(small_model(in_channels=3), small_record())

    def test_ensemble(self):
        a, b = small_model(seed=1), small_model(kernel_r=5, seed=2)
        rec = small_record()
        fused, mask = ensemble_predict([a, b], rec)
        expected = aggregate_probs([predict_volume(a, rec), predict_volume(b, rec)])
        assert np.array_equal(fused.data, expected.data)
        assert np.array_equal(mask.data, (expected.data >= 0.4).astype(np.uint8))
