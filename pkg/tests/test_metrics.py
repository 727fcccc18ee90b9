import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import count_detection, dice_by_counting, flood_fill_labels, z_test_by_quadrature
from stacknet.errors import DegenerateInputError, DimensionError, UndefinedMetricError
from stacknet.metrics import (
    detection_counts,
    dice_score,
    evaluate,
    label_components_3d,
    lesion_f1,
    lesion_recall,
    mean_report,
    paired_z_test,
    size_histogram,
)

masks_3d = arrays(np.bool_, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4)))


def comps(mask, conn=26):
    return label_components_3d(np.asarray(mask), conn)


def blobs(shape, boxes):
    m = np.zeros(shape, dtype=np.uint8)
    for (x0, x1), (y0, y1), (z0, z1) in boxes:
        m[x0:x1, y0:y1, z0:z1] = 1
    return m


class TestDice:
    def test_identical(self):
        g = blobs((4, 4, 4), [((0, 2), (0, 2), (0, 1))])
        assert dice_score(g, g.copy()) == 1.0

    def test_disjoint(self):
        g = blobs((4, 4, 4), [((0, 1), (0, 1), (0, 1))])
        p = blobs((4, 4, 4), [((3, 4), (3, 4), (3, 4))])
        assert dice_score(g, p) == 0.0

    def test_half(self):
        g = blobs((4, 4, 1), [((0, 2), (0, 2), (0, 1))])
        p = blobs((4, 4, 1), [((1, 3), (0, 2), (0, 1))])
        assert g.sum() == p.sum() == 4 and (g & p).sum() == 2
        assert dice_score(g, p) == 0.5

    def test_both_empty(self):
        assert dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @given(masks_3d, st.data())
    @settings(max_examples=60, deadline=None)
    def test_symmetry_and_permutation(self, g, data):
        p = data.draw(arrays(np.bool_, g.shape))
        assert dice_score(g, p) == dice_score(p, g)
        perm = np.random.default_rng(g.size).permutation(g.size)
        gp = g.ravel()[perm].reshape(g.shape)
        pp = p.ravel()[perm].reshape(g.shape)
        assert dice_score(gp, pp) == dice_score(g, p)
        assert dice_score(g, p) == dice_by_counting(g, p)


class TestLabelling:
    def test_face_adjacent(self):
        m = np.zeros((3, 3, 3), bool)
        m[0, 0, 0] = m[1, 0, 0] = True
        assert comps(m, 6).count == 1

    @pytest.mark.parametrize("conn,count", [(26, 1), (18, 2), (6, 2)])
    def test_corner_touch(self, conn, count):
        m = np.zeros((2, 2, 2), bool)
        m[0, 0, 0] = m[1, 1, 1] = True
        assert comps(m, conn).count == count
        assert len(flood_fill_labels(m, conn)[1]) == count

    def test_empty(self):
        c = comps(np.zeros((3, 3, 3)))
        assert c.count == 0 and c.sizes.size == 0

    def test_raster_order(self):
        m = np.zeros((4, 4, 4), bool)
        m[3, 3, 3] = True
        m[0, 0, 2] = True
        m[1, 2, 0] = True
        c = comps(m)
        assert c.labels[0, 0, 2] == 1 and c.labels[1, 2, 0] == 2 and c.labels[3, 3, 3] == 3

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            comps(np.zeros((2, 2, 2)), 8)

    @pytest.mark.parametrize("conn", [6, 18, 26])
    def test_matches_flood_fill(self, conn):
        rng = np.random.default_rng(conn)
        for _ in range(60):
            m = rng.random((16, 16, 8)) < rng.uniform(0.05, 0.4)
            c = comps(m, conn)
            labels, sizes = flood_fill_labels(m, conn)
            np.testing.assert_array_equal(c.labels, np.array(labels))
            assert c.sizes.tolist() == sizes

    @given(masks_3d)
    @settings(max_examples=60, deadline=None)
    def test_invariants(self, m):
        c = comps(m)
        assert sorted(set(np.unique(c.labels)) - {0}) == list(range(1, c.count + 1))
        assert c.sizes.sum() == m.sum()
        hist = size_histogram(c)
        assert sum(hist.values()) == c.count


class TestLesionRates:
    def setup_method(self):
        shape = (20, 4, 4)
        self.g = blobs(shape, [((0, 2), (0, 2), (0, 2)), ((6, 8), (0, 2), (0, 2)), ((12, 14), (0, 2), (0, 2))])
        # touches the first two GT lesions, plus one false positive
        self.p = blobs(shape, [((1, 3), (1, 3), (1, 3)), ((7, 8), (0, 1), (0, 1)), ((17, 19), (2, 4), (2, 4))])

    def test_recall_two_thirds(self):
        assert lesion_recall(comps(self.g), comps(self.p)) == 2 / 3

    def test_counts(self):
        assert detection_counts(comps(self.g), comps(self.p)) == (3, 2, 1)

    def test_f1_literal_mode(self):
        assert lesion_f1(comps(self.g), comps(self.p)) == 2 / 3

    def test_f1_harmonic(self):
        f1 = lesion_f1(comps(self.g), comps(self.p), mode="harmonic")
        assert abs(f1 - 2 / 3) < 1e-15

    def test_identical(self):
        g = comps(self.g)
        assert lesion_recall(g, g) == 1.0
        assert lesion_f1(g, g) == 1.0 and lesion_f1(g, g, "harmonic") == 1.0

    def test_empty_prediction(self):
        g, p = comps(self.g), comps(np.zeros_like(self.g))
        assert lesion_recall(g, p) == 0.0
        with pytest.raises(UndefinedMetricError):
            lesion_f1(g, p)
        assert lesion_f1(g, p, "harmonic") == 0.0
        assert evaluate(self.g, np.zeros_like(self.g)).lesion_f1 == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(UndefinedMetricError):
            lesion_recall(comps(np.zeros_like(self.g)), comps(self.p))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            lesion_f1(comps(self.g), comps(self.p), mode="macro")

    def test_relabel_invariance(self):
        # mirroring along x reverses raster order of the components
        g2, p2 = self.g[::-1].copy(), self.p[::-1].copy()
        assert lesion_recall(comps(g2), comps(p2)) == lesion_recall(comps(self.g), comps(self.p))
        assert lesion_f1(comps(g2), comps(p2)) == lesion_f1(comps(self.g), comps(self.p))

    def test_report(self):
        r = evaluate(self.g, self.p)
        assert (r.n_g, r.n_p, r.n_f) == (3, 2, 1)
        assert r.sizes == {"small": 3, "medium": 0, "large": 0}
        assert r.detected_sizes == {"small": 2, "medium": 0, "large": 0}
        assert all(0 <= v <= 1 for v in (r.dice, r.lesion_recall, r.lesion_f1))
        m = mean_report([r, r])
        assert m["n_subjects"] == 2 and m["n_g"] == 6 and m["dice"] == r.dice

    def test_random_pairs_against_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            g = rng.random((16, 16, 8)) < 0.08
            p = rng.random((16, 16, 8)) < 0.08
            gc, pc = comps(g), comps(p)
            gl, _ = flood_fill_labels(g)
            pl, _ = flood_fill_labels(p)
            n_g, n_p, n_f = count_detection(gl, pl, gc.count, pc.count)
            assert detection_counts(gc, pc) == (n_g, n_p, n_f)
            assert lesion_recall(gc, pc) == n_p / n_g
            assert lesion_f1(gc, pc) == n_p / (n_p + n_f)


class TestSizeHistogram:
    def hist_of(self, volumes):
        shape = (sum(volumes) + 2 * len(volumes), 1, 1)
        m = np.zeros(shape, bool)
        pos = 0
        for v in volumes:
            m[pos : pos + v] = True
            pos += v + 2
        c = comps(m)
        assert sorted(c.sizes.tolist()) == sorted(volumes)
        return size_histogram(c)

    def test_small(self):
        assert self.hist_of([5, 9]) == {"small": 2, "medium": 0, "large": 0}

    def test_medium_closed(self):
        assert self.hist_of([10, 15, 20]) == {"small": 0, "medium": 3, "large": 0}

    def test_large(self):
        assert self.hist_of([21, 100]) == {"small": 0, "medium": 0, "large": 2}

    def test_select(self):
        c = comps(blobs((10, 1, 1), [((0, 1), (0, 1), (0, 1)), ((3, 5), (0, 1), (0, 1))]))
        assert size_histogram(c, [False, True])["small"] == 1


class TestZTest:
    def test_symmetric_differences(self):
        z, p = paired_z_test([1.0, 0.0], [0.0, 1.0])
        assert z == 0.0 and p == 1.0

    def test_equal_samples(self):
        with pytest.raises(DegenerateInputError):
            paired_z_test([0.3, 0.5, 0.7], [0.3, 0.5, 0.7])

    def test_constant_shift(self):
        with pytest.raises(DegenerateInputError):
            paired_z_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            paired_z_test([1.0, 2.0], [1.0])
        with pytest.raises(DegenerateInputError):
            paired_z_test([1.0], [2.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_against_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.6, 0.9, 60)
        b = a - rng.normal(0.004 * seed, 0.02, 60)
        z, p = paired_z_test(a, b)
        z_ref, p_ref = z_test_by_quadrature(a, b)
        assert abs(z - z_ref) < 1e-9
        assert abs(p - p_ref) < 1e-9
        assert 0.0 <= p <= 1.0
