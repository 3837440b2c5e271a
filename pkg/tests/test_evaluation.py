import numpy as np
import pytest

from ancmatch.errors import InvalidArgumentError
from ancmatch.evaluation import PckConfig, bench_conv4d, identity_baseline, pck
from ancmatch.features import ImageAnnotation, PairAnnotation


def ann(src, tgt, w=100, h=80):
    return PairAnnotation(
        ImageAnnotation(w, h, np.array(src, dtype=float)),
        ImageAnnotation(w, h, np.array(tgt, dtype=float)),
    )


class TestPck:
    def test_perfect_predictions(self):
        pts = np.array([[1.0, 2.0], [50.0, 60.0]])
        assert pck(pts, pts, (100, 80), PckConfig()) == 1.0

    def test_boundary_counts_as_correct(self):
        pred = np.array([[10.0, 0.0]])
        gt = np.array([[0.0, 0.0]])
        # threshold = 0.1 * max(100, 80) = 10, error exactly 10
        assert pck(pred, gt, (100, 80), PckConfig(alpha=0.1)) == 1.0

    def test_direct_count(self):
        gt = np.zeros((3, 2))
        pred = np.array([[5.0, 0.0], [15.0, 0.0], [50.0, 0.0]])
        assert np.isclose(pck(pred, gt, (100, 50), PckConfig(alpha=0.1)), 1 / 3)

    def test_scale_consistency(self, rng):
        gt = rng.uniform(0, 100, (5, 2))
        pred = gt + rng.normal(0, 4, (5, 2))
        a = pck(pred, gt, (100, 80), PckConfig())
        b = pck(2 * pred, 2 * gt, (200, 160), PckConfig())
        assert a == b

    def test_monotone_in_alpha(self, rng):
        gt = rng.uniform(0, 100, (20, 2))
        pred = gt + rng.normal(0, 6, (20, 2))
        scores = [pck(pred, gt, (100, 100), PckConfig(alpha=a))
                  for a in (0.02, 0.05, 0.1, 0.2)]
        assert all(scores[i] <= scores[i + 1] for i in range(3))

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            pck(np.zeros((2, 2)), np.zeros((3, 2)), (10, 10), PckConfig())
        with pytest.raises(InvalidArgumentError):
            pck(np.zeros((0, 2)), np.zeros((0, 2)), (10, 10), PckConfig())


class TestIdentityBaseline:
    def test_identical_layouts_score_one(self):
        pts = [[10.0, 10.0], [50.0, 40.0]]
        assert identity_baseline([ann(pts, pts)], PckConfig()) == 1.0

    def test_large_translation_scores_zero(self):
        src = [[10.0, 10.0], [30.0, 30.0]]
        tgt = [[60.0, 10.0], [80.0, 30.0]]  # 50px shift > 10px threshold
        assert identity_baseline([ann(src, tgt)], PckConfig(alpha=0.1)) == 0.0

    def test_proportional_rescale_between_sizes(self):
        a = PairAnnotation(
            ImageAnnotation(100, 100, np.array([[50.0, 50.0]])),
            ImageAnnotation(200, 200, np.array([[100.0, 100.0]])),
        )
        assert identity_baseline([a], PckConfig()) == 1.0

    def test_mean_over_pairs(self):
        good = ann([[10.0, 10.0]], [[10.0, 10.0]])
        bad = ann([[10.0, 10.0]], [[90.0, 70.0]])
        assert np.isclose(identity_baseline([good, bad], PckConfig()), 0.5)


class TestBench:
    def test_equivalence_and_rows(self):
        rows = bench_conv4d(sizes=(4,), channels=(1, 2), repetitions=3,
                            kernel_shapes=((3, 3, 5, 5),))
        assert len(rows) >= 2
        for row in rows:
            assert row.max_abs_diff <= 1e-10
            assert row.naive_s > 0 and row.fast_s > 0
            d = row.to_dict()
            assert set(d) >= {"extent", "channels", "backend", "speedup", "max_abs_diff"}

    def test_repetitions_validated(self):
        with pytest.raises(InvalidArgumentError):
            bench_conv4d(sizes=(4,), channels=(1,), repetitions=2)

    def test_timing_grows_with_volume(self):
        rows = bench_conv4d(sizes=(3, 6), channels=(2,), repetitions=3,
                            kernel_shapes=((3, 3, 3, 3),), backends=["numba"])
        by_extent = {r.extent: r.naive_s for r in rows}
        # soft sanity: the bigger volume should not be faster on the oracle
        assert by_extent[6] >= by_extent[3] * 0.5
