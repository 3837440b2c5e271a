import json

import numpy as np
import pytest

from ancmatch.errors import (
    FormatError,
    GenerationError,
    InvalidArgumentError,
    NumericError,
)
from ancmatch.features import (
    FeatureMap,
    GridTransform,
    annotations_to_doc,
    correlation_map,
    l2_normalize,
    load_feature_pair,
    normalize_cells,
    pair_annotation,
    parse_annotations,
    synth_pair,
    synth_pair_repeated,
)
from ancmatch.tensor_core import Rng, permute, tns_write


class TestNormalize:
    def test_three_four_cell(self):
        f = FeatureMap(np.array([[[3.0, 4.0]]]), stride=16)
        out = l2_normalize(f)
        assert np.allclose(out.values[0, 0], [0.6, 0.8])

    def test_zero_cell_stays_zero(self):
        f = FeatureMap(np.zeros((1, 1, 4)), stride=16)
        assert np.array_equal(l2_normalize(f).values, np.zeros((1, 1, 4)))

    def test_norm_property_sweep(self, rng):
        vals = rng.normal(0, 1, (6, 5, 8))
        vals[2, 3] = 0.0
        norms = np.linalg.norm(l2_normalize(FeatureMap(vals)).values, axis=-1)
        ok = (np.abs(norms - 1.0) < 1e-12) | (norms == 0.0)
        assert ok.all()

    def test_non_finite_rejected(self):
        vals = np.ones((1, 1, 2))
        vals[0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            l2_normalize(FeatureMap(vals))


class TestCorrelationMap:
    def test_orthogonal_cells(self):
        fs = FeatureMap(np.array([[[1.0, 0.0]]]))
        ft = FeatureMap(np.array([[[0.0, 1.0]]]))
        assert correlation_map(fs, ft)[0, 0, 0, 0] == 0.0

    def test_self_map_diagonal_is_one(self, rng):
        f = l2_normalize(FeatureMap(rng.normal(0, 1, (3, 4, 8))))
        c = correlation_map(f, f)
        for i in range(3):
            for j in range(4):
                assert np.isclose(c[i, j, i, j], 1.0, atol=1e-12)

    def test_against_scalar_loop_oracle(self, rng):
        fs = l2_normalize(FeatureMap(rng.normal(0, 1, (2, 2, 3))))
        ft = l2_normalize(FeatureMap(rng.normal(0, 1, (2, 2, 3))))
        c = correlation_map(fs, ft)
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    for l in range(2):
                        want = sum(fs.values[i, j, m] * ft.values[k, l, m] for m in range(3))
                        assert abs(c[i, j, k, l] - want) < 1e-14

    def test_direction_symmetry_bit_exact(self, rng):
        fs = l2_normalize(FeatureMap(rng.normal(0, 1, (3, 2, 5))))
        ft = l2_normalize(FeatureMap(rng.normal(0, 1, (2, 4, 5))))
        assert np.array_equal(
            correlation_map(fs, ft), permute(correlation_map(ft, fs), (2, 3, 0, 1))
        )

    def test_values_in_unit_interval(self, rng):
        fs = l2_normalize(FeatureMap(rng.normal(0, 1, (4, 4, 6))))
        ft = l2_normalize(FeatureMap(rng.normal(0, 1, (4, 4, 6))))
        c = correlation_map(fs, ft)
        assert c.min() >= -1.0 - 1e-12 and c.max() <= 1.0 + 1e-12

    def test_depth_mismatch(self, rng):
        fs = FeatureMap(rng.normal(0, 1, (2, 2, 3)))
        ft = FeatureMap(rng.normal(0, 1, (2, 2, 4)))
        with pytest.raises(InvalidArgumentError):
            correlation_map(fs, ft)


def argmax_cell(c, i, j):
    flat = int(np.argmax(c[i, j]))
    return np.unravel_index(flat, c.shape[2:])


class TestSynthPair:
    def test_zero_translation_zero_noise_identity(self, rng):
        pair = synth_pair(rng, 6, 6, 8, GridTransform("translate"), 4, 0.0)
        assert np.array_equal(pair.source.values, pair.target.values)
        for src, tgt in pair.keypoints:
            assert src == tgt

    def test_translation_copies_cells(self, rng):
        pair = synth_pair(rng, 8, 8, 8, GridTransform("translate", dx=2), 4, 0.0)
        assert np.allclose(pair.target.values[:, 2:], pair.source.values[:, :6])

    @pytest.mark.parametrize("transform", [
        GridTransform("translate", dx=2, dy=-1),
        GridTransform("flip_h"),
        GridTransform("flip_v"),
        GridTransform("scale_up"),
        GridTransform("scale_down"),
    ])
    def test_noise_free_argmax_recovers_transform(self, rng, transform):
        h = w = 8
        pair = synth_pair(rng, h, w, 16, transform, 4, 0.0)
        c = correlation_map(pair.source, pair.target)
        for i in range(h):
            for j in range(w):
                expect = transform.map_cell(i, j, h, w)
                if expect is not None:
                    assert argmax_cell(c, i, j) == expect

    def test_keypoints_match_transform_exactly(self, rng):
        t = GridTransform("flip_h")
        pair = synth_pair(rng, 6, 6, 8, t, 6, 0.5)
        stride = pair.source.stride
        for (sx, sy), (tx, ty) in pair.keypoints:
            j = (sx + 0.5) / stride - 0.5
            i = (sy + 0.5) / stride - 0.5
            ti, tj = t.map_cell(int(round(i)), int(round(j)), 6, 6)
            assert tx == (tj + 0.5) * stride - 0.5
            assert ty == (ti + 0.5) * stride - 0.5

    def test_all_cells_out_of_bounds(self, rng):
        with pytest.raises(GenerationError):
            synth_pair(rng, 4, 4, 8, GridTransform("translate", dx=10), 1, 0.0)

    def test_keypoint_budget(self, rng):
        with pytest.raises(InvalidArgumentError):
            synth_pair(rng, 2, 2, 4, GridTransform("translate"), 5, 0.0)

    def test_repeated_blocks_duplicates_halves(self, rng):
        pair = synth_pair_repeated(rng, 6, 8, 8, GridTransform("translate", dx=1), 4, 0.0)
        assert np.array_equal(pair.source.values[:, :4], pair.source.values[:, 4:8])


class TestFeatureFiles:
    def test_load_pair(self, tmp_path, rng):
        a = rng.normal(0, 1, (16, 16, 64))
        b = rng.normal(0, 1, (16, 16, 64))
        tns_write(a, tmp_path / "a.tns")
        tns_write(b, tmp_path / "b.tns")
        fs, ft = load_feature_pair(tmp_path / "a.tns", tmp_path / "b.tns")
        assert (fs.h, fs.w, fs.d) == (16, 16, 64)
        assert np.allclose(np.linalg.norm(fs.values, axis=-1), 1.0)

    def test_rank2_rejected(self, tmp_path, rng):
        tns_write(rng.normal(0, 1, (4, 4)), tmp_path / "bad.tns")
        tns_write(rng.normal(0, 1, (4, 4, 2)), tmp_path / "ok.tns")
        with pytest.raises(FormatError):
            load_feature_pair(tmp_path / "bad.tns", tmp_path / "ok.tns")

    def test_depth_mismatch_rejected(self, tmp_path, rng):
        tns_write(rng.normal(0, 1, (4, 4, 2)), tmp_path / "a.tns")
        tns_write(rng.normal(0, 1, (4, 4, 3)), tmp_path / "b.tns")
        with pytest.raises(InvalidArgumentError):
            load_feature_pair(tmp_path / "a.tns", tmp_path / "b.tns")

    def test_roundtrip_normalized_values(self, tmp_path, rng):
        vals = normalize_cells(rng.normal(0, 1, (5, 6, 7)))
        tns_write(vals, tmp_path / "f.tns")
        fs, _ = load_feature_pair(tmp_path / "f.tns", tmp_path / "f.tns")
        assert np.allclose(fs.values, vals, atol=1e-15)


class TestAnnotations:
    def test_roundtrip(self, rng):
        pair = synth_pair(rng, 6, 6, 4, GridTransform("flip_v"), 3, 0.1)
        ann = pair_annotation(pair)
        doc = annotations_to_doc([ann])
        back = parse_annotations(json.dumps(doc))
        assert len(back) == 1
        assert np.allclose(back[0].source.keypoints, ann.source.keypoints)
        assert back[0].target.width == pair.target.image_width

    def test_count_mismatch_rejected(self):
        doc = {"pairs": [{
            "source": {"width": 64, "height": 64, "keypoints": [[1, 1]]},
            "target": {"width": 64, "height": 64, "keypoints": [[1, 1], [2, 2]]},
        }]}
        with pytest.raises(InvalidArgumentError):
            parse_annotations(doc)

    def test_malformed_rejected(self):
        with pytest.raises(FormatError):
            parse_annotations({"nope": []})
        with pytest.raises(FormatError):
            parse_annotations({"pairs": [{"source": {"width": 1}}]})
