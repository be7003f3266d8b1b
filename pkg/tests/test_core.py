"""Preprocessing chain: worked arithmetic cases plus invariance properties.

Expected values in the example tests were computed by hand (two- and
three-point sets are small enough to do the centroid/scale arithmetic on
paper); the property tests check invariances against randomized inputs.
"""

import numpy as np
import pytest
import torch

from lift3d import (
    ConfigError,
    DatasetError,
    EmptyMaskError,
    Sample,
    ShapeError,
    adjacency_to_edges,
    apply_mask,
    edges_to_adjacency,
    normalize_scale,
    parse_kv_lines,
    preprocess_arrays,
    validate_sample,
    zero_center,
)
from lift3d.core import as_f64


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


class TestApplyMask:
    def test_masks_second_row(self):
        w = t([[1.0, 2.0], [3.0, 4.0]])
        m = t([1.0, 0.0])
        out = apply_mask(w, m)
        assert torch.equal(out, t([[1.0, 2.0], [0.0, 0.0]]))

    def test_all_visible_unchanged(self):
        w = t([[1.0, 2.0], [3.0, 4.0]])
        m = t([1.0, 1.0])
        assert torch.equal(apply_mask(w, m), w)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(t([[1.0, 2.0]]), t([1.0, 1.0]))
        with pytest.raises(ShapeError):
            apply_mask(t([[1.0, 2.0, 3.0]]), t([1.0]))


class TestZeroCenter:
    def test_two_point_centroid(self):
        # centroid of {(2,2),(4,4)} is (3,3)
        w = t([[2.0, 2.0], [4.0, 4.0]])
        m = t([1.0, 1.0])
        out, c = zero_center(w, m)
        assert torch.equal(out, t([[-1.0, -1.0], [1.0, 1.0]]))
        assert torch.equal(c, t([3.0, 3.0]))

    def test_single_visible_point_goes_to_origin(self):
        w = t([[5.0, 7.0], [0.0, 0.0]])
        m = t([1.0, 0.0])
        out, c = zero_center(w, m)
        assert torch.equal(out, t([[0.0, 0.0], [0.0, 0.0]]))
        assert torch.equal(c, t([5.0, 7.0]))

    def test_masked_rows_stay_zero(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            w = t(rng.standard_normal((n, 2)))
            m = t((rng.random(n) < 0.6).astype(float))
            if m.sum() == 0:
                m[0] = 1.0
            out, _ = zero_center(apply_mask(w, m), m)
            assert torch.equal(out[m == 0], torch.zeros_like(out[m == 0]))

    def test_no_visible_points_raises(self):
        with pytest.raises(EmptyMaskError):
            zero_center(t([[1.0, 2.0]]), t([0.0]))


class TestNormalizeScale:
    def test_shared_scalar_preserves_aspect(self):
        # largest |coordinate| of {(-2,-1),(2,1)} is 2
        w = t([[-2.0, -1.0], [2.0, 1.0]])
        m = t([1.0, 1.0])
        out, s = normalize_scale(w, m)
        assert torch.equal(out, t([[-1.0, -0.5], [1.0, 0.5]]))
        assert float(s) == 2.0

    def test_all_points_at_origin_unchanged(self):
        w = t([[0.0, 0.0], [0.0, 0.0]])
        m = t([1.0, 1.0])
        out, s = normalize_scale(w, m)
        assert torch.equal(out, w)
        assert float(s) == 1.0

    def test_max_visible_abs_coordinate_is_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            w = t(rng.standard_normal((n, 2)) * 10)
            m = t((rng.random(n) < 0.7).astype(float))
            if m.sum() == 0:
                m[int(rng.integers(n))] = 1.0
            w_c, _ = zero_center(apply_mask(w, m), m)
            out, _ = normalize_scale(w_c, m)
            peak = float((out.abs() * m.unsqueeze(-1)).max())
            assert peak == pytest.approx(1.0, abs=1e-12) or peak == 0.0


class TestPreprocess:
    def test_three_point_worked_example(self):
        # visible pair {(2,2),(4,4)}: centroid (3,3), extent 1 after centering
        w = t([[2.0, 2.0], [4.0, 4.0], [9.0, 9.0]])
        m = t([1.0, 1.0, 0.0])
        out, rec = preprocess_arrays(w, m)
        assert torch.equal(out, t([[-1.0, -1.0], [1.0, 1.0], [0.0, 0.0]]))
        assert torch.equal(rec.centroid, t([3.0, 3.0]))
        assert float(rec.scale) == 1.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(3, 10))
            w = t(rng.standard_normal((n, 2)) * 5)
            m = t((rng.random(n) < 0.7).astype(float))
            if m.sum() == 0:
                m[0] = 1.0
            shift = t(rng.standard_normal(2) * 100)
            a, _ = preprocess_arrays(w, m)
            b, _ = preprocess_arrays(w + shift, m)
            assert torch.allclose(a, b, atol=1e-12, rtol=0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            n = int(rng.integers(3, 10))
            w = t(rng.standard_normal((n, 2)))
            m = t((rng.random(n) < 0.7).astype(float))
            if m.sum() == 0:
                m[0] = 1.0
            p = rng.permutation(n)
            a, _ = preprocess_arrays(w, m)
            b, _ = preprocess_arrays(w[p], m[p])
            # centroid summation order changes with the permutation, so exact
            # bit equality is not available; 1e-12 is far above roundoff
            assert torch.allclose(a[p], b, atol=1e-12, rtol=0)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(29)
        w = t(rng.standard_normal((4, 6, 2)))
        m = t((rng.random((4, 6)) < 0.7).astype(float))
        m[:, 0] = 1.0
        batched, rec = preprocess_arrays(w, m)
        for i in range(4):
            single, rec_i = preprocess_arrays(w[i], m[i])
            assert torch.equal(batched[i], single)
            assert torch.equal(rec.centroid[i], rec_i.centroid)
            assert torch.equal(rec.scale[i], rec_i.scale)


class TestSampleValidation:
    def _good(self):
        return Sample(
            w2d=[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            s3d=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            mask=[1.0, 1.0, 1.0],
            adjacency=edges_to_adjacency([(0, 1), (1, 2)], 3),
            category="tripod",
        )

    def test_good_sample_passes(self):
        validate_sample(self._good())

    def test_counts(self):
        s = self._good()
        assert s.n_joints == 3
        assert s.n_visible == 3

    def test_too_few_visible(self):
        s = self._good()
        s.mask = t([1.0, 1.0, 0.0])
        with pytest.raises(DatasetError):
            validate_sample(s, min_visible=3)
        validate_sample(s, min_visible=2)

    def test_missing_gt(self):
        s = self._good()
        s.s3d = None
        validate_sample(s)
        with pytest.raises(DatasetError):
            validate_sample(s, require_gt=True)

    def test_non_binary_mask(self):
        s = self._good()
        s.mask = t([1.0, 0.5, 1.0])
        with pytest.raises(DatasetError):
            validate_sample(s)

    def test_asymmetric_adjacency(self):
        s = self._good()
        a = s.adjacency.clone()
        a[0, 2] = 1.0
        s.adjacency = a
        with pytest.raises(DatasetError):
            validate_sample(s)

    def test_non_finite_coordinates(self):
        s = self._good()
        w = s.w2d.clone()
        w[0, 0] = float("nan")
        s.w2d = w
        with pytest.raises(DatasetError):
            validate_sample(s)

    def test_bad_shapes(self):
        s = self._good()
        s.mask = t([1.0, 1.0])
        with pytest.raises(DatasetError):
            validate_sample(s)


class TestEdges:
    def test_round_trip(self):
        edges = [(0, 1), (1, 2), (0, 3)]
        a = edges_to_adjacency(edges, 4)
        assert torch.equal(a, a.T)
        assert adjacency_to_edges(a) == [[0, 1], [0, 3], [1, 2]]

    def test_out_of_range_edge(self):
        with pytest.raises(ShapeError):
            edges_to_adjacency([(0, 4)], 4)

    def test_as_f64_copies_dtype(self):
        x = as_f64(np.ones((2, 2), dtype=np.float32))
        assert x.dtype == torch.float64


class TestParseKvLines:
    def test_basic(self):
        text = "a = 1\n# comment\n\nb = two words  # trailing\n"
        assert parse_kv_lines(text) == {"a": "1", "b": "two words"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_kv_lines("just some words\n")

    def test_empty_key(self):
        with pytest.raises(ConfigError, match="empty key"):
            parse_kv_lines("= 3\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_kv_lines("a = 1\na = 2\n")
