"""Intersectional grouping: encoding, masks, and soft membership."""
import numpy as np
import pytest

from paretofair.errors import ParameterError, ValidationError
from paretofair.groups import (
    SensitiveAttributes,
    build_intersection,
    decode_group_id,
    encode_codes,
    marginal_attribute_groups,
    soft_membership,
)


def make_attrs(codes, cards):
    return SensitiveAttributes(codes=np.asarray(codes), cardinalities=tuple(cards))


class TestBuildIntersection:
    def test_two_binary_attributes(self):
        attrs = make_attrs([[0, 0], [0, 1], [1, 0], [1, 1]], (2, 2))
        table = build_intersection(attrs)
        assert table.group_count == 4
        # attribute 0 is the most significant digit: (1,0) -> 2
        np.testing.assert_array_equal(table.group_id, [0, 1, 2, 3])

    def test_sample_code_1_0_maps_to_id_2(self):
        attrs = make_attrs([[1, 0]], (2, 2))
        assert build_intersection(attrs).group_id[0] == 2

    def test_mixed_cardinalities_product(self):
        attrs = make_attrs([[1, 2], [0, 0]], (2, 3))
        table = build_intersection(attrs)
        assert table.group_count == 6
        assert table.group_id[0] == 1 * 3 + 2 == 5

    def test_single_attribute_degenerate_product(self):
        attrs = make_attrs([[0], [1], [1]], (2,))
        table = build_intersection(attrs)
        assert table.group_count == 2
        np.testing.assert_array_equal(table.sizes, [1, 2])

    def test_empty_groups_retained_and_flagged(self):
        attrs = make_attrs([[0, 0], [1, 1]], (2, 2))
        table = build_intersection(attrs)
        assert table.group_count == 4
        np.testing.assert_array_equal(table.empty_groups, [1, 2])
        np.testing.assert_array_equal(table.nonempty_groups, [0, 3])

    def test_out_of_range_code_names_sample_and_attribute(self):
        attrs = make_attrs([[0, 0], [0, 2]], (2, 2))
        with pytest.raises(ValidationError, match="sample 1.*attribute 1"):
            build_intersection(attrs)

    def test_masks_partition_samples(self):
        rng = np.random.default_rng(7)
        cards = (3, 2, 4)
        codes = np.column_stack([rng.integers(0, c, size=200) for c in cards])
        table = build_intersection(make_attrs(codes, cards))
        # disjoint and covering: each sample in exactly one mask
        assert table.masks.sum(axis=0).tolist() == [1] * 200
        assert table.sizes.sum() == 200


class TestEncodingBijectivity:
    def test_roundtrip_all_tuples(self):
        for cards in [(2,), (2, 2), (2, 3), (3, 2, 4)]:
            grids = np.meshgrid(*[np.arange(c) for c in cards], indexing="ij")
            codes = np.column_stack([g.ravel() for g in grids])
            ids = encode_codes(codes, cards)
            assert sorted(ids.tolist()) == list(range(int(np.prod(cards))))
            np.testing.assert_array_equal(decode_group_id(ids, cards), codes)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            m = rng.integers(1, 5)
            cards = tuple(int(c) for c in rng.integers(2, 6, size=m))
            codes = np.column_stack([rng.integers(0, c, size=30) for c in cards])
            ids = encode_codes(codes, cards)
            np.testing.assert_array_equal(decode_group_id(ids, cards), codes)


class TestSoftMembership:
    def test_one_hot_score_saturates(self):
        assert soft_membership(np.array([1.0]), 0.5, 0.1)[0] == 1.0
        assert soft_membership(np.array([0.0]), 0.5, 0.1)[0] == 0.0

    def test_band_midpoint(self):
        assert soft_membership(np.array([0.5]), 0.5, 0.1)[0] == pytest.approx(0.5)

    def test_interior_value(self):
        # (x - (tau - gamma)) / (2 gamma) = (0.55 - 0.4) / 0.2
        assert soft_membership(np.array([0.55]), 0.5, 0.1)[0] == pytest.approx(0.75)

    def test_hard_one_hot_recovered_for_narrow_band(self):
        scores = np.array([0.0, 1.0, 1.0, 0.0])
        out = soft_membership(scores, 0.5, 0.25)
        np.testing.assert_array_equal(out, scores)

    def test_gamma_must_be_positive(self):
        with pytest.raises(ParameterError):
            soft_membership(np.array([0.5]), 0.5, 0.0)

    def test_soft_to_hard_limit(self):
        rng = np.random.default_rng(3)
        scores = rng.uniform(0, 1, size=500)
        scores = scores[np.abs(scores - 0.5) > 1e-3]
        hard = (scores > 0.5).astype(float)
        err_prev = np.inf
        for gamma in (0.1, 0.01, 1e-4):
            err = np.max(np.abs(soft_membership(scores, 0.5, gamma) - hard))
            assert err <= err_prev + 1e-15
            err_prev = err
        assert err_prev == 0.0


class TestMarginalGroups:
    def test_marginal_ignores_other_attributes(self):
        attrs = make_attrs([[0, 0], [0, 1], [1, 0], [1, 2]], (2, 3))
        t0 = marginal_attribute_groups(attrs, 0)
        assert t0.group_count == 2
        np.testing.assert_array_equal(t0.sizes, [2, 2])
        t1 = marginal_attribute_groups(attrs, 1)
        assert t1.group_count == 3
        np.testing.assert_array_equal(t1.sizes, [2, 1, 1])

    def test_bad_attribute_index(self):
        attrs = make_attrs([[0, 0]], (2, 2))
        with pytest.raises(ValidationError):
            marginal_attribute_groups(attrs, 2)
