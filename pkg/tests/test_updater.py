import numpy as np
import pytest
from conftest import random_image, random_map
from hypothesis import given, settings
from hypothesis import strategies as st
from test_densecrf import crf_loop_oracle

from weaksal.densecrf import CrfParams, mean_field_refine
from weaksal.errors import ConfigError, DimensionMismatch
from weaksal.imagecore import Image, SaliencyMap
from weaksal.metrics import mae
from weaksal.updater import (
    DISCARD,
    KEEP_ANNOTATION,
    KEEP_MERGED,
    KEEP_PREDICTION,
    AnnotationBundle,
    UpdaterThresholds,
    prepare_bundle,
    update_annotation,
)

T = UpdaterThresholds()
UNARY_ONLY = CrfParams(w_bilateral=0.0, w_spatial=0.0, iterations=1)


def two_pixel(a, b):
    return SaliencyMap(np.array([[a, b]]))


def bundle_from(anno, pred, cam):
    """Bundle whose refined maps are given directly; raw maps equal the refined ones."""
    return AnnotationBundle(anno, pred, cam, anno, pred, cam)


IMG2 = Image(np.zeros((1, 2, 3), np.uint8))


def test_thresholds_default_to_eight_bit_values():
    assert T.alpha == 15 / 255 and T.beta == 40 / 255
    for bad in [(0.0, 0.5), (0.5, 0.4), (0.2, 1.0), (0.3, 0.3)]:
        with pytest.raises(ConfigError):
            UpdaterThresholds(*bad).validate()


def test_branch1_identical_maps_keep_crf_of_average():
    m = two_pixel(0.25, 0.75)
    cam = two_pixel(0.9, 0.1)
    d = update_annotation(IMG2, bundle_from(m, m, cam), T, UNARY_ONLY)
    assert d.branch == KEEP_MERGED and d.mae_anno_predict == 0.0
    expect = mean_field_refine(IMG2, SaliencyMap((m.values + m.values) / 2), UNARY_ONLY)
    np.testing.assert_array_equal(d.s_update.values, expect.values)


def test_branch1_uses_raw_maps_for_the_average(rng):
    img = random_image(rng, 5, 6)
    s_anno, s_pred, s_cam = (random_map(rng, 5, 6) for _ in range(3))
    # refined maps close enough to merge, raw maps differ
    crf_a = SaliencyMap(np.full((5, 6), 0.50))
    crf_p = SaliencyMap(np.full((5, 6), 0.52))
    b = AnnotationBundle(s_anno, s_pred, s_cam, crf_a, crf_p, s_cam)
    crf = CrfParams(iterations=3)
    d = update_annotation(img, b, T, crf)
    assert d.branch == KEEP_MERGED
    expect = mean_field_refine(img, SaliencyMap((s_anno.values + s_pred.values) / 2), crf)
    np.testing.assert_array_equal(d.s_update.values, expect.values)


def test_branch2_discard_with_crafted_distances():
    anno, pred, cam = two_pixel(0.3, 0.3), two_pixel(0.5, 0.5), two_pixel(0.85, 0.35)
    d = update_annotation(IMG2, bundle_from(anno, pred, cam), T, UNARY_ONLY)
    assert (d.mae_anno_predict, d.mae_anno_cam, d.mae_predict_cam) == pytest.approx((0.20, 0.30, 0.25))
    assert d.branch == DISCARD and not d.keep and d.s_update is None


def test_branch3_keep_annotation_with_crafted_distances():
    anno, pred, cam = two_pixel(0.3, 0.3), two_pixel(0.5, 0.5), two_pixel(0.48, 0.28)
    d = update_annotation(IMG2, bundle_from(anno, pred, cam), T, UNARY_ONLY)
    assert (d.mae_anno_predict, d.mae_anno_cam, d.mae_predict_cam) == pytest.approx((0.20, 0.10, 0.12))
    assert d.branch == KEEP_ANNOTATION
    assert d.s_update is anno


def test_branch4_keep_prediction():
    anno, pred, cam = SaliencyMap(np.full((2, 2), 0.2)), SaliencyMap(np.full((2, 2), 0.6)), SaliencyMap(
        np.full((2, 2), 0.7))
    d = update_annotation(Image(np.zeros((2, 2, 3), np.uint8)), bundle_from(anno, pred, cam), T, UNARY_ONLY)
    assert d.branch == KEEP_PREDICTION and d.s_update is pred


def test_branch3_tie_goes_to_annotation():
    # dyadic constants make both CAM distances exactly 0.125
    anno, pred, cam = (SaliencyMap(np.full((2, 3), v)) for v in (0.375, 0.625, 0.5))
    d = update_annotation(Image(np.zeros((2, 3, 3), np.uint8)), bundle_from(anno, pred, cam), T, UNARY_ONLY)
    assert d.mae_anno_cam == d.mae_predict_cam == 0.125
    assert d.branch == KEEP_ANNOTATION and d.s_update is anno


def test_alpha_boundary_is_inclusive():
    t = UpdaterThresholds(alpha=0.25, beta=0.5)
    anno, pred, cam = (SaliencyMap(np.full((1, 1), v)) for v in (0.25, 0.5, 0.0))
    d = update_annotation(Image(np.zeros((1, 1, 3), np.uint8)), bundle_from(anno, pred, cam), t, UNARY_ONLY)
    assert d.mae_anno_predict == 0.25 and d.branch == KEEP_MERGED


def test_beta_boundary_is_not_discard():
    t = UpdaterThresholds(alpha=0.125, beta=0.25)
    anno, pred, cam = (SaliencyMap(np.full((1, 1), v)) for v in (0.25, 0.75, 0.5))
    d = update_annotation(Image(np.zeros((1, 1, 3), np.uint8)), bundle_from(anno, pred, cam), t, UNARY_ONLY)
    assert d.mae_anno_cam == d.mae_predict_cam == 0.25
    assert d.branch == KEEP_ANNOTATION


def reference_branch(d_ap, d_ac, d_pc, t):
    if d_ap <= t.alpha:
        return 1
    if d_ac > t.beta and d_pc > t.beta:
        return 2
    return 3 if d_ac <= d_pc else 4


unit = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(a=st.lists(unit, min_size=2, max_size=2), p=st.lists(unit, min_size=2, max_size=2),
       c=st.lists(unit, min_size=2, max_size=2))
def test_exactly_one_branch_and_swap_symmetry(a, p, c):
    anno, pred, cam = two_pixel(*a), two_pixel(*p), two_pixel(*c)
    d = update_annotation(IMG2, bundle_from(anno, pred, cam), T, UNARY_ONLY)
    assert d.branch == reference_branch(mae(anno, pred), mae(anno, cam), mae(pred, cam), T)
    assert (d.s_update is None) == (d.branch == DISCARD)
    s = update_annotation(IMG2, bundle_from(pred, anno, cam), T, UNARY_ONLY)
    if d.branch in (KEEP_MERGED, DISCARD):
        assert s.branch == d.branch
    elif d.mae_anno_cam != d.mae_predict_cam:
        assert {d.branch, s.branch} == {KEEP_ANNOTATION, KEEP_PREDICTION}
        assert d.s_update is s.s_update
    else:
        assert d.branch == s.branch == KEEP_ANNOTATION


def test_prepare_bundle_unary_only_is_clamped_map(rng):
    img = random_image(rng, 4, 5)
    maps = [random_map(rng, 4, 5) for _ in range(3)]
    b = prepare_bundle(img, *maps, UNARY_ONLY)
    for raw, ref in zip(maps, (b.crf_anno, b.crf_predict, b.crf_cam)):
        p = np.clip(raw.values, 1e-5, 1 - 1e-5)
        q = np.clip(1 - raw.values, 1e-5, 1 - 1e-5)
        np.testing.assert_allclose(ref.values, p / (p + q), atol=1e-12)
    assert all(m.shape == img.shape for m in (b.s_anno, b.crf_anno, b.crf_predict, b.crf_cam))


def test_prepare_bundle_matches_crf_oracle_6x6():
    r = np.random.default_rng(606)
    img = random_image(r, 6, 6)
    maps = [random_map(r, 6, 6) for _ in range(3)]
    crf = CrfParams()
    b = prepare_bundle(img, *maps, crf, method="lattice")
    for raw, ref in zip(maps, (b.crf_anno, b.crf_predict, b.crf_cam)):
        assert np.abs(ref.values - crf_loop_oracle(img, raw, crf)).max() <= 1e-2


def test_dimension_mismatch(rng):
    img = random_image(rng, 4, 4)
    m = random_map(rng, 4, 4)
    with pytest.raises(DimensionMismatch):
        prepare_bundle(img, m, random_map(rng, 4, 5), m, UNARY_ONLY)
    with pytest.raises(DimensionMismatch):
        AnnotationBundle(m, m, m, m, m, random_map(rng, 3, 4))
    with pytest.raises(DimensionMismatch):
        update_annotation(random_image(rng, 5, 4), bundle_from(m, m, m), T, UNARY_ONLY)


def test_audit_line_lists_branch_and_distances():
    anno, pred, cam = two_pixel(0.3, 0.3), two_pixel(0.5, 0.5), two_pixel(0.85, 0.35)
    line = update_annotation(IMG2, bundle_from(anno, pred, cam), T, UNARY_ONLY).audit_line("img7")
    fields = line.split("\t")
    assert fields[:3] == ["img7", "branch=2", "discard"]
    assert fields[3] == "mae_anno_predict=0.200000"
