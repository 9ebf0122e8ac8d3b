import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loupe.errors import ContractError, DimensionError
from loupe.viz import (
    ContourSet,
    attention_iou,
    contour_pixels,
    localization_scores,
    overlay_write,
    pointing_game,
    read_ppm,
    top_fraction_mask,
    trace_contours,
    upsample_bilinear,
)

from oracles import bilinear_naive, boundary_edge_count


# ---------------------------------------------------------------- upsampling


def test_upsample_constant():
    up = upsample_bilinear(np.full((2, 1, 3, 5), 0.37), (12, 20))
    assert np.all(up == 0.37)


def test_upsample_single_source():
    up = upsample_bilinear(np.array([[[[0.8]]]]), (8, 8))
    assert up.shape == (1, 1, 8, 8) and np.all(up == 0.8)


def test_upsample_2x2_oracle():
    m = np.array([[0.1, 0.9], [0.4, 0.2]])
    up = upsample_bilinear(m[None, None], (4, 4))[0, 0]
    np.testing.assert_allclose(up, bilinear_naive(m, 4, 4), atol=1e-9)
    # first row by hand: clamped, quarter, three-quarter, clamped
    np.testing.assert_allclose(up[0], [0.1, 0.3, 0.7, 0.9], atol=1e-12)


def test_upsample_rejects_downscale():
    with pytest.raises(ContractError):
        upsample_bilinear(np.zeros((1, 1, 8, 8)), (4, 8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_upsample_bounds(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 7, 2)
    m = rng.random((1, 1, h, w))
    up = upsample_bilinear(m, (h * int(rng.integers(1, 5)), w + int(rng.integers(0, 9))))
    assert up.min() >= m.min() - 1e-15 and up.max() <= m.max() + 1e-15


# ---------------------------------------------------------------- top fraction


def test_top_fraction_all():
    assert top_fraction_mask(np.random.default_rng(0).random((7, 9)), 1.0).all()


def test_top_fraction_three_largest():
    m = np.arange(100, dtype=float).reshape(10, 10)
    mask = top_fraction_mask(m, 0.03)
    assert mask.sum() == 3
    assert mask[9, 7:].all()


def test_top_fraction_constant_ties():
    mask = top_fraction_mask(np.zeros((10, 10)), 0.05)
    assert mask.reshape(-1)[:5].all() and mask.sum() == 5


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_top_fraction_range(bad):
    with pytest.raises(ContractError):
        top_fraction_mask(np.zeros((4, 4)), bad)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.sampled_from([0.01, 0.05, 0.5, 1.0]), st.integers(0, 1000))
def test_top_fraction_popcount(h, w, f, seed):
    m = np.random.default_rng(seed).integers(0, 4, (h, w)).astype(float)
    assert top_fraction_mask(m, f).sum() == math.ceil(f * h * w - 1e-9)


# ---------------------------------------------------------------- contours


def test_single_pixel_contour():
    mask = np.zeros((5, 5), dtype=np.uint8)
    mask[2, 3] = 1
    cs = trace_contours(mask)
    assert len(cs) == 1 and cs.total_length() == 4
    poly = cs.polylines[0]
    assert poly[0] == poly[-1]
    assert set(poly) == {(1.5, 2.5), (1.5, 3.5), (2.5, 3.5), (2.5, 2.5)}


def test_full_mask_contour():
    cs = trace_contours(np.ones((6, 4), dtype=np.uint8))
    assert len(cs) == 1 and cs.total_length() == 2 * (6 + 4)
    pts = cs.polylines[0]
    rows = {p[0] for p in pts}
    cols = {p[1] for p in pts}
    assert min(rows) == -0.5 and max(rows) == 5.5 and min(cols) == -0.5 and max(cols) == 3.5


def test_empty_mask_no_contours():
    assert len(trace_contours(np.zeros((4, 4)))) == 0


def test_ring_has_two_contours():
    m = np.ones((5, 5), dtype=np.uint8)
    m[2, 2] = 0
    cs = trace_contours(m)
    assert len(cs) == 2 and cs.total_length() == 20 + 4


def _check_polylines(cs):
    for poly in cs.polylines:
        assert poly[0] == poly[-1]
        for a, b in zip(poly[:-1], poly[1:]):
            assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1
            assert (a[0] - 0.5) % 1 == 0 and (a[1] - 0.5) % 1 == 0


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_contour_length_oracle(seed, density):
    m = (np.random.default_rng(seed).random((8, 8)) < density).astype(np.uint8)
    cs = trace_contours(m)
    assert cs.total_length() == boundary_edge_count(m)
    _check_polylines(cs)
    if m.any():
        assert len(cs) >= 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contour_of_top_fraction(seed):
    rng = np.random.default_rng(seed)
    m = top_fraction_mask(rng.random((16, 16)), float(rng.choice([0.05, 0.2, 0.5])))
    assert trace_contours(m).total_length() == boundary_edge_count(m)


def test_contour_pixels_on_foreground():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[1:4, 2:5] = 1
    px = contour_pixels(trace_contours(m), m.shape)
    want = m.astype(bool).copy()
    want[2, 3] = False  # interior pixel
    np.testing.assert_array_equal(px, want)


# ---------------------------------------------------------------- PPM overlay


def test_overlay_empty_is_identity(tmp_path):
    img = np.random.default_rng(0).random((3, 5, 7))
    p = tmp_path / "a.ppm"
    overlay_write(img, ContourSet(), p)
    raw = p.read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(read_ppm(p), np.rint(255 * img).astype(np.uint8).transpose(1, 2, 0))


def test_overlay_green_and_deterministic(tmp_path):
    img = np.full((3, 8, 8), 0.5)
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:4, 2:4] = 1
    cs = trace_contours(m)
    overlay_write(img, cs, tmp_path / "a.ppm")
    overlay_write(img, cs, tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    rgb = read_ppm(tmp_path / "a.ppm")
    assert tuple(rgb[2, 2]) == (0, 255, 0)
    assert tuple(rgb[0, 0]) == (128, 128, 128)
    assert not list((tmp_path).glob("*.tmp"))


def test_overlay_range_check(tmp_path):
    with pytest.raises(ContractError):
        overlay_write(np.full((3, 2, 2), 1.5), ContourSet(), tmp_path / "x.ppm")


def test_overlay_unwritable(tmp_path):
    with pytest.raises(OSError):
        overlay_write(np.zeros((3, 2, 2)), ContourSet(), tmp_path / "missing" / "x.ppm")


# ---------------------------------------------------------------- localization metrics


def test_pointing_game_cases():
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:4, 2:4] = 1
    m = np.zeros((8, 8))
    m[3, 3] = 1
    assert pointing_game(m, gt)
    m = np.zeros((8, 8))
    m[6, 6] = 1
    assert not pointing_game(m, gt)
    assert not pointing_game(np.ones((8, 8)), gt)
    gt[0, 0] = 1
    assert pointing_game(np.ones((8, 8)), gt)


def test_pointing_game_shape_check():
    with pytest.raises(DimensionError):
        pointing_game(np.zeros((4, 4)), np.zeros((4, 5)))


def test_iou_cases():
    a = np.zeros((4, 4), dtype=bool)
    a[:2] = True
    assert attention_iou(a, a) == 1.0
    assert attention_iou(a, ~a) == 0.0
    b = np.zeros((4, 4), dtype=bool)
    b[1:3] = True
    assert attention_iou(a, b) == pytest.approx(1 / 3)
    assert attention_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    with pytest.raises(DimensionError):
        attention_iou(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    maps = rng.random((3, 1, 8, 8))
    masks = np.zeros((3, 32, 32), dtype=np.uint8)
    for i in range(3):
        r, c = rng.integers(0, 24, 2)
        masks[i, r:r + 8, c:c + 8] = 1
    a = localization_scores(maps, masks)
    # a strictly monotone transform applied after upsampling leaves both metrics unchanged
    up = upsample_bilinear(maps, (32, 32))[:, 0]
    for i in range(3):
        t = np.exp(3 * up[i]) - 7
        assert pointing_game(t, masks[i]) == bool(a["hit"][i])
        assert attention_iou(top_fraction_mask(t, 0.05), masks[i]) == a["iou"][i]
