import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glmatch.geometry import (
    apply_homography,
    clip_segment,
    map_lines,
    quad_overlap,
    rotation_about_center,
    scaling,
    transform_pair,
    warp_image,
)
from glmatch.losses import MatchGroundTruth


def test_rotation_about_center_fixes_center():
    h = rotation_about_center(37.0, 64, 48)
    np.testing.assert_allclose(apply_homography(h, [[31.5, 23.5]]), [[31.5, 23.5]], atol=1e-12)
    np.testing.assert_allclose(apply_homography(rotation_about_center(90, 11, 11), [[10, 5]]), [[5, 10]], atol=1e-12)


@given(st.floats(-50, 150), st.floats(-50, 150), st.floats(-50, 150), st.floats(-50, 150))
def test_clip_segment_stays_inside_and_on_line(x0, y0, x1, y1):
    out = clip_segment((x0, y0, x1, y1), 100, 80)
    if out is None:
        return
    assert (out[[0, 2]] >= -1e-9).all() and (out[[0, 2]] <= 99 + 1e-9).all()
    assert (out[[1, 3]] >= -1e-9).all() and (out[[1, 3]] <= 79 + 1e-9).all()
    d = np.array([x1 - x0, y1 - y0])
    for p in (out[:2], out[2:]):
        cross = d[0] * (p[1] - y0) - d[1] * (p[0] - x0)
        assert abs(cross) <= 1e-6 * max(1.0, np.hypot(*d)) ** 2


def test_clip_segment_cases():
    np.testing.assert_array_equal(clip_segment((1, 1, 5, 5), 10, 10), [1, 1, 5, 5])
    np.testing.assert_allclose(clip_segment((-5, 2, 5, 2), 10, 10), [0, 2, 5, 2])
    assert clip_segment((-5, -5, -1, -1), 10, 10) is None


def test_map_lines_drops_short_and_outside():
    segs = np.array([[10, 10, 40, 10], [60, 60, 90, 60], [-20, 5, 15, 5]], dtype=float)
    out, kept = map_lines(np.eye(3), segs, 50, 50, min_length=8, min_keep=0.5)
    assert kept == [0]  # second leaves the frame, third keeps less than half
    np.testing.assert_array_equal(out, segs[:1])


def test_warp_image_moves_pixels_forward():
    img = np.zeros((40, 40), np.uint8)
    img[10, 12] = 255
    h = np.array([[1, 0, 5], [0, 1, 3], [0, 0, 1.0]])
    out = warp_image(img, h, (40, 40))
    assert np.unravel_index(out.argmax(), out.shape) == (13, 17)
    assert warp_image(img, np.eye(3), (40, 40)) is not img


def test_transform_pair_identity_passthrough():
    img = np.zeros((32, 32), np.uint8)
    gt = MatchGroundTruth([(0, 0)], [], [])
    out = transform_pair(img, img, [[1, 1, 20, 1]], [[2, 2, 20, 2]], gt, np.eye(3), np.eye(3))
    assert out[0] is img and out[4] is gt


def test_transform_pair_reindexes_gt():
    img = np.zeros((40, 40), np.uint8)
    la = np.array([[2, 2, 30, 2], [2, 20, 30, 20]], float)
    gt = MatchGroundTruth([(0, 0), (1, 1)], [], [])
    shift = np.array([[1, 0, 0], [0, 1, 25], [0, 0, 1.0]])  # pushes A's second line out of frame
    _, _, new_a, new_b, new_gt = transform_pair(img, img, la, la, gt, shift, np.eye(3))
    assert len(new_a) == 1 and len(new_b) == 2
    assert new_gt.pairs == [(0, 0)] and new_gt.unmatched_b == [1]


def test_quad_overlap():
    assert quad_overlap(np.eye(3), (50, 50), (50, 50)) == pytest.approx(1.0)
    half = np.array([[1, 0, 25], [0, 1, 0], [0, 0, 1.0]])
    assert quad_overlap(half, (50, 50), (50, 50)) == pytest.approx(1 / 3)
    assert quad_overlap(scaling(2.0), (10, 10), (10, 10)) == pytest.approx(0.25)
