"""Planar transforms of images and line segments, with exact ground-truth remapping."""
from __future__ import annotations

import math

import cv2
import numpy as np

from .losses import MatchGroundTruth


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = np.c_[pts, np.ones(len(pts))] @ np.asarray(h, dtype=np.float64).T
    return q[:, :2] / q[:, 2:3]


def transform_segments(h: np.ndarray, segs: np.ndarray) -> np.ndarray:
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
    if len(segs) == 0:
        return segs.copy()
    return apply_homography(h, segs.reshape(-1, 2)).reshape(-1, 4)


def clip_segment(seg, width: int, height: int):
    """Liang-Barsky clip to ``[0, width-1] x [0, height-1]``; None when nothing is left."""
    x0, y0, x1, y1 = map(float, seg)
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0), (dx, width - 1 - x0), (-dy, y0), (dy, height - 1 - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    start = (x0, y0) if t0 == 0 else (x0 + t0 * dx, y0 + t0 * dy)
    end = (x1, y1) if t1 == 1 else (x0 + t1 * dx, y0 + t1 * dy)
    return np.array([*start, *end])


def segment_lengths(segs) -> np.ndarray:
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
    return np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])


def rotation_about_center(degrees: float, width: int, height: int) -> np.ndarray:
    cx, cy = (width - 1) / 2, (height - 1) / 2
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1.0]])


def scaling(s: float) -> np.ndarray:
    return np.diag([s, s, 1.0])


def warp_image(image: np.ndarray, h: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Warp so that pixel index ``p`` of the source lands at ``h @ p``; ``size`` is (width, height)."""
    if np.allclose(h, np.eye(3)) and image.shape[1] == size[0] and image.shape[0] == size[1]:
        return image.copy()
    return cv2.warpPerspective(image, np.asarray(h, dtype=np.float64), size, flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)


def map_lines(h, segs, width: int, height: int, min_length: float = 8.0, min_keep: float = 0.5):
    """Transform and clip segments; returns (new segments, surviving original indices)."""
    moved = transform_segments(h, segs)
    full = segment_lengths(moved)
    out, kept = [], []
    for k, seg in enumerate(moved):
        clipped = clip_segment(seg, width, height)
        if clipped is None:
            continue
        length = segment_lengths(clipped)[0]
        if length < min_length or length < min_keep * full[k]:
            continue
        out.append(clipped)
        kept.append(k)
    return np.array(out, dtype=np.float64).reshape(-1, 4), kept


def transform_pair(image_a, image_b, lines_a, lines_b, gt: MatchGroundTruth, h_a, h_b, size_a=None, size_b=None, min_length: float = 8.0):
    """Apply ``h_a`` to view A and ``h_b`` to view B; lines leaving the frame are dropped
    and the ground truth is re-indexed (a partner of a dropped line becomes unmatched)."""
    size_a = size_a or (image_a.shape[1], image_a.shape[0])
    size_b = size_b or (image_b.shape[1], image_b.shape[0])
    unchanged = size_a == (image_a.shape[1], image_a.shape[0]) and size_b == (image_b.shape[1], image_b.shape[0])
    if unchanged and np.array_equal(h_a, np.eye(3)) and np.array_equal(h_b, np.eye(3)):
        return image_a, image_b, np.asarray(lines_a, dtype=np.float64), np.asarray(lines_b, dtype=np.float64), gt
    new_a = warp_image(image_a, h_a, size_a)
    new_b = warp_image(image_b, h_b, size_b)
    la, keep_a = map_lines(h_a, lines_a, *size_a, min_length=min_length)
    lb, keep_b = map_lines(h_b, lines_b, *size_b, min_length=min_length)
    return new_a, new_b, la, lb, gt.restrict(keep_a, keep_b)


def quad_overlap(h: np.ndarray, size_a: tuple[int, int], size_b: tuple[int, int]) -> float:
    """IoU between view B's frame and the image of view A's frame under ``h``."""
    wa, ha = size_a
    wb, hb = size_b
    quad = apply_homography(h, np.array([[0, 0], [wa, 0], [wa, ha], [0, ha]], dtype=np.float64)).astype(np.float32)
    frame = np.array([[0, 0], [wb, 0], [wb, hb], [0, hb]], dtype=np.float32)
    inter, _ = cv2.intersectConvexConvex(quad, frame)
    area_q = abs(cv2.contourArea(quad))
    union = area_q + wb * hb - inter
    return float(inter / union) if union > 0 else 0.0
