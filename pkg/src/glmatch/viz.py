"""Match overlays: matched lines blue, unmatched yellow; against ground truth,
correct pairs green and wrong pairs red."""
from __future__ import annotations

import cv2
import numpy as np

from .losses import MatchGroundTruth
from .transport import MatchSet

# BGR
COLORS = {
    "blue": (255, 0, 0),
    "yellow": (0, 255, 255),
    "green": (0, 200, 0),
    "red": (0, 0, 255),
}


def overlay_strokes(lines_a, lines_b, matches: MatchSet, gt: MatchGroundTruth | None = None) -> list[tuple[str, np.ndarray, str]]:
    """(side, segment, colour name) for every line of both images."""
    truth = set(map(tuple, gt.pairs)) if gt is not None else None
    color_a, color_b = {}, {}
    for i, j, _ in matches.matches:
        if truth is None:
            c = "blue"
        else:
            c = "green" if (i, j) in truth else "red"
        color_a[i] = color_b[j] = c
    strokes = [("a", np.asarray(seg), color_a.get(k, "yellow")) for k, seg in enumerate(np.asarray(lines_a).reshape(-1, 4))]
    strokes += [("b", np.asarray(seg), color_b.get(k, "yellow")) for k, seg in enumerate(np.asarray(lines_b).reshape(-1, 4))]
    return strokes


def render_overlay(image_a: np.ndarray, image_b: np.ndarray, strokes) -> np.ndarray:
    """Side-by-side BGR canvas with anti-aliased 2 px strokes."""
    def bgr(img):
        return cv2.cvtColor(img, cv2.COLOR_GRAY2BGR) if img.ndim == 2 else img.copy()

    a, b = bgr(image_a), bgr(image_b)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3), dtype=np.uint8)
    canvas[: a.shape[0], : a.shape[1]] = a
    canvas[: b.shape[0], a.shape[1]:] = b
    for side, seg, color in strokes:
        dx = 0 if side == "a" else a.shape[1]
        p = np.round((np.asarray(seg) + [dx, 0, dx, 0]) * 16).astype(np.int64)
        cv2.line(canvas, (int(p[0]), int(p[1])), (int(p[2]), int(p[3])), COLORS[color], 2, cv2.LINE_AA, 4)
    return canvas
