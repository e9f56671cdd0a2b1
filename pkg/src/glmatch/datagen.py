"""Training and evaluation data: synthetic homography pairs, depth-based labelling,
pair filtering and the JSON-lines manifest."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import cv2
import numpy as np

from .geometry import apply_homography, clip_segment, map_lines, quad_overlap, segment_lengths, transform_segments, warp_image
from .losses import MatchGroundTruth


class ManifestError(ValueError):
    pass


@dataclass
class ImagePairRecord:
    """One image pair with lines and ground truth.

    ``image_a``/``image_b`` are either paths (as read from a manifest) or
    in-memory uint8 arrays (freshly generated or loaded).
    """

    image_a: object
    image_b: object
    lines_a: np.ndarray
    lines_b: np.ndarray
    gt: MatchGroundTruth
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lines_a = np.asarray(self.lines_a, dtype=np.float64).reshape(-1, 4)
        self.lines_b = np.asarray(self.lines_b, dtype=np.float64).reshape(-1, 4)

    def validate(self) -> None:
        self.gt.validate(len(self.lines_a), len(self.lines_b))

    def load(self, root: str | Path | None = None) -> "ImagePairRecord":
        """Copy of the record with both images as arrays."""
        def _read(img):
            if isinstance(img, np.ndarray):
                return img
            path = Path(img) if root is None else Path(root) / img
            arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
            if arr is None:
                raise FileNotFoundError(path)
            return arr

        return ImagePairRecord(_read(self.image_a), _read(self.image_b), self.lines_a.copy(), self.lines_b.copy(), self.gt, dict(self.meta))

    @property
    def ratio(self) -> float:
        """Matches over non-matches (unmatched lines of both images)."""
        non = len(self.gt.unmatched_a) + len(self.gt.unmatched_b)
        return math.inf if non == 0 else len(self.gt.pairs) / non


# ---------------------------------------------------------------- synthetic pairs


@dataclass
class WarpConfig:
    size: int = 128
    max_rotation: float = 15.0  # degrees
    scale_range: tuple[float, float] = (0.85, 1.15)
    max_translation: float = 0.08  # fraction of the image size
    max_perspective: float = 4e-4
    identity: bool = False
    lines_range: tuple[int, int] = (14, 24)
    length_range: tuple[float, float] = (14.0, 48.0)
    ratio_range: tuple[float, float] = (0.5, 1.5)
    dropout: float | None = None  # None: sample a match/non-match ratio instead
    fragment_prob: float = 0.3
    fragment_max: float = 0.2
    noise: float = 3.0
    shuffle: bool = True


def sample_homography(rng: np.random.Generator, cfg: WarpConfig) -> np.ndarray:
    if cfg.identity:
        return np.eye(3)
    s = cfg.size
    c = (s - 1) / 2
    for _ in range(100):
        th = math.radians(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
        sc = rng.uniform(*cfg.scale_range)
        tx, ty = rng.uniform(-cfg.max_translation, cfg.max_translation, 2) * s
        px, py = rng.uniform(-cfg.max_perspective, cfg.max_perspective, 2)
        to_c = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
        rot = np.array([[sc * math.cos(th), -sc * math.sin(th), 0], [sc * math.sin(th), sc * math.cos(th), 0], [px, py, 1]])
        back = np.array([[1, 0, c + tx], [0, 1, c + ty], [0, 0, 1.0]])
        h = back @ rot @ to_c
        h /= h[2, 2]
        corners = apply_homography(h, np.array([[0, 0], [s, 0], [s, s], [0, s]], dtype=float))
        if abs(np.linalg.det(h[:2, :2])) > 0.3 and cv2.isContourConvex(corners.astype(np.float32)):
            return h
    raise RuntimeError("could not sample a non-degenerate homography")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    g = rng.uniform(60, 190) + rng.uniform(-40, 40) * xx / size + rng.uniform(-40, 40) * yy / size
    img = np.clip(g, 0, 255).astype(np.uint8)
    for _ in range(rng.integers(3, 7)):
        k = int(rng.integers(3, 6))
        center = rng.uniform(0, size, 2)
        radius = rng.uniform(size * 0.1, size * 0.35)
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        poly = np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], 1)
        cv2.fillPoly(img, [poly.round().astype(np.int32)], int(rng.integers(30, 225)), lineType=cv2.LINE_AA)
    return cv2.GaussianBlur(img, (0, 0), 1.0)


def _random_segments(rng: np.random.Generator, count: int, size: int, length_range, margin: float = 3.0) -> np.ndarray:
    segs = []
    while len(segs) < count:
        length = rng.uniform(*length_range)
        ang = rng.uniform(0, np.pi)
        x0, y0 = rng.uniform(margin, size - 1 - margin, 2)
        x1, y1 = x0 + length * math.cos(ang), y0 + length * math.sin(ang)
        if margin <= x1 <= size - 1 - margin and margin <= y1 <= size - 1 - margin:
            segs.append((x0, y0, x1, y1))
    return np.array(segs, dtype=np.float64).reshape(-1, 4)


def _line_style(rng: np.random.Generator) -> tuple[int, int]:
    dark = rng.random() < 0.5
    value = int(rng.integers(0, 50)) if dark else int(rng.integers(205, 256))
    return value, int(rng.integers(1, 3))


def _draw_segment(img: np.ndarray, seg, value: int, thickness: int) -> None:
    pts = np.round(np.asarray(seg) * 16).astype(np.int64)
    cv2.line(img, (int(pts[0]), int(pts[1])), (int(pts[2]), int(pts[3])), value, thickness, cv2.LINE_AA, 4)


def generate_synthetic_pair(base_image: np.ndarray | None = None, seed: int = 0, cfg: WarpConfig | None = None) -> ImagePairRecord:
    """Render a line-rich scene (or use ``base_image``) in view A, warp it by a random
    homography into view B, and label correspondences exactly.

    Lines are emitted directly; the ground truth follows from the homography.
    Matched lines may be clipped or shortened in B (fragmentation).
    """
    cfg = cfg or WarpConfig()
    rng = np.random.default_rng(seed)
    s = cfg.size
    h = sample_homography(rng, cfg)
    background = _background(rng, s) if base_image is None else np.asarray(base_image, dtype=np.uint8)
    if background.shape[:2] != (s, s):
        background = cv2.resize(background, (s, s), interpolation=cv2.INTER_AREA)
    if background.ndim == 3:
        background = cv2.cvtColor(background, cv2.COLOR_BGR2GRAY)

    candidates = _random_segments(rng, int(rng.integers(*cfg.lines_range, endpoint=True)) * 2, s, cfg.length_range)
    mapped, visible = map_lines(h, candidates, s, s, min_length=10.0, min_keep=0.6)
    mapped_of = dict(zip(visible, mapped))
    invisible = [k for k in range(len(candidates)) if k not in mapped_of]
    total = len(candidates) // 2

    if cfg.dropout is not None:
        chosen = list(range(total))
        drop = {k for k in chosen if k in mapped_of and rng.random() < cfg.dropout}
        matched = [k for k in chosen if k in mapped_of and k not in drop]
        a_only = [k for k in chosen if k not in matched]
        n_distract = 0
        ratio = None
    else:
        ratio = float(rng.uniform(*cfg.ratio_range))
        n_match = min(len(visible), max(1, round(total * ratio / (1 + ratio))))
        n_non = max(1, round(n_match / ratio))
        vis = list(visible)
        rng.shuffle(vis)
        matched = sorted(vis[:n_match])
        inv = invisible[: max(0, n_non // 3)]
        n_drop = min(len(vis) - n_match, max(0, (n_non - len(inv)) // 2))
        dropped = vis[n_match:n_match + n_drop]
        a_only = sorted(inv + dropped)
        n_distract = max(0, n_non - len(a_only))
    lines_a_idx = sorted(matched + a_only)

    styles = {k: _line_style(rng) for k in lines_a_idx}
    world_a = background.copy()
    world_b = background.copy()
    for k in lines_a_idx:
        _draw_segment(world_a, candidates[k], *styles[k])
        if k in matched:
            _draw_segment(world_b, candidates[k], *styles[k])

    img_b = warp_image(world_b, h, (s, s))
    lines_b = []
    for k in matched:
        seg = mapped_of[k].copy()
        if rng.random() < cfg.fragment_prob:
            t0, t1 = rng.uniform(0, cfg.fragment_max, 2)
            d = seg[2:] - seg[:2]
            seg = np.r_[seg[:2] + t0 * d, seg[2:] - t1 * d]
        lines_b.append(seg)
    distract = _random_segments(rng, n_distract, s, cfg.length_range) if n_distract else np.zeros((0, 4))
    for seg in distract:
        _draw_segment(img_b, seg, *_line_style(rng))
    lines_b = np.array(lines_b + list(distract), dtype=np.float64).reshape(-1, 4)

    order_b = rng.permutation(len(lines_b)) if cfg.shuffle else np.arange(len(lines_b))
    lines_b = lines_b[order_b]
    pos_b = {int(old): new for new, old in enumerate(order_b)}
    pos_a = {k: i for i, k in enumerate(lines_a_idx)}
    pairs = sorted((pos_a[k], pos_b[r]) for r, k in enumerate(matched))
    gt = MatchGroundTruth(
        pairs,
        sorted(pos_a[k] for k in a_only),
        sorted(pos_b[r] for r in range(len(matched), len(lines_b))),
    )

    img_a = world_a
    if cfg.noise > 0:
        img_a = np.clip(img_a + rng.normal(0, cfg.noise, img_a.shape), 0, 255).astype(np.uint8)
        img_b = np.clip(img_b + rng.normal(0, cfg.noise, img_b.shape), 0, 255).astype(np.uint8)
    meta = {
        "seed": int(seed),
        "homography": h.tolist(),
        "overlap": quad_overlap(h, (s, s), (s, s)),
        "target_ratio": ratio,
        "dropout": cfg.dropout,
    }
    return ImagePairRecord(img_a, img_b, candidates[lines_a_idx], lines_b, gt, meta)


# ---------------------------------------------------------------- depth labelling


@dataclass
class CameraModel:
    """Pinhole camera with world-to-camera pose ``x_cam = R x_world + t`` and a depth map."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if abs(self.K[1, 0]) + abs(self.K[2, 0]) + abs(self.K[2, 1]) > 0 or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must be upper-triangular with positive focal lengths")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("R is not orthonormal")

    def backproject(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points for pixel positions plus a validity mask (depth > 0, inside the map)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        h, w = self.depth.shape
        xi = np.round(pts[:, 0]).astype(int)
        yi = np.round(pts[:, 1]).astype(int)
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        z = np.zeros(len(pts))
        z[inside] = self.depth[yi[inside], xi[inside]]
        valid = inside & np.isfinite(z) & (z > 0)
        rays = np.linalg.solve(self.K, np.c_[pts, np.ones(len(pts))].T).T
        cam = rays * z[:, None]
        world = (cam - self.t) @ self.R  # R^T (x - t)
        return world, valid

    def project(self, world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cam = np.asarray(world, dtype=np.float64) @ self.R.T + self.t
        front = cam[:, 2] > 1e-9
        q = cam @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = q[:, :2] / q[:, 2:3]
        return pix, front


@dataclass
class DepthLabelStats:
    no_depth: int = 0
    behind_camera: int = 0


def _fit_segment(pts: np.ndarray) -> np.ndarray:
    """Least-squares line through points, clipped to the extent of their projections."""
    center = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - center)
    d = vt[0]
    proj = (pts - center) @ d
    return np.r_[center + proj.min() * d, center + proj.max() * d]


def _angle_deg(sa, sb) -> float:
    da = np.asarray(sa[2:]) - np.asarray(sa[:2])
    db = np.asarray(sb[2:]) - np.asarray(sb[:2])
    c = abs(float(da @ db)) / (np.linalg.norm(da) * np.linalg.norm(db))
    return math.degrees(math.acos(min(1.0, c)))


def _overlap_and_distance(sa, sb) -> tuple[float, float]:
    """Mutual overlap (shorter of the two overlap fractions) along ``sa``'s direction and
    the mean distance of ``sb``'s endpoints to the infinite line through ``sa``."""
    p = np.asarray(sa[:2])
    d = np.asarray(sa[2:]) - p
    la = float(np.linalg.norm(d))
    d = d / la
    normal = np.array([-d[1], d[0]])
    tb = sorted([float((np.asarray(sb[:2]) - p) @ d), float((np.asarray(sb[2:]) - p) @ d)])
    inter = max(0.0, min(la, tb[1]) - max(0.0, tb[0]))
    lb = float(np.hypot(sb[2] - sb[0], sb[3] - sb[1]))
    overlap = min(inter / la, inter / lb) if la > 0 and lb > 0 else 0.0
    dist = (abs(float((np.asarray(sb[:2]) - p) @ normal)) + abs(float((np.asarray(sb[2:]) - p) @ normal))) / 2
    return overlap, dist


def label_matches_from_depth(
    lines_a,
    lines_b,
    cam_a: CameraModel,
    cam_b: CameraModel,
    angle_thresh: float = 5.0,
    overlap_thresh: float = 0.5,
    dist_thresh: float = 3.0,
    samples: int = 16,
    stats: DepthLabelStats | None = None,
) -> MatchGroundTruth:
    """Reproject each line of A through its depth into B and pair it with a nearby,
    parallel, overlapping line of B. Greedy one-to-one by overlap, lower index on ties."""
    la = np.asarray(lines_a, dtype=np.float64).reshape(-1, 4)
    lb = np.asarray(lines_b, dtype=np.float64).reshape(-1, 4)
    stats = stats if stats is not None else DepthLabelStats()
    candidates = []
    t = np.linspace(0, 1, samples)
    for i, seg in enumerate(la):
        pts = seg[:2] + t[:, None] * (seg[2:] - seg[:2])
        world, valid = cam_a.backproject(pts)
        if valid.sum() < 2:
            stats.no_depth += 1
            continue
        pix, front = cam_b.project(world[valid])
        if front.sum() < 2:
            stats.behind_camera += 1
            continue
        projected = _fit_segment(pix[front])
        if np.hypot(*(projected[2:] - projected[:2])) < 1e-6:
            continue
        for j, other in enumerate(lb):
            if _angle_deg(projected, other) >= angle_thresh:
                continue
            overlap, dist = _overlap_and_distance(projected, other)
            if dist <= dist_thresh and overlap > overlap_thresh:
                candidates.append((-overlap, i, j))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_a and j not in used_b:
            pairs.append((i, j))
            used_a.add(i)
            used_b.add(j)
    pairs.sort()
    return MatchGroundTruth(pairs, [i for i in range(len(la)) if i not in used_a], [j for j in range(len(lb)) if j not in used_b])


def fronto_parallel_scene(
    rng: np.random.Generator,
    n_lines: int = 30,
    size: tuple[int, int] = (160, 120),
    focal: float = 150.0,
    depth: float = 4.0,
    baseline: float = 0.3,
    distractors: int = 5,
):
    """Two cameras looking at a plane ``Z = depth``; B is translated along x by ``baseline``.

    Returns (lines_a, lines_b, cam_a, cam_b, true_pairs). B's lines are the exact
    projections of A's visible lines (shuffled) plus random distractors.
    """
    w, h = size
    k = np.array([[focal, 0, (w - 1) / 2], [0, focal, (h - 1) / 2], [0, 0, 1.0]])
    dmap = np.full((h, w), depth)
    cam_a = CameraModel(k, np.eye(3), np.zeros(3), dmap)
    cam_b = CameraModel(k, np.eye(3), np.array([-baseline, 0, 0]), dmap)
    shift = focal * baseline / depth
    lines_a = _random_segments(rng, n_lines, min(w, h), (12.0, 40.0))
    lines_a[:, [0, 2]] += rng.uniform(0, w - min(w, h))
    projected = lines_a - np.array([shift, 0, shift, 0])
    visible = [i for i, s in enumerate(projected) if (s[[0, 2]] >= 0).all() and (s[[0, 2]] <= w - 1).all()]
    extra = _random_segments(rng, distractors, min(w, h), (12.0, 40.0))
    pool = [projected[i] for i in visible] + list(extra)
    order = rng.permutation(len(pool))
    lines_b = np.array(pool)[order]
    where = {int(old): new for new, old in enumerate(order)}
    pairs = sorted((i, where[r]) for r, i in enumerate(visible))
    return lines_a, lines_b, cam_a, cam_b, pairs


# ---------------------------------------------------------------- filtering


def filter_pairs(record: ImagePairRecord, min_matches: int = 5, max_overlap: float = 0.9, ratio_bounds=(0.5, 1.5)) -> bool:
    """True to keep the pair. Overlap is read from ``meta['overlap']`` when present."""
    n_match = len(record.gt.pairs)
    if n_match == 0 or n_match < min_matches:
        return False
    overlap = record.meta.get("overlap")
    if overlap is not None and overlap > max_overlap:
        return False
    lo, hi = ratio_bounds
    return lo <= record.ratio <= hi


# ---------------------------------------------------------------- manifest IO

_RECORD_KEYS = {"image_a", "image_b", "lines_a", "lines_b", "gt", "meta"}


def record_to_json(record: ImagePairRecord, image_a: str, image_b: str) -> dict:
    return {
        "image_a": image_a,
        "image_b": image_b,
        "lines_a": record.lines_a.tolist(),
        "lines_b": record.lines_b.tolist(),
        "gt": record.gt.to_dict(),
        "meta": record.meta,
    }


def record_from_json(obj, lineno: int = 0) -> ImagePairRecord:
    def fail(msg):
        raise ManifestError(f"line {lineno}: {msg}")

    if not isinstance(obj, dict):
        fail("record is not a JSON object")
    missing = _RECORD_KEYS - set(obj) - {"meta"}
    if missing:
        fail(f"missing keys {sorted(missing)}")
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        fail(f"unknown keys {sorted(unknown)}")
    for key in ("image_a", "image_b"):
        if not isinstance(obj[key], str):
            fail(f"{key} must be a path string")
    lines = {}
    for key in ("lines_a", "lines_b"):
        try:
            arr = np.asarray(obj[key], dtype=np.float64).reshape(-1, 4)
        except (TypeError, ValueError):
            fail(f"{key} must be a list of [x0, y0, x1, y1]")
        if len(obj[key]) and (not isinstance(obj[key][0], list) or len(obj[key]) != len(arr)):
            fail(f"{key} must be a list of [x0, y0, x1, y1]")
        lines[key] = arr
    gt_obj = obj["gt"]
    if not isinstance(gt_obj, dict) or {"pairs", "unmatched_a", "unmatched_b"} - set(gt_obj):
        fail("gt must hold pairs, unmatched_a and unmatched_b")
    try:
        gt = MatchGroundTruth.from_dict(gt_obj)
        rec = ImagePairRecord(obj["image_a"], obj["image_b"], lines["lines_a"], lines["lines_b"], gt, obj.get("meta", {}))
        rec.validate()
    except (TypeError, ValueError) as exc:
        fail(str(exc))
    return rec


def iter_manifest(path: str | Path) -> Iterator[ImagePairRecord]:
    """Stream records one line at a time; image paths stay relative to the manifest."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            yield record_from_json(obj, lineno)


def read_manifest(path: str | Path) -> list[ImagePairRecord]:
    return list(iter_manifest(path))


def write_manifest(records: Iterable[ImagePairRecord], path: str | Path, image_dir: str = "images") -> int:
    """Write records as JSON lines; in-memory images are saved as PNG next to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for k, rec in enumerate(records):
            names = []
            for side, img in (("a", rec.image_a), ("b", rec.image_b)):
                if isinstance(img, np.ndarray):
                    rel = f"{image_dir}/{k:06d}_{side}.png"
                    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
                    if not cv2.imwrite(str(path.parent / rel), img):
                        raise OSError(f"could not write {path.parent / rel}")
                    names.append(rel)
                else:
                    names.append(str(img))
            fh.write(json.dumps(record_to_json(rec, *names), sort_keys=True) + "\n")
            count += 1
    return count
