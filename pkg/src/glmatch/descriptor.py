"""Gaussian-weighted line pooling (GLpool), descriptor assembly, exclusion and the dustbin row."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

MIN_SEGMENT_LENGTH = 4.0


class LineSegment(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def length(self) -> float:
        return math.hypot(self.x1 - self.x0, self.y1 - self.y0)

    def reversed(self) -> "LineSegment":
        return LineSegment(self.x1, self.y1, self.x0, self.y0)


def as_segment_array(segments) -> np.ndarray:
    """Any list of 4-tuples / LineSegments / (N,4) array to a float64 (N,4) array."""
    arr = np.asarray(segments, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4))
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"segments must have shape (N, 4), got {arr.shape}")
    return arr


def validate_segments(segments, width: int, height: int, min_length: float = MIN_SEGMENT_LENGTH) -> None:
    arr = as_segment_array(segments)
    lengths = np.hypot(arr[:, 2] - arr[:, 0], arr[:, 3] - arr[:, 1])
    for k in np.flatnonzero(lengths < min_length):
        raise ValueError(f"segment {k} shorter than {min_length} px ({lengths[k]:.2f})")
    xs, ys = arr[:, [0, 2]], arr[:, [1, 3]]
    bad = (xs < 0).any(1) | (xs > width - 1).any(1) | (ys < 0).any(1) | (ys > height - 1).any(1)
    for k in np.flatnonzero(bad):
        raise ValueError(f"segment {k} leaves the {width}x{height} image")


def gaussian_weights(n: int, sigma: float) -> np.ndarray:
    """Normalised Gaussian over ``n`` (odd) positions centred on the middle one."""
    if n < 1 or n % 2 == 0:
        raise ValueError(f"n must be odd and >= 1, got {n}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.arange(n) - (n - 1) / 2
    g = np.exp(-(d**2) / (2 * sigma**2)) / (math.sqrt(2 * math.pi) * sigma)
    return g / g.sum()


def group_sizes(m: int, w: int) -> list[int]:
    """Split ``m`` samples into ``min(w, m)`` contiguous groups, remainder to the first ones."""
    g = min(w, m)
    base, rem = divmod(m, g)
    return [base + 1 if k < rem else base for k in range(g)]


def bilinear_sample(fmap: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample a (c, H, W) map at cell coordinates; out-of-range points clamp to the border."""
    _, h, w = fmap.shape
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = x.floor().clamp(max=max(w - 2, 0)).long()
    y0 = y.floor().clamp(max=max(h - 2, 0)).long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = (x - x0).to(fmap.dtype)
    wy = (y - y0).to(fmap.dtype)
    top = fmap[:, y0, x0] * (1 - wx) + fmap[:, y0, x1] * wx
    bottom = fmap[:, y1, x0] * (1 - wx) + fmap[:, y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def _pool(fmap, stride, segments, n, w, sigma, reduce_groups="mean"):
    """Shared sampler: m x n oriented grid per segment, Gaussian across, group max along.

    Returns (N, c). ``n=1, w=1`` gives plain max pooling of points on the line.
    """
    arr = as_segment_array(segments)
    c = fmap.shape[0]
    if len(arr) == 0:
        return fmap.new_zeros(0, c)
    weights = torch.as_tensor(gaussian_weights(n, sigma), dtype=fmap.dtype, device=fmap.device)
    p0 = arr[:, :2] / stride
    p1 = arr[:, 2:] / stride
    lengths = np.hypot(*(p1 - p0).T)
    xs, ys, seg_groups = [], [], []
    group_of_sample = []
    n_groups = 0
    offsets = np.arange(n) - (n - 1) / 2
    for k in range(len(arr)):
        if lengths[k] == 0:
            raise ValueError(f"segment {k} is degenerate")
        m = max(1, int(round(lengths[k])))
        d = (p1[k] - p0[k]) / lengths[k]
        normal = np.array([-d[1], d[0]])
        t = (np.arange(m) + 0.5) / m
        centers = p0[k] + t[:, None] * (p1[k] - p0[k])
        pts = centers[:, None, :] + offsets[None, :, None] * normal[None, None, :]  # (m, n, 2)
        xs.append(pts[..., 0].ravel())
        ys.append(pts[..., 1].ravel())
        sizes = group_sizes(m, w)
        group_of_sample.append(n_groups + np.repeat(np.arange(len(sizes)), sizes))
        seg_groups.append(len(sizes))
        n_groups += len(sizes)
    x = torch.as_tensor(np.concatenate(xs), dtype=fmap.dtype, device=fmap.device)
    y = torch.as_tensor(np.concatenate(ys), dtype=fmap.dtype, device=fmap.device)
    vals = bilinear_sample(fmap, x, y).view(c, -1, n)  # (c, total_m, n)
    along = vals @ weights  # weighted average across the width
    gidx = torch.as_tensor(np.concatenate(group_of_sample), device=fmap.device)
    gmax = along.new_full((c, n_groups), -torch.inf).scatter_reduce(
        1, gidx[None, :].expand(c, -1), along, reduce="amax", include_self=False
    )
    seg_of_group = torch.as_tensor(np.repeat(np.arange(len(arr)), seg_groups), device=fmap.device)
    sums = gmax.new_zeros(c, len(arr)).index_add(1, seg_of_group, gmax)
    counts = torch.as_tensor(seg_groups, dtype=fmap.dtype, device=fmap.device)
    return (sums / counts).T


def glpool(fmap: torch.Tensor, stride: float, segment, n: int = 7, w: int = 5, sigma: float | None = None) -> torch.Tensor:
    """Raw GLpool descriptor (length c) of one segment given in image pixels."""
    return glpool_many(fmap, stride, [tuple(segment)], n, w, sigma)[0]


def glpool_many(fmap, stride, segments, n: int = 7, w: int = 5, sigma: float | None = None) -> torch.Tensor:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"n must be odd and >= 1, got {n}")
    return _pool(fmap, stride, segments, n, w, sigma if sigma is not None else n / 4)


def point_pool_many(fmap, stride, segments) -> torch.Tensor:
    """Baseline: max over isolated points on the line (one per cell of length)."""
    return _pool(fmap, stride, segments, 1, 1, 1.0)


@dataclass
class LineFeatures:
    """Per-line descriptors: unit-norm shallow and deep parts and their normalised concatenation."""

    shallow: torch.Tensor
    deep: torch.Tensor
    combined: torch.Tensor

    @property
    def dims(self) -> tuple[int, int]:
        return self.shallow.shape[1], self.deep.shape[1]

    def subset(self, idx) -> "LineFeatures":
        idx = torch.as_tensor(list(idx), dtype=torch.long)
        return LineFeatures(self.shallow[idx], self.deep[idx], self.combined[idx])


def describe_lines(maps, segments, n: int = 7, w: int = 5, sigma: float | None = None, pooling: str = "glpool") -> LineFeatures:
    """``[l2(f3) || l2(f5)]`` then l2-normalised again, in input order."""
    arr = as_segment_array(segments)
    if len(arr) == 0:
        raise ValueError("no segments to describe")
    lengths = np.hypot(arr[:, 2] - arr[:, 0], arr[:, 3] - arr[:, 1])
    for k in np.flatnonzero(lengths == 0):
        raise ValueError(f"segment {k} is degenerate")
    if pooling == "glpool":
        f3 = glpool_many(maps.shallow, maps.shallow_stride, arr, n, w, sigma)
        f5 = glpool_many(maps.deep, maps.deep_stride, arr, n, w, sigma)
    elif pooling == "points":
        f3 = point_pool_many(maps.shallow, maps.shallow_stride, arr)
        f5 = point_pool_many(maps.deep, maps.deep_stride, arr)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    f3 = F.normalize(f3, dim=1, eps=1e-12)
    f5 = F.normalize(f5, dim=1, eps=1e-12)
    return LineFeatures(f3, f5, F.normalize(torch.cat([f3, f5], dim=1), dim=1, eps=1e-12))


def exclude_non_matches(fa: torch.Tensor, fb: torch.Tensor, d_s: float = 0.5) -> tuple[list[int], list[int]]:
    """Keep a line iff its best cosine similarity against the other set reaches ``d_s``."""
    if len(fa) == 0 or len(fb) == 0:
        return [], []
    sim = (fa @ fb.T).detach()
    keep_a = torch.nonzero(sim.max(dim=1).values >= d_s).flatten().tolist()
    keep_b = torch.nonzero(sim.max(dim=0).values >= d_s).flatten().tolist()
    return keep_a, keep_b


@dataclass
class DescriptorSet:
    descriptors: torch.Tensor  # (n+1, d), dustbin last
    kept_indices: list[int]

    @property
    def n(self) -> int:
        return self.descriptors.shape[0] - 1

    @property
    def dustbin(self) -> torch.Tensor:
        return self.descriptors[-1]


def append_dustbin(descriptors: torch.Tensor, u: torch.Tensor, kept_indices: Sequence[int] | None = None) -> DescriptorSet:
    if not bool(torch.isfinite(u).all()):
        raise ValueError("dustbin descriptor is not finite")
    if kept_indices is None:
        kept_indices = list(range(descriptors.shape[0]))
    if len(set(kept_indices)) != len(kept_indices):
        raise ValueError("kept indices must be unique")
    rows = torch.cat([descriptors, u[None, :].to(descriptors.dtype)], dim=0)
    return DescriptorSet(rows, list(kept_indices))


def init_dustbin(dim: int, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.randn(dim, generator=generator)
    return u / u.norm()
