"""Small convolutional feature extractor with a shallow and a deep tap."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

MIN_IMAGE_SIZE = 32


@dataclass
class MultiScaleFeatureMaps:
    shallow: torch.Tensor  # (c3, H3, W3)
    deep: torch.Tensor  # (c5, H5, W5)
    shallow_stride: int
    deep_stride: int


def image_to_tensor(image) -> torch.Tensor:
    """HxW or HxWxC array (uint8 or float in [0,1]) to a (C, H, W) float tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        t = image
    else:
        arr = np.asarray(image)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        t = torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)
        if t.ndim == 2:
            t = t[None]
        elif t.ndim == 3:
            t = t.permute(2, 0, 1)
    if t.ndim != 3 or t.shape[0] not in (1, 3):
        raise ValueError(f"expected a (C, H, W) image with 1 or 3 channels, got {tuple(t.shape)}")
    return t


class Backbone(nn.Module):
    """Five 3x3 same-padded conv stages with ReLU; stages 1-4 downsample by two.

    Taps default to stages 2 and 4, i.e. strides 4 and 16. Stages past the
    deeper tap are kept for parameter parity but skipped in ``forward``.
    """

    def __init__(self, in_channels: int = 1, channels=(16, 32, 64, 64, 64), taps=(2, 4), strides=(2, 2, 2, 2, 1), tap_norm: bool = False):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have equal length")
        if not 1 <= taps[0] < taps[1] <= len(channels):
            raise ValueError(f"bad tap configuration {taps}")
        self.in_channels = in_channels
        self.taps = tuple(taps)
        self.stage_strides = tuple(strides)
        self.channels = tuple(channels)
        self.tap_norm = tap_norm
        self.stages = nn.ModuleList()
        prev = in_channels
        for ch, s in zip(channels, strides):
            self.stages.append(nn.Conv2d(prev, ch, kernel_size=3, stride=s, padding=1))
            prev = ch

    @property
    def shallow_stride(self) -> int:
        return int(np.prod(self.stage_strides[: self.taps[0]]))

    @property
    def deep_stride(self) -> int:
        return int(np.prod(self.stage_strides[: self.taps[1]]))

    @property
    def out_channels(self) -> tuple[int, int]:
        return self.channels[self.taps[0] - 1], self.channels[self.taps[1] - 1]

    def forward(self, image: torch.Tensor) -> MultiScaleFeatureMaps:
        if image.ndim == 3:
            image = image[None]
        _, c, h, w = image.shape
        if c != self.in_channels:
            raise ValueError(f"backbone expects {self.in_channels} channels, got {c}")
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise ValueError(f"image {h}x{w} below minimum size {MIN_IMAGE_SIZE}")
        if not bool(torch.isfinite(image).all()):
            raise ValueError("image contains non-finite values")
        x = image.to(self.stages[0].weight.dtype)
        outs = {}
        for k, conv in enumerate(self.stages[: self.taps[1]], start=1):
            x = torch.relu(conv(x))
            outs[k] = x
        shallow, deep = outs[self.taps[0]][0], outs[self.taps[1]][0]
        if self.tap_norm:
            shallow, deep = _standardize(shallow), _standardize(deep)
        return MultiScaleFeatureMaps(shallow, deep, self.shallow_stride, self.deep_stride)


def _standardize(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # per-channel zero mean / unit variance over the spatial extent
    mean = x.mean(dim=(1, 2), keepdim=True)
    var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def extract_feature_maps(image, params: Backbone) -> MultiScaleFeatureMaps:
    return params(image_to_tensor(image) if not isinstance(image, torch.Tensor) else image)
