"""Small strided conv backbone and ground-truth-box RoI feature extraction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import ShapeError
from .masks import Box

STRIDE = 4


class Backbone(nn.Module):
    """Four 3x3 conv layers with strides 2, 1, 2, 1 (output stride 4)."""

    def __init__(self, c_e: int = 64, in_channels: int = 1, width: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.c_e = c_e
        self.layers = nn.ModuleList([
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.Conv2d(width, width, 3, stride=1, padding=1),
            nn.Conv2d(width, c_e, 3, stride=2, padding=1),
            nn.Conv2d(c_e, c_e, 3, stride=1, padding=1),
        ])
        # He init keeps activations at unit scale through the ReLU stack; the torch
        # default shrinks them enough that the heads see near-constant RoI features
        for layer in self.layers:
            nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)

    def forward(self, images: Tensor) -> Tensor:
        if images.dim() != 4 or images.shape[1] != self.in_channels:
            raise ShapeError(f"expected [N,{self.in_channels},H,W], got {tuple(images.shape)}")
        if images.shape[-1] % STRIDE or images.shape[-2] % STRIDE:
            raise ShapeError(f"image size {tuple(images.shape[-2:])} not divisible by {STRIDE}")
        x = (images - 0.5) * 2.0
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def image_tensor(image: np.ndarray, dtype=torch.float32) -> Tensor:
    """uint8 ``H x W`` (or ``H x W x C``) image to a ``[C, H, W]`` tensor in [0, 1]."""
    arr = np.asarray(image, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _sample_coords(start: Tensor, extent: Tensor, out: int, size: int):
    """Bilinear taps for one sample per output cell along one axis.

    ``start``/``extent`` are in feature-cell units; cell ``c`` has its centre
    at index coordinate ``c``.
    """
    steps = (torch.arange(out, dtype=start.dtype, device=start.device) + 0.5) / out
    pos = start[:, None] + steps[None, :] * extent[:, None] - 0.5
    pos = pos.clamp(0, size - 1)
    lo = pos.floor().long()
    hi = (lo + 1).clamp(max=size - 1)
    frac = pos - lo.to(pos.dtype)
    return lo, hi, frac


def roi_align(features: Tensor, boxes: Tensor, batch_index: Tensor, out_size: tuple[int, int],
              stride: int = STRIDE) -> Tensor:
    """Bilinear crop-and-resize of image-pixel ``boxes`` from ``features``.

    ``features`` is ``[B, C, H, W]``, ``boxes`` is ``[N, 4]`` as ``x0, y0, x1, y1``,
    ``batch_index`` maps each box to its image.  Returns ``[N, C, Hr, Wr]``.
    """
    if features.dim() != 4:
        raise ShapeError(f"features must be [B,C,H,W], got {tuple(features.shape)}")
    hr, wr = out_size
    _, _, h, w = features.shape
    b = boxes.to(features.dtype) / stride
    ylo, yhi, fy = _sample_coords(b[:, 1], b[:, 3] - b[:, 1], hr, h)
    xlo, xhi, fx = _sample_coords(b[:, 0], b[:, 2] - b[:, 0], wr, w)
    feats = features[batch_index]  # [N, C, H, W]
    n, c = feats.shape[:2]

    def gather(yi: Tensor, xi: Tensor) -> Tensor:
        flat = (yi[:, :, None] * w + xi[:, None, :]).view(n, 1, hr * wr).expand(n, c, hr * wr)
        return feats.flatten(2).gather(2, flat).view(n, c, hr, wr)

    wy, wx = fy[:, None, :, None], fx[:, None, None, :]
    return (gather(ylo, xlo) * (1 - wy) * (1 - wx) + gather(ylo, xhi) * (1 - wy) * wx
            + gather(yhi, xlo) * wy * (1 - wx) + gather(yhi, xhi) * wy * wx)


@dataclass
class RoIFeature:
    tensor: Tensor  # [C_e, H_r, W_r]
    box: Box
    category_gt: Optional[int] = None


def roi_extract(feature_map: Tensor, box: Box, out_size: tuple[int, int] = (14, 14),
                image_size: tuple[int, int] | None = None, stride: int = STRIDE,
                category_gt: int | None = None) -> RoIFeature:
    """Single-box convenience wrapper around :func:`roi_align`."""
    if feature_map.dim() != 3:
        raise ShapeError(f"feature map must be [C,H,W], got {tuple(feature_map.shape)}")
    if image_size is None:
        image_size = (feature_map.shape[1] * stride, feature_map.shape[2] * stride)
    box.check_within(*image_size)
    boxes = torch.tensor([box.as_list()], dtype=feature_map.dtype)
    out = roi_align(feature_map[None], boxes, torch.zeros(1, dtype=torch.long), out_size, stride)
    return RoIFeature(out[0], box, category_gt)
