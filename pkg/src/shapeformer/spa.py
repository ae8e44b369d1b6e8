"""Shape-prior amodal head: amodal and occluded masks from the visible-branch
embeddings, with cross-attention restricted to the shape prior's foreground."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .masks import MASK_THRESHOLD, nearest_indices
from .nn import NEG_INF, AttentionBlock, BlockOptions, FFNBlock, mlp
from .vis_occ import HeadOptions, MaskFeatures, extract_masks, flatten_tokens


@dataclass
class AttnBias:
    grid: Tensor  # [N, H_r * W_r], 0 where attention is allowed, NEG_INF elsewhere
    fallback: Tensor  # [N] bool, True where the prior was empty and attention is unrestricted


def prior_to_bias(prior, roi_size: int | tuple[int, int]) -> AttnBias:
    """Binarise soft priors, nearest-resize to the RoI token grid, map to {0, NEG_INF}.

    ``prior`` is ``[R, R]`` or ``[N, R, R]`` (tensor or array).  A prior with no
    foreground cell after resizing yields an all-zero bias and sets its
    fallback flag.
    """
    hr, wr = (roi_size, roi_size) if isinstance(roi_size, int) else roi_size
    p = torch.as_tensor(np.asarray(prior) if not isinstance(prior, Tensor) else prior)
    if p.dim() == 2:
        p = p[None]
    n, h, w = p.shape
    rows = torch.from_numpy(nearest_indices(0, h, hr))
    cols = torch.from_numpy(nearest_indices(0, w, wr))
    fg = (p >= MASK_THRESHOLD)[:, rows][:, :, cols].reshape(n, hr * wr)
    fallback = ~fg.any(dim=1)
    fg = fg | fallback[:, None]
    grid = torch.where(fg, 0.0, NEG_INF).to(p.dtype if p.is_floating_point() else torch.float32)
    return AttnBias(grid, fallback)


class AmodalDecoder(nn.Module):
    """Per layer: prior-masked cross-attention to the RoI tokens, then
    self-attention between the two embeddings, then an optional feed-forward."""

    def __init__(self, c_e: int, layers: int, opts: BlockOptions):
        super().__init__()
        if layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.cross_attn = nn.ModuleList([AttentionBlock(c_e, opts) for _ in range(layers)])
        self.self_attn = nn.ModuleList([AttentionBlock(c_e, opts) for _ in range(layers)])
        self.ffn = nn.ModuleList([FFNBlock(c_e, opts) for _ in range(layers)]) if opts.ffn else None

    def forward(self, queries: Tensor, tokens: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        b = None if bias is None else bias[:, None, :]
        x = queries
        for i in range(len(self.cross_attn)):
            x = self.cross_attn[i](x, tokens, b)
            x = self.self_attn[i](x)
            if self.ffn is not None:
                x = self.ffn[i](x)
        return x


class SpaHead(nn.Module):
    def __init__(self, opts: HeadOptions, stop_grad: bool = False):
        super().__init__()
        c = opts.c_e
        self.opts = opts
        self.stop_grad = stop_grad
        self.features = MaskFeatures(c)
        self.to_amodal = mlp([c, c, c])
        self.to_occluded = mlp([c, c, c])
        self.pos = nn.Parameter(torch.zeros(opts.roi_size ** 2, c)) if opts.pos_enc else None
        self.decoder = AmodalDecoder(c, opts.layers, opts.block)
        self.out_norm = nn.LayerNorm(c) if opts.block.pre_norm else nn.Identity()

    def amodal_features(self, roi: Tensor) -> tuple[Tensor, Tensor]:
        return self.features(roi)

    def queries(self, x_v: Tensor, x_o: Tensor) -> Tensor:
        if self.stop_grad:
            x_v, x_o = x_v.detach(), x_o.detach()
        return torch.stack([self.to_amodal(x_v), self.to_occluded(x_o)], dim=1)

    def decode(self, queries: Tensor, attn_feat: Tensor, bias: Optional[Tensor]) -> Tensor:
        tokens = flatten_tokens(attn_feat)
        if self.pos is not None:
            tokens = tokens + self.pos
        return self.decoder(queries, tokens, bias)

    def forward(self, roi: Tensor, x_v: Tensor, x_o: Tensor,
                bias: Optional[Tensor] = None) -> dict[str, Tensor]:
        attn_feat, embed = self.amodal_features(roi)
        z = self.out_norm(self.decode(self.queries(x_v, x_o), attn_feat, bias))
        return {"z_a": z[:, 0], "z_p": z[:, 1], "mask_logits": extract_masks(z, embed)}

    def keep_attention(self, on: bool = True) -> None:
        for block in self.decoder.cross_attn:
            block.attn.keep_weights = on
            if not on:
                block.attn.last_weights = None

    def last_attention(self) -> Optional[Tensor]:
        """Cross-attention weights of the final layer, ``[N, 2, H_r*W_r]``."""
        return self.decoder.cross_attn[-1].attn.last_weights
