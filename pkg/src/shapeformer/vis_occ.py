"""Visible/occluding mask head.

Decodes two learnable queries against the RoI attention feature and reads
masks off the upsampled pixel embedding by a per-pixel dot product.  Nothing
here depends on the amodal branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import ShapeError
from .nn import AttentionBlock, BlockOptions, Conv, FFNBlock, mlp


class MaskFeatures(nn.Module):
    """Three 3x3 convs give the attention feature; a 2x2 stride-2 transposed
    conv plus a 1x1 conv give the pixel embedding at twice the resolution."""

    def __init__(self, c_e: int):
        super().__init__()
        self.convs = nn.ModuleList([Conv(c_e, c_e, "3x3") for _ in range(3)])
        self.up = Conv(c_e, c_e, "up2x2")
        self.proj = Conv(c_e, c_e, "1x1")

    def forward(self, roi: Tensor) -> tuple[Tensor, Tensor]:
        x = roi
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        attn_feat = x
        embed = self.proj(F.relu(self.up(attn_feat)))
        return attn_feat, embed


def flatten_tokens(feat: Tensor) -> Tensor:
    """``[N, C, H, W]`` -> ``[N, H*W, C]`` (row-major token order)."""
    return feat.flatten(2).transpose(1, 2)


def extract_masks(queries: Tensor, embed: Tensor) -> Tensor:
    """Mask logits: dot product of each query with every pixel embedding.

    ``queries`` ``[N, Q, C]``, ``embed`` ``[N, C, H, W]`` -> ``[N, Q, H, W]``.
    Apply ``sigmoid`` for soft masks.
    """
    if queries.shape[-1] != embed.shape[1]:
        raise ShapeError(f"query dim {queries.shape[-1]} != embedding dim {embed.shape[1]}")
    return torch.einsum("nqc,nchw->nqhw", queries, embed)


class QueryDecoder(nn.Module):
    """Per layer: self-attention among the queries, cross-attention to the RoI
    tokens, then an optional feed-forward block."""

    def __init__(self, c_e: int, layers: int, opts: BlockOptions):
        super().__init__()
        if layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.self_attn = nn.ModuleList([AttentionBlock(c_e, opts) for _ in range(layers)])
        self.cross_attn = nn.ModuleList([AttentionBlock(c_e, opts) for _ in range(layers)])
        self.ffn = nn.ModuleList([FFNBlock(c_e, opts) for _ in range(layers)]) if opts.ffn else None

    def forward(self, queries: Tensor, tokens: Tensor) -> Tensor:
        x = queries
        for i in range(len(self.self_attn)):
            x = self.self_attn[i](x)
            x = self.cross_attn[i](x, tokens)
            if self.ffn is not None:
                x = self.ffn[i](x)
        return x


@dataclass
class HeadOptions:
    c_e: int = 64
    roi_size: int = 14
    layers: int = 3
    num_categories: int = 4
    pos_enc: bool = False
    block: BlockOptions = field(default_factory=BlockOptions)


class VisOccHead(nn.Module):
    """Predicts visible and occluding masks plus category probabilities.

    ``extra_queries`` > 0 appends further learnable queries to the same
    decoder (used by the bidirectional baseline).
    """

    def __init__(self, opts: HeadOptions, extra_queries: int = 0):
        super().__init__()
        c = opts.c_e
        self.opts = opts
        self.features = MaskFeatures(c)
        self.queries = nn.Parameter(torch.randn(2 + extra_queries, c) * 0.1)
        self.pos = nn.Parameter(torch.zeros(opts.roi_size ** 2, c)) if opts.pos_enc else None
        self.decoder = QueryDecoder(c, opts.layers, opts.block)
        # pre-norm stacks leave the residual stream unnormalised; close it off
        self.out_norm = nn.LayerNorm(c) if opts.block.pre_norm else nn.Identity()
        self.classifier = mlp([c, c, c, opts.num_categories])

    def vis_features(self, roi: Tensor) -> tuple[Tensor, Tensor]:
        return self.features(roi)

    def decode(self, attn_feat: Tensor) -> Tensor:
        tokens = flatten_tokens(attn_feat)
        if self.pos is not None:
            tokens = tokens + self.pos
        q = self.queries.expand(attn_feat.shape[0], -1, -1)
        return self.decoder(q, tokens)

    def classify(self, x_v: Tensor) -> Tensor:
        """Category logits; ``softmax`` gives ``p`` and ``argmax`` the category."""
        return self.classifier(x_v)

    def forward(self, roi: Tensor) -> dict[str, Tensor]:
        attn_feat, embed = self.vis_features(roi)
        emb = self.out_norm(self.decode(attn_feat))
        logits = extract_masks(emb, embed)
        return {
            "x_v": emb[:, 0],
            "x_o": emb[:, 1],
            "embeddings": emb,
            "mask_logits": logits,
            "cls_logits": self.classify(emb[:, 0]),
        }


def classify_probs(cls_logits: Tensor) -> tuple[Tensor, Tensor]:
    """``(p, c)`` with ``c`` the lowest index among maximal probabilities."""
    p = torch.softmax(cls_logits, dim=-1)
    return p, torch.argmax(p, dim=-1)


@dataclass
class VisOccOutput:
    x_v: Tensor
    x_o: Tensor
    M_v: Tensor
    M_o: Tensor
    p: Tensor
    c: Tensor
    attn_weights: Optional[Tensor] = None

    @classmethod
    def from_head(cls, out: dict[str, Tensor]) -> "VisOccOutput":
        masks = torch.sigmoid(out["mask_logits"])
        p, c = classify_probs(out["cls_logits"])
        return cls(out["x_v"], out["x_o"], masks[:, 0], masks[:, 1], p, c)
