"""Full mask-head model: backbone, RoI features, visible/occluding head,
frozen shape-prior retriever and shape-prior amodal head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
from torch import Tensor, nn

from .backbone import Backbone, roi_align
from .masks import MASK_THRESHOLD, nearest_indices
from .nn import BlockOptions
from .retriever import RetrieverConfig, ShapePriorRetriever
from .spa import SpaHead, prior_to_bias
from .vis_occ import HeadOptions, VisOccHead

VARIANTS = ("full", "no-prior-mask", "no-prior", "bidirectional-baseline", "visible-only")


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    num_categories: int = 4
    c_e: int = 64
    roi_size: int = 14
    backbone_width: int = 32
    vis_layers: int = 3
    amodal_layers: int = 3
    heads: int = 1
    attn_scale: bool = True
    pre_norm: bool = True
    ffn: bool = True
    pos_enc: bool = False
    stop_grad: bool = False
    # mechanism switches toggled by the ablation variants
    use_prior: bool = True
    prior_mask: bool = True
    bidirectional: bool = False
    visible_only: bool = False
    prior_from_gt: bool = False

    def block(self) -> BlockOptions:
        return BlockOptions(heads=self.heads, attn_scale=self.attn_scale,
                            pre_norm=self.pre_norm, ffn=self.ffn)

    def head(self, layers: int) -> HeadOptions:
        return HeadOptions(c_e=self.c_e, roi_size=self.roi_size, layers=layers,
                           num_categories=self.num_categories, pos_enc=self.pos_enc,
                           block=self.block())

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Copy of ``base`` with exactly the switches that define ``variant``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    changes = {
        "full": {},
        "no-prior-mask": {"prior_mask": False},
        "no-prior": {"use_prior": False},
        "bidirectional-baseline": {"bidirectional": True, "use_prior": False},
        "visible-only": {"visible_only": True, "use_prior": False},
    }[variant]
    return ModelConfig(**{**base.to_json(), **changes})


class ShapeFormer(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None,
                 retriever: Optional[ShapePriorRetriever] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.backbone = Backbone(cfg.c_e, cfg.in_channels, cfg.backbone_width)
        extra = 2 if cfg.bidirectional else 0
        self.vis_occ = VisOccHead(cfg.head(cfg.vis_layers), extra_queries=extra)
        self.spa = None
        if not (cfg.bidirectional or cfg.visible_only):
            self.spa = SpaHead(cfg.head(cfg.amodal_layers), stop_grad=cfg.stop_grad)
        self.retriever = None
        if cfg.use_prior and self.spa is not None:
            if retriever is None:
                retriever = ShapePriorRetriever(RetrieverConfig(num_categories=cfg.num_categories))
            self.retriever = retriever
            self.freeze_retriever()

    def freeze_retriever(self) -> None:
        if self.retriever is not None:
            self.retriever.eval()
            for p in self.retriever.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.retriever is not None:
            self.retriever.eval()
        return self

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("retriever.")]

    @property
    def mask_size(self) -> int:
        return 2 * self.cfg.roi_size

    def roi_features(self, images: Tensor, boxes: Tensor, batch_index: Tensor) -> Tensor:
        feats = self.backbone(images)
        r = self.cfg.roi_size
        return roi_align(feats, boxes, batch_index, (r, r))

    @torch.no_grad()
    def shape_prior(self, visible: Tensor, categories: Tensor) -> Tensor:
        """Soft priors from binary RoI-frame visible masks ``[N, S, S]``."""
        res = self.retriever.cfg.resolution
        s = visible.shape[-1]
        idx = torch.from_numpy(nearest_indices(0, s, res))
        x = visible[:, idx][:, :, idx].to(self.retriever.codebooks.dtype)[:, None]
        return self.retriever.prior_batch(x, categories)

    def forward(self, images: Tensor, boxes: Tensor, batch_index: Tensor,
                gt_visible: Optional[Tensor] = None,
                gt_category: Optional[Tensor] = None) -> dict[str, Tensor]:
        rois = self.roi_features(images, boxes, batch_index)
        vo = self.vis_occ(rois)
        out = {"cls_logits": vo["cls_logits"], "vis_logits": vo["mask_logits"][:, :2]}
        if self.cfg.bidirectional:
            out["amodal_logits"] = vo["mask_logits"][:, 2:4]
            return out
        if self.spa is None:
            return out
        bias = None
        if self.retriever is not None:
            if self.cfg.prior_from_gt and gt_visible is not None:
                visible, cats = gt_visible >= MASK_THRESHOLD, gt_category
            else:
                visible = torch.sigmoid(vo["mask_logits"][:, 0].detach()) >= MASK_THRESHOLD
                cats = torch.argmax(vo["cls_logits"].detach(), dim=-1)
            prior = self.shape_prior(visible, cats)
            ab = prior_to_bias(prior, self.cfg.roi_size)
            out["prior"] = prior
            out["prior_fallback"] = ab.fallback
            if self.cfg.prior_mask:
                bias = ab.grid.to(rois.dtype)
        sp = self.spa(rois, vo["x_v"], vo["x_o"], bias)
        out["amodal_logits"] = sp["mask_logits"]
        return out
