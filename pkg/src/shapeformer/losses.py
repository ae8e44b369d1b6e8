"""Multi-task mask loss: pixel-mean BCE per mask type plus category CE."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor
from torch.nn import functional as F

from .errors import NonFiniteLoss

MASK_KEYS = ("visible", "occluding", "amodal", "occluded")


@dataclass
class LossReport:
    cls: Tensor
    visible: Tensor
    occluding: Tensor
    amodal: Tensor
    occluded: Tensor

    @property
    def total(self) -> Tensor:
        return self.cls + self.visible + self.occluding + self.amodal + self.occluded

    def as_floats(self) -> dict[str, float]:
        d = {"L_cls": self.cls.item(), "L_v": self.visible.item(), "L_o": self.occluding.item(),
             "L_a": self.amodal.item(), "L_p": self.occluded.item()}
        d["total"] = sum(d.values())
        return d


def shapeformer_loss(outputs: dict[str, Tensor], targets: dict[str, Tensor],
                     amodal_terms: bool = True) -> LossReport:
    """Unweighted sum of the five per-RoI losses.

    ``outputs`` carries mask logits (``vis_logits`` ``[N,2,S,S]`` for visible and
    occluding, ``amodal_logits`` ``[N,2,S,S]`` for amodal and occluded) and
    ``cls_logits`` ``[N,C]``.  ``targets`` holds float masks under
    :data:`MASK_KEYS` and integer ``category``.  With ``amodal_terms`` off (or no
    amodal logits) the amodal and occluded losses are zero.
    """
    vis = outputs["vis_logits"]
    bce = F.binary_cross_entropy_with_logits
    l_v = bce(vis[:, 0], targets["visible"].to(vis.dtype))
    l_o = bce(vis[:, 1], targets["occluding"].to(vis.dtype))
    amodal = outputs.get("amodal_logits")
    if amodal_terms and amodal is not None:
        l_a = bce(amodal[:, 0], targets["amodal"].to(amodal.dtype))
        l_p = bce(amodal[:, 1], targets["occluded"].to(amodal.dtype))
    else:
        l_a = l_p = vis.new_zeros(())
    l_cls = F.cross_entropy(outputs["cls_logits"], targets["category"].long())
    report = LossReport(l_cls, l_v, l_o, l_a, l_p)
    if not torch.isfinite(report.total):
        raise NonFiniteLoss(f"non-finite loss: {report.as_floats()}")
    return report
