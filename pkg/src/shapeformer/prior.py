"""Pretraining and evaluation of the shape-prior retriever.

Samples live in the amodal-box frame at the prior resolution, the same frame
the mask head sees, since its RoIs are the ground-truth amodal boxes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .errors import EmptySplit
from .masks import MASK_THRESHOLD, crop_resize_mask, mask_iou
from .nn import load_checkpoint, save_checkpoint
from .retriever import RetrieverConfig, ShapePriorRetriever
from .synth import SceneRecord, derive_seed, occlusion_augment

log = logging.getLogger(__name__)


@dataclass
class PriorTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    augment: bool = True
    augment_prob: float = 0.5

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PriorTrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class PriorSamples:
    amodal: np.ndarray  # [N, R, R] bool
    visible: np.ndarray  # [N, R, R] bool
    category: np.ndarray  # [N] int


def prior_samples(records: Sequence[SceneRecord], resolution: int) -> PriorSamples:
    amodal, visible, cats = [], [], []
    for rec in records:
        for inst in rec.instances:
            amodal.append(crop_resize_mask(inst.quartet.amodal, inst.box, resolution, resolution))
            visible.append(crop_resize_mask(inst.quartet.visible, inst.box, resolution, resolution))
            cats.append(inst.category)
    if not cats:
        raise EmptySplit("no instances to build retriever samples from")
    return PriorSamples(np.stack(amodal), np.stack(visible), np.asarray(cats, dtype=np.int64))


def epoch_inputs(samples: PriorSamples, cfg: PriorTrainConfig, epoch: int) -> np.ndarray:
    """Visible-mask inputs for one epoch.

    Without augmentation these are the scenes' own visible masks.  With it,
    each sample is replaced with probability ``augment_prob`` by a fresh
    simulated occlusion of its amodal mask.
    """
    if not cfg.augment:
        return samples.visible
    rng = np.random.default_rng(derive_seed(cfg.seed, 1_000_003 * (epoch + 1)))
    out = samples.visible.copy()
    for i in np.flatnonzero(rng.random(len(out)) < cfg.augment_prob):
        out[i] = occlusion_augment(samples.amodal[i], derive_seed(cfg.seed, epoch * len(out) + int(i)))
    return out


def train_prior_step(retriever: ShapePriorRetriever, optimizer: torch.optim.Optimizer,
                     inputs: torch.Tensor, targets: torch.Tensor, categories: torch.Tensor):
    """One optimisation step; returns ``(L_rec, L_vq, selected indices)``."""
    losses = retriever.losses(inputs, targets, categories)
    optimizer.zero_grad()
    losses.total.backward()
    optimizer.step()
    return losses.rec.item(), losses.vq.item(), losses.indices


def train_prior(records: Sequence[SceneRecord], cfg: PriorTrainConfig | None = None,
                rcfg: RetrieverConfig | None = None) -> tuple[ShapePriorRetriever, list[dict]]:
    cfg = cfg or PriorTrainConfig()
    rcfg = rcfg or RetrieverConfig()
    torch.manual_seed(cfg.seed)
    retriever = ShapePriorRetriever(rcfg)
    samples = prior_samples(records, rcfg.resolution)
    n = len(samples.category)
    opt = torch.optim.Adam(retriever.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    targets_all = torch.from_numpy(samples.amodal.astype(np.float32))
    cats_all = torch.from_numpy(samples.category)
    history = []
    steps = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        retriever.train()
        inputs_all = torch.from_numpy(epoch_inputs(samples, cfg, epoch).astype(np.float32))
        order = torch.randperm(n, generator=gen)
        usage = torch.zeros(rcfg.num_codebooks, rcfg.codebook_size, dtype=torch.long)
        rec_sum = vq_sum = 0.0
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            cats = cats_all[idx]
            rec, vq, chosen = train_prior_step(retriever, opt, inputs_all[idx][:, None],
                                               targets_all[idx], cats)
            books = retriever.book_index(cats)
            usage.index_put_((books[:, None].expand_as(chosen).reshape(-1), chosen.reshape(-1)),
                             torch.ones(chosen.numel(), dtype=torch.long), accumulate=True)
            rec_sum += rec
            vq_sum += vq
        reseeded = 0
        if epoch < cfg.epochs - 1:
            with torch.no_grad():
                pick = torch.randperm(n, generator=gen)[:512]
                lat = retriever.latents(inputs_all[pick][:, None])
                books = retriever.book_index(cats_all[pick])[:, None].expand(-1, lat.shape[1])
                reseeded = retriever.reseed_dead_codes(usage, lat.reshape(-1, rcfg.code_dim),
                                                       books.reshape(-1), gen)
        entry = {"epoch": epoch, "L_rec": rec_sum / steps, "L_vq": vq_sum / steps,
                 "L_csp": (rec_sum + vq_sum) / steps, "reseeded": reseeded}
        history.append(entry)
        log.info("prior epoch %d %s", epoch, entry)
    retriever.eval()
    for p in retriever.parameters():
        p.requires_grad_(False)
    return retriever, history


@torch.no_grad()
def evaluate_prior(retriever: ShapePriorRetriever, records: Sequence[SceneRecord],
                   inputs: str = "visible") -> dict:
    """Mean IoU of binarised priors against amodal ground truth.

    ``inputs`` picks the retriever input: the scenes' ``visible`` masks or the
    ``amodal`` masks themselves.  Also reports the IoU the input alone scores.
    """
    r = retriever.cfg.resolution
    samples = prior_samples(records, r)
    src = samples.visible if inputs == "visible" else samples.amodal
    x = torch.from_numpy(src.astype(np.float32))[:, None].to(retriever.codebooks.dtype)
    cats = torch.from_numpy(samples.category)
    soft = torch.cat([retriever.prior_batch(x[i:i + 256], cats[i:i + 256])
                      for i in range(0, len(x), 256)]).cpu().numpy()
    prior_iou = [mask_iou(soft[i] >= MASK_THRESHOLD, samples.amodal[i]) for i in range(len(soft))]
    input_iou = [mask_iou(src[i], samples.amodal[i]) for i in range(len(soft))]
    occluded = samples.visible.sum(axis=(1, 2)) < samples.amodal.sum(axis=(1, 2))
    return {
        "prior_iou": float(np.mean(prior_iou)),
        "input_iou": float(np.mean(input_iou)),
        "prior_iou_occluded": float(np.mean(np.asarray(prior_iou)[occluded])) if occluded.any() else float("nan"),
        "input_iou_occluded": float(np.mean(np.asarray(input_iou)[occluded])) if occluded.any() else float("nan"),
        "count": len(prior_iou),
    }


def save_retriever(retriever: ShapePriorRetriever, path, extra: dict | None = None) -> None:
    """Network weights as a flat tensor map; codebooks as per-category blocks."""
    tensors = {k: v for k, v in retriever.state_dict().items() if k != "codebooks"}
    books = {b: retriever.codebooks[b] for b in range(retriever.cfg.num_codebooks)}
    meta = {"kind": "retriever", "retriever": retriever.config_dict(), **(extra or {})}
    save_checkpoint(path, tensors, meta, codebooks=books)


def load_retriever(path) -> ShapePriorRetriever:
    tensors, meta, books = load_checkpoint(path)
    retriever = ShapePriorRetriever(RetrieverConfig(**meta["retriever"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    state["codebooks"] = torch.from_numpy(np.stack([books[b] for b in sorted(books)]))
    retriever.load_state_dict(state)
    retriever.eval()
    for p in retriever.parameters():
        p.requires_grad_(False)
    return retriever
