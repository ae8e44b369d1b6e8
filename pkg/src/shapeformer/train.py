"""End-to-end training of the mask heads with a frozen retriever, prediction
pasting and split evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .backbone import image_tensor
from .errors import EmptySplit, NonFiniteLoss
from .losses import MASK_KEYS, shapeformer_loss
from .masks import MASK_THRESHOLD, crop_resize_mask, paste_mask
from .metrics import EvalReport, evaluate_predictions
from .model import ModelConfig, ShapeFormer
from .nn import load_checkpoint, param_hash, save_checkpoint
from .retriever import RetrieverConfig, ShapePriorRetriever
from .synth import SceneRecord

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8  # scenes per step
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"  # or "constant"
    warmup_steps: int = 20
    grad_clip: float = 5.0
    seed: int = 0
    eval_every: int = 0  # epochs; 0 = only at the end when eval data is given

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class SceneTensors:
    image: Tensor  # [C, H, W]
    boxes: Tensor  # [n, 4]
    categories: Tensor  # [n]
    targets: dict[str, Tensor]  # mask type -> [n, S, S] uint8


def prepare_scene(rec: SceneRecord, mask_size: int) -> SceneTensors:
    boxes = torch.tensor([inst.box.as_list() for inst in rec.instances], dtype=torch.float32)
    cats = torch.tensor([inst.category for inst in rec.instances], dtype=torch.long)
    targets = {}
    for key in MASK_KEYS:
        crops = [crop_resize_mask(getattr(inst.quartet, key), inst.box, mask_size, mask_size)
                 for inst in rec.instances]
        targets[key] = torch.from_numpy(np.stack(crops).astype(np.uint8))
    return SceneTensors(image_tensor(rec.image), boxes, cats, targets)


def collate(scenes: Sequence[SceneTensors], dtype=torch.float32):
    images = torch.stack([s.image for s in scenes]).to(dtype)
    boxes = torch.cat([s.boxes for s in scenes]).to(dtype)
    index = torch.cat([torch.full((len(s.boxes),), i, dtype=torch.long) for i, s in enumerate(scenes)])
    targets = {k: torch.cat([s.targets[k] for s in scenes]).to(dtype) for k in MASK_KEYS}
    targets["category"] = torch.cat([s.categories for s in scenes])
    return images, boxes, index, targets


def forward_batch(model: ShapeFormer, batch) -> tuple[dict, dict]:
    images, boxes, index, targets = batch
    out = model(images, boxes, index, gt_visible=targets["visible"], gt_category=targets["category"])
    return out, targets


def batch_loss(model: ShapeFormer, batch):
    out, targets = forward_batch(model, batch)
    return shapeformer_loss(out, targets, amodal_terms=not model.cfg.visible_only)


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "cosine":
        t = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * min(1.0, t)))
    return cfg.lr


@dataclass
class TrainResult:
    model: ShapeFormer
    history: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    param_hash: str = ""
    retriever_hash: Optional[str] = None
    aborted: bool = False


def build_model(model_cfg: ModelConfig, retriever: Optional[ShapePriorRetriever], seed: int) -> ShapeFormer:
    torch.manual_seed(seed)
    return ShapeFormer(model_cfg, retriever=retriever)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, records: Sequence[SceneRecord],
          retriever: Optional[ShapePriorRetriever] = None,
          eval_records: Optional[Sequence[SceneRecord]] = None,
          out_dir: Optional[Path] = None,
          on_epoch: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """SGD with momentum over shuffled scene batches; deterministic given the seed."""
    if not records:
        raise EmptySplit("no training scenes")
    model = build_model(model_cfg, retriever, train_cfg.seed)
    retriever_hash = param_hash(model.retriever) if model.retriever is not None else None
    scenes = [prepare_scene(r, model.mask_size) for r in records]
    params = model.trainable_parameters()
    opt = torch.optim.SGD(params, lr=train_cfg.lr, momentum=train_cfg.momentum,
                          weight_decay=train_cfg.weight_decay)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    steps_per_epoch = math.ceil(len(scenes) / train_cfg.batch_size)
    total = steps_per_epoch * train_cfg.epochs
    result = TrainResult(model, retriever_hash=retriever_hash)
    out_dir = Path(out_dir) if out_dir is not None else None
    step = 0
    for epoch in range(train_cfg.epochs):
        model.train()
        order = torch.randperm(len(scenes), generator=gen).tolist()
        sums: dict[str, float] = {}
        for s in range(steps_per_epoch):
            batch = collate([scenes[i] for i in order[s * train_cfg.batch_size:(s + 1) * train_cfg.batch_size]])
            for g in opt.param_groups:
                g["lr"] = _lr_at(train_cfg, step, total)
            try:
                report = batch_loss(model, batch)
            except NonFiniteLoss:
                log.error("non-finite loss at epoch %d step %d; keeping last good checkpoint", epoch, s)
                result.aborted = True
                break
            opt.zero_grad()
            report.total.backward()
            if train_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, train_cfg.grad_clip)
            opt.step()
            step += 1
            for k, v in report.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
        if result.aborted:
            break
        epoch_losses = {k: v / steps_per_epoch for k, v in sums.items()}
        epoch_losses["epoch"] = epoch
        result.history.append(epoch_losses)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in epoch_losses.items()})
        if out_dir is not None:
            save_model(model, out_dir / "model.ckpt", extra={"epoch": epoch})
        if eval_records and train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
            rep = evaluate(model, eval_records)
            result.evals.append({"epoch": epoch, **rep.to_json()})
        if on_epoch:
            on_epoch(epoch, epoch_losses)
    if eval_records and not result.evals and not result.aborted:
        rep = evaluate(model, eval_records)
        result.evals.append({"epoch": train_cfg.epochs - 1, **rep.to_json()})
    result.param_hash = param_hash(model)
    return result


# -- prediction & evaluation -----------------------------------------------------------

@torch.no_grad()
def predict_scene(model: ShapeFormer, rec: SceneRecord, keep_attention: bool = False) -> list[dict]:
    """Per-instance image-frame binary masks, category, score and RoI-frame extras."""
    model.eval()
    st = prepare_scene(rec, model.mask_size)
    dtype = next(model.parameters()).dtype
    images, boxes, index, targets = collate([st], dtype)
    if keep_attention and model.spa is not None:
        model.spa.keep_attention(True)
    try:
        out, _ = forward_batch(model, (images, boxes, index, targets))
        attn = model.spa.last_attention() if (keep_attention and model.spa is not None) else None
    finally:
        if keep_attention and model.spa is not None:
            model.spa.keep_attention(False)
    p = torch.softmax(out["cls_logits"], dim=-1)
    score, cat = p.max(dim=-1)
    vis = torch.sigmoid(out["vis_logits"]).cpu().numpy()
    amo = torch.sigmoid(out["amodal_logits"]).cpu().numpy() if "amodal_logits" in out else None
    h, w = rec.image.shape[:2]
    preds = []
    for i, inst in enumerate(rec.instances):
        roi = {"visible": vis[i, 0], "occluding": vis[i, 1]}
        if amo is not None:
            roi["amodal"], roi["occluded"] = amo[i, 0], amo[i, 1]
        masks = {k: paste_mask(v >= MASK_THRESHOLD, inst.box, h, w) for k, v in roi.items()}
        pred = {"masks": masks, "roi_soft": roi, "category": int(cat[i]), "score": float(score[i]),
                "probs": p[i].cpu().numpy()}
        if "prior" in out:
            pred["prior"] = out["prior"][i].cpu().numpy()
            pred["prior_fallback"] = bool(out["prior_fallback"][i])
        if attn is not None:
            pred["attention"] = attn[i].cpu().numpy()
        preds.append(pred)
    return preds


def ground_truth(rec: SceneRecord) -> list[dict]:
    return [{"masks": {k: getattr(inst.quartet, k) for k in MASK_KEYS}, "category": inst.category}
            for inst in rec.instances]


def evaluate(model: ShapeFormer, records: Sequence[SceneRecord]) -> EvalReport:
    if not records:
        raise EmptySplit("evaluation split is empty")
    per_image = [(predict_scene(model, rec), ground_truth(rec)) for rec in records]
    return evaluate_predictions(per_image)


# -- checkpoint glue -------------------------------------------------------------------

def save_model(model: ShapeFormer, path, extra: dict | None = None) -> None:
    meta = {"kind": "shapeformer", "model": model.cfg.to_json(), **(extra or {})}
    if model.retriever is not None:
        meta["retriever"] = model.retriever.config_dict()
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> ShapeFormer:
    tensors, meta, _ = load_checkpoint(path)
    cfg = ModelConfig.from_json(meta["model"])
    retriever = None
    if "retriever" in meta:
        retriever = ShapePriorRetriever(RetrieverConfig(**meta["retriever"]))
    model = ShapeFormer(cfg, retriever=retriever)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.freeze_retriever()
    model.eval()
    return model


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))
