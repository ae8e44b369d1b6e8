"""Train several model variants under identical data, seeds and budget, and
compare their evaluation reports."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .metrics import MASK_TYPES, EvalReport
from .model import VARIANTS, ModelConfig, variant_config
from .retriever import ShapePriorRetriever
from .synth import SceneRecord
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

METRICS = ("mean_iou", "AP50", "AP75", "AP", "AR100")


def needs_retriever(cfg: ModelConfig) -> bool:
    return cfg.use_prior and not (cfg.bidirectional or cfg.visible_only)


@dataclass
class AblationResult:
    variants: list[str]
    seeds: list[int]
    reports: dict[str, dict[int, EvalReport]] = field(default_factory=dict)
    param_hashes: dict[str, dict[int, str]] = field(default_factory=dict)
    seconds: dict[str, dict[int, float]] = field(default_factory=dict)

    def mean(self, variant: str, mask_type: str, metric: str = "mean_iou") -> float:
        vals = [self.reports[variant][s].to_json()[mask_type][metric] for s in self.seeds
                if mask_type in self.reports[variant][s].per_type]
        return float(np.mean(vals)) if vals else float("nan")

    def per_seed(self, variant: str, mask_type: str, metric: str = "mean_iou") -> list[float]:
        return [self.reports[variant][s].to_json()[mask_type][metric] for s in self.seeds]

    def deltas(self, reference: str = "full") -> dict[str, dict[str, dict[str, float]]]:
        """Seed-averaged ``variant - reference`` per mask type and metric."""
        out = {}
        for v in self.variants:
            if v == reference:
                continue
            out[v] = {t: {m: self.mean(v, t, m) - self.mean(reference, t, m) for m in METRICS}
                      for t in MASK_TYPES
                      if t in self.reports[v][self.seeds[0]].per_type
                      and t in self.reports[reference][self.seeds[0]].per_type}
        return out

    def table(self) -> list[dict]:
        rows = []
        for v in self.variants:
            row = {"variant": v}
            for t in MASK_TYPES:
                if t in self.reports[v][self.seeds[0]].per_type:
                    row[f"{t}_mean_iou"] = self.mean(v, t)
                    row[f"{t}_AP"] = self.mean(v, t, "AP")
            rows.append(row)
        return rows

    def to_json(self) -> dict:
        ref = "full" if "full" in self.variants else self.variants[0]
        return {
            "variants": self.variants,
            "seeds": self.seeds,
            "reports": {v: {str(s): r.to_json() for s, r in by.items()} for v, by in self.reports.items()},
            "table": self.table(),
            "reference": ref,
            "deltas": self.deltas(ref),
            "param_hashes": {v: {str(s): h for s, h in by.items()} for v, by in self.param_hashes.items()},
            "seconds": {v: {str(s): t for s, t in by.items()} for v, by in self.seconds.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AblationResult":
        res = cls(list(obj["variants"]), [int(s) for s in obj["seeds"]])
        res.reports = {v: {int(s): EvalReport.from_json(r) for s, r in by.items()}
                       for v, by in obj["reports"].items()}
        res.param_hashes = {v: {int(s): h for s, h in by.items()} for v, by in obj.get("param_hashes", {}).items()}
        res.seconds = {v: {int(s): t for s, t in by.items()} for v, by in obj.get("seconds", {}).items()}
        return res


def run_ablation(variants: Sequence[str], base: ModelConfig, train_cfg: TrainConfig,
                 train_records: Sequence[SceneRecord], test_records: Sequence[SceneRecord],
                 retriever: Optional[ShapePriorRetriever] = None, seeds: Sequence[int] = (0, 1, 2),
                 on_run: Optional[Callable[[str, int, EvalReport], None]] = None) -> AblationResult:
    """Every variant is trained once per seed from ``base`` with the same
    ``train_cfg`` (only its seed changes) and evaluated on ``test_records``."""
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
    result = AblationResult(list(variants), list(seeds))
    for seed in seeds:
        for v in variants:
            cfg = variant_config(base, v)
            if needs_retriever(cfg) and retriever is None:
                raise ValueError(f"variant {v!r} needs a pretrained retriever")
            tcfg = TrainConfig(**{**train_cfg.to_json(), "seed": int(seed)})
            start = time.perf_counter()
            run = train(cfg, tcfg, train_records, retriever=retriever if needs_retriever(cfg) else None)
            report = evaluate(run.model, test_records)
            elapsed = time.perf_counter() - start
            result.reports.setdefault(v, {})[seed] = report
            result.param_hashes.setdefault(v, {})[seed] = run.param_hash
            result.seconds.setdefault(v, {})[seed] = elapsed
            log.info("ablation %s seed %d: amodal IoU %.4f visible IoU %.4f (%.0fs)", v, seed,
                     report.per_type["amodal"].mean_iou if "amodal" in report.per_type else float("nan"),
                     report.per_type["visible"].mean_iou, elapsed)
            if on_run:
                on_run(v, seed, report)
    return result
