"""Command-line entry point.

Subcommands: gen-data, train-prior, train, eval, infer, ablate, plot.  Every
successful command writes a ``run_<command>.json`` manifest next to its
outputs.  Usage errors exit with status 2, runtime failures with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .ablation import needs_retriever, run_ablation
from .config import RunConfig, load_config, resolve_seed
from .errors import MissingArtifact, ShapeFormerError, UsageError
from .masks import rle_encode
from .model import VARIANTS, ShapeFormer, variant_config
from .plots import attention_heatmaps, plot_run, roi_panel
from .prior import evaluate_prior, load_retriever, save_retriever, train_prior
from .synth import SceneRecord, generate_split, read_dataset, read_manifest, write_dataset
from .train import evaluate, load_model, predict_scene, save_model, train, write_json

log = logging.getLogger("shapeformer")

TEST_OFFSET = 1_000_000  # scene-index offset of the test split, keeps it disjoint from train


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: Optional[int]
    code_version: str
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)

    def write(self, out_dir) -> Path:
        """Atomically write ``run_<command>.json``; every listed output must exist."""
        out_dir = Path(out_dir)
        missing = [p for p in self.outputs if not (out_dir / p).exists()]
        if missing:
            raise MissingArtifact(f"outputs not written: {missing}")
        self.finished = _now()
        path = out_dir / f"run_{self.command}.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2))
        os.replace(tmp, path)
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _manifest(args, cfg: Optional[RunConfig], seed: Optional[int]) -> RunManifest:
    return RunManifest(command=args.command, argv=list(args.argv), config=cfg.to_dict() if cfg else {},
                       seed=seed, code_version=__version__, started=_now())


def _rel(paths, root: Path) -> list[str]:
    return [str(Path(p).resolve().relative_to(root.resolve())) for p in paths]


def _config(args) -> tuple[RunConfig, int]:
    cfg = load_config(getattr(args, "config", None))
    seed = resolve_seed(getattr(args, "seed", None), cfg.seed)
    return cfg.with_seed(seed), seed


def _data(path, split: str):
    path = Path(path)
    if not (path / "manifest.json").exists() and not path.is_file():
        raise UsageError(f"no dataset manifest under {path}")
    return read_dataset(path, split)


def _has_split(path, split: str) -> bool:
    return split in read_manifest(path).splits and bool(read_manifest(path).splits[split])


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg, seed = _config(args)
    out = Path(args.out)
    train_recs = generate_split(cfg.data, args.train)
    test_recs = generate_split(cfg.data, args.test, offset=TEST_OFFSET)
    man = _manifest(args, cfg, seed)
    write_dataset({"train": train_recs, "test": test_recs}, out / "manifest.json", config=cfg.data)
    cfg.dump(out / "config.yaml")
    files = ["manifest.json", "config.yaml"] + [f"{s}/scene_{i:06d}.json" for s, n in
                                                (("train", args.train), ("test", args.test)) for i in range(n)]
    man.outputs = files
    man.write(out)
    print(json.dumps({"train": args.train, "test": args.test, "out": str(out)}))
    return 0


def cmd_train_prior(args) -> int:
    cfg, seed = _config(args)
    if args.no_category:
        cfg.retriever.category_specific = False
    if args.no_augment:
        cfg.prior.augment = False
    if args.epochs is not None:
        cfg.prior.epochs = args.epochs
    records = _data(args.data, "train")
    cfg.retriever.num_categories = cfg.model.num_categories = read_manifest(args.data).config.get(
        "num_categories", cfg.retriever.num_categories)
    retriever, history = train_prior(records, cfg.prior, cfg.retriever)
    ckpt = Path(args.out)
    out = ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, cfg, seed)
    save_retriever(retriever, ckpt, extra={"prior": cfg.prior.to_json()})
    hist_path = out / f"{ckpt.stem}_history.json"
    write_json(hist_path, history)
    outputs = [ckpt, hist_path]
    if _has_split(args.data, "test"):
        ev_path = out / f"{ckpt.stem}_eval_test.json"
        report = evaluate_prior(retriever, _data(args.data, "test"))
        write_json(ev_path, report)
        outputs.append(ev_path)
        print(json.dumps(report))
    man.outputs = _rel(outputs, out)
    man.write(out)
    return 0


def _retriever_for(cfg: RunConfig, variant: str, prior_ckpt):
    mc = variant_config(cfg.model, variant)
    if not needs_retriever(mc):
        return None
    if prior_ckpt is None:
        raise UsageError(f"variant {variant!r} needs --prior-ckpt")
    if not Path(prior_ckpt).exists():
        raise MissingArtifact(f"retriever checkpoint {prior_ckpt} not found")
    return load_retriever(prior_ckpt)


def _sync_categories(cfg: RunConfig, data) -> None:
    n = read_manifest(data).config.get("num_categories")
    if n is not None:
        cfg.model.num_categories = cfg.retriever.num_categories = cfg.data.num_categories = int(n)
    size = read_manifest(data).config.get("image_size")
    if size is not None:
        cfg.model.image_size = int(size)


def cmd_train(args) -> int:
    cfg, seed = _config(args)
    if args.variant:
        cfg.variant = args.variant
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    _sync_categories(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _data(args.data, "train")
    test = _data(args.data, "test") if _has_split(args.data, "test") else None
    retriever = _retriever_for(cfg, cfg.variant, args.prior_ckpt)
    man = _manifest(args, cfg, seed)
    cfg.dump(out / "config.yaml")
    result = train(variant_config(cfg.model, cfg.variant), cfg.train, records, retriever=retriever,
                   eval_records=test, out_dir=out)
    if result.aborted:
        raise ShapeFormerError("training aborted on a non-finite loss; last good checkpoint kept")
    save_model(result.model, out / "model.ckpt", extra={"variant": cfg.variant, "param_hash": result.param_hash})
    write_json(out / "history.json", result.history)
    outputs = ["config.yaml", "model.ckpt", "history.json"]
    if result.evals:
        final = {k: v for k, v in result.evals[-1].items() if k != "epoch"}
        write_json(out / "eval_test.json", final)
        write_json(out / "evals.json", result.evals)
        outputs += ["eval_test.json", "evals.json"]
    man.outputs = outputs
    man.write(out)
    print(json.dumps({"param_hash": result.param_hash, "retriever_hash": result.retriever_hash,
                      "final_loss": result.history[-1]["total"] if result.history else None}))
    return 0


def cmd_eval(args) -> int:
    if not Path(args.ckpt).exists():
        raise MissingArtifact(f"checkpoint {args.ckpt} not found")
    model = load_model(args.ckpt)
    report = evaluate(model, _data(args.data, args.split))
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, None, None)
    name = f"eval_{args.split}.json"
    (out / name).write_text(report.dumps())
    man.outputs = [name]
    man.write(out)
    print(report.dumps())
    return 0


def _attention_maps(model: ShapeFormer, rec: SceneRecord) -> dict[str, np.ndarray]:
    """Final-layer amodal cross-attention with and without the prior mask."""
    if model.spa is None:
        return {}
    r = model.cfg.roi_size
    maps = {}
    saved = model.cfg.prior_mask
    try:
        for name, flag in (("masked", True), ("unmasked", False)):
            if flag and model.retriever is None:
                continue
            model.cfg.prior_mask = flag
            preds = predict_scene(model, rec, keep_attention=True)
            maps[name] = np.stack([p["attention"] for p in preds]).reshape(len(preds), -1, r, r)
    finally:
        model.cfg.prior_mask = saved
    return maps


def cmd_infer(args) -> int:
    if not Path(args.ckpt).exists():
        raise MissingArtifact(f"checkpoint {args.ckpt} not found")
    try:
        rec = SceneRecord.from_json(json.loads(Path(args.image).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read scene {args.image}: {exc}") from exc
    model = load_model(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, None, None)
    preds = predict_scene(model, rec, keep_attention=model.spa is not None)
    maps = _attention_maps(model, rec)
    main_map = maps.get("masked", maps.get("unmasked"))
    s = model.mask_size
    outputs, rois = [], []
    for i, (inst, p) in enumerate(zip(rec.instances, preds)):
        crop = rec.image[inst.box.y0:inst.box.y1, inst.box.x0:inst.box.x1].astype(np.float64) / 255.0
        soft = p["roi_soft"]
        cols = {"input RoI": crop, "visible": soft["visible"], "occluding": soft["occluding"],
                "amodal": soft.get("amodal"), "occluded": soft.get("occluded"),
                "prior": p.get("prior"), "attention": None if main_map is None else main_map[i, 0]}
        name = f"roi_{i:03d}.png"
        roi_panel(cols, out / name)
        outputs.append(name)
        rois.append({
            "index": i, "box": inst.box.as_list(), "category": p["category"], "score": p["score"],
            "masks": {k: rle_encode(m).to_json() for k, m in p["masks"].items()},
            "prior_fallback": p.get("prior_fallback"),
        })
    write_json(out / "masks.json", {"mask_size": s, "rois": rois})
    outputs.append("masks.json")
    if maps:
        np.savez(out / "attention.npz", **maps)
        attention_heatmaps(maps, out / "attention_heatmaps.png")
        outputs += ["attention.npz", "attention_heatmaps.png"]
    man.outputs = outputs
    man.write(out)
    print(json.dumps({"rois": len(rois), "out": str(out)}))
    return 0


def cmd_ablate(args) -> int:
    cfg, seed = _config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise UsageError(f"unknown variants {bad}; choose from {VARIANTS}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    _sync_categories(cfg, args.data)
    retriever = None
    if any(needs_retriever(variant_config(cfg.model, v)) for v in variants):
        retriever = _retriever_for(cfg, next(v for v in variants if needs_retriever(variant_config(cfg.model, v))),
                                   args.prior_ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, cfg, seed)
    cfg.dump(out / "config.yaml")
    seeds = [seed + i for i in range(args.seeds)]
    result = run_ablation(variants, cfg.model, cfg.train, _data(args.data, "train"), _data(args.data, "test"),
                          retriever=retriever, seeds=seeds)
    write_json(out / "ablation.json", result.to_json())
    man.outputs = ["config.yaml", "ablation.json"]
    man.write(out)
    print(json.dumps(result.table(), indent=2))
    return 0


def cmd_plot(args) -> int:
    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir
    made = plot_run(run_dir, out)
    man = _manifest(args, None, None)
    man.outputs = _rel(made, out)
    man.write(out)
    print(json.dumps([str(p) for p in made]))
    return 0


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = ArgumentParser(prog="shapeformer", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", parser_class=ArgumentParser)

    g = sub.add_parser("gen-data", help="generate the synthetic occlusion benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=500)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("train-prior", help="pretrain the shape-prior retriever")
    r.add_argument("--config")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True, help="checkpoint path")
    r.add_argument("--no-category", action="store_true", help="one shared codebook")
    r.add_argument("--no-augment", action="store_true", help="train on scene visible masks only")
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_train_prior)

    t = sub.add_parser("train", help="train the mask heads with a frozen retriever")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--prior-ckpt")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="per-RoI panels and RLE masks for one scene")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True, help="scene JSON file")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and compare variants over several seeds")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--prior-ckpt")
    a.add_argument("--out", required=True)
    a.add_argument("--variants", default="full,no-prior-mask")
    a.add_argument("--seeds", type=int, default=3, help="number of seeds, counted up from the run seed")
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render figures for a run directory")
    pl.add_argument("run_dir")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    args.argv = argv
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ShapeFormerError, OSError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
