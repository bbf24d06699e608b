"""Command-line entry point exposing the whole pipeline.

Subcommands: gen-data, extract-fractions, pretrain, finetune, evaluate,
predict, inspect-shapes, bench-flops. Every run directory receives a
``run.json`` with the exact resolved config and seed before any
computation, so each run is reproducible from its snapshot alone.
Flag precedence is flags > config file > defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evaluation, fractions, synthetic, training
from .config import ConfigError, RunConfig, config_hash, from_dict, load_config, to_dict


def _toy_config_dict() -> dict:
    return {"sources": [{"name": "sentinel2", "tile_size": 64}]}


def _load(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = from_dict(_toy_config_dict())
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, training=replace(cfg.training, seed=args.seed))
    if getattr(args, "source", None):
        wanted = list(dict.fromkeys(args.source))
        picked = tuple(s for s in cfg.sources if s.name in wanted)
        missing = [n for n in wanted if n not in [s.name for s in picked]]
        if missing:
            raise ConfigError(f"--source names not in config: {missing}")
        cfg = replace(cfg, sources=picked)
    return cfg


def _write_run_meta(out_dir: Path, cfg: RunConfig, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"command": command, "seed": cfg.training.seed, "config_hash": config_hash(cfg), "config": to_dict(cfg)}
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _add_common(p: argparse.ArgumentParser, *, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, default=None, help="path to the JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override training.seed from the config")
    p.add_argument("--source", action="append", default=None, help="restrict to a configured source (repeatable)")


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _write_run_meta(out, cfg, "gen-data")
    recipe = synthetic.SceneRecipe.from_config(cfg)
    tiles = args.tiles if args.tiles is not None else cfg.data.tiles
    manifest = synthetic.write_dataset(
        recipe,
        tiles,
        out,
        val_fraction=cfg.data.val_fraction,
        test_fraction=cfg.data.test_fraction,
        min_len=cfg.data.min_len,
        workers=args.workers,
    )
    print(f"wrote {tiles} tiles and {manifest}")
    return 0


def cmd_extract_fractions(args) -> int:
    header = Path(args.labels).with_suffix(".json")
    if header.exists():
        raster = synthetic.read_array(Path(args.labels).with_suffix(""))
    elif args.labels.endswith(".npy"):
        raster = np.load(args.labels)
    else:
        raise ConfigError(f"label raster {args.labels} needs a .json header or .npy format")
    mapping = fractions.ClassMapping.from_json(args.mapping) if args.mapping else fractions.ClassMapping.identity()
    tiles = fractions.crop_tiles(np.asarray(raster), args.tile)
    with open(args.out, "w") as fh:
        for (r, c), tile in tiles:
            vec = fractions.compute_fractions(tile, mapping)
            fh.write(json.dumps({"geo_id": f"r{r}_c{c}", "offset": [r, c], "fraction": vec.tolist()}) + "\n")
    print(f"wrote {len(tiles)} tile fractions to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    bundle = training.pretrain(cfg, args.data, args.out)
    print(f"pretrained {bundle.metadata['iteration']} iterations -> {Path(args.out) / 'checkpoints' / 'final'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load(args)
    if args.data_fraction is not None:
        cfg = replace(cfg, training=replace(cfg.training, finetune=replace(cfg.training.finetune, data_fraction=args.data_fraction)))
    init = None
    if args.init:
        init = ckpt.load_checkpoint(args.init)
    elif not args.scratch:
        raise ConfigError("finetune needs --init <checkpoint dir> or --scratch")
    bundle = training.finetune(cfg, args.data, args.out, init=init, scratch=args.scratch)
    print(f"finetuned; best epoch {bundle.metadata['best_epoch']} -> {Path(args.out) / 'checkpoints' / 'best'}")
    return 0


def _load_mapping_model(cfg: RunConfig, checkpoint_dir):
    bundle = ckpt.load_checkpoint(checkpoint_dir)
    model = training.build_mapping_model(cfg)
    ckpt.apply_to_module(model, bundle.student, int_state=bundle.metadata.get("int_state"), strict=True)
    model.eval()
    return model


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _write_run_meta(out, cfg, "evaluate")
    dataset = synthetic.SceneDataset(args.data)
    model = _load_mapping_model(cfg, args.checkpoint)
    geo_ids = dataset.geo_ids(args.split)
    if not geo_ids:
        raise ConfigError(f"no tiles in split {args.split!r}")
    settings = cfg.training.finetune
    counts = None
    sample_pred = sample_label = None
    for gid in geo_ids:
        pred, _ = training.predict_tile(model, dataset, cfg, gid, frames_override=args.frames)
        label = dataset.load_label(gid).astype(np.int64)
        c = evaluation.confusion(pred, label, settings.num_classes, ignore_index=settings.ignore_index)
        counts = c if counts is None else counts.merge(c)
        if sample_pred is None:
            sample_pred, sample_label = pred, label
    report = evaluation.metrics(counts)
    report["split"] = args.split
    report["tiles"] = len(geo_ids)
    report["config_hash"] = config_hash(cfg)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    if args.plots:
        evaluation.plot_f1_bars(report, out / "f1_bars.png")
        evaluation.plot_prediction_panel(sample_pred, sample_label, out / "prediction_panel.png")
        for name in ("pretrain_log.jsonl", "finetune_log.jsonl"):
            log = Path(args.checkpoint).parent.parent / name
            if log.exists():
                evaluation.plot_training_curves(log, out / name.replace(".jsonl", ".png"))
    print(f"macro F1 {report['macro']['f1']:.4f}, OA {report['overall_accuracy']:.4f} over {len(geo_ids)} tiles -> {out / 'report.json'}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _write_run_meta(out, cfg, "predict")
    dataset = synthetic.SceneDataset(args.data)
    model = _load_mapping_model(cfg, args.checkpoint)
    geo_id = args.geo_id or dataset.geo_ids("test")[0]
    pred, probs = training.predict_tile(model, dataset, cfg, geo_id, frames_override=args.frames)
    bin_path = out / f"{geo_id}.pred.bin"
    bin_path.write_bytes(np.ascontiguousarray(pred, dtype=np.uint8).tobytes())
    header = {"shape": list(pred.shape), "dtype": "uint8", "order": "HW", "byteorder": "little"}
    (out / f"{geo_id}.pred.json").write_text(json.dumps(header) + "\n")
    palette = {str(k): c for k, c in enumerate(_palette(cfg.training.finetune.num_classes))}
    (out / f"{geo_id}.palette.json").write_text(json.dumps(palette, indent=2) + "\n")
    if args.probs:
        (out / f"{geo_id}.probs.bin").write_bytes(np.ascontiguousarray(probs, dtype="<f4").tobytes())
    print(f"wrote class map {tuple(pred.shape)} for {geo_id} -> {bin_path}")
    return 0


def _palette(n: int) -> list:
    base = [
        [31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189],
        [140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207],
    ]
    return [base[i % len(base)] for i in range(n)]


def cmd_inspect_shapes(args) -> int:
    cfg = _load(args)
    from .backbone import stage_shapes, temporal_patch_size

    spec = cfg.sources[0]
    s1 = temporal_patch_size(args.T, threshold=spec.temporal_patch_threshold)
    shapes = stage_shapes(cfg.model, args.T, args.size, args.size, s1, spec.spatial_patch)
    print(f"input: T={args.T} H={args.size} W={args.size} (temporal patch {s1}, spatial patch {spec.spatial_patch})")
    for i, (t, h, w, c) in enumerate(shapes, start=1):
        print(f"stage{i}: T={t} H={h} W={w} C={c}")
    return 0


def cmd_bench_flops(args) -> int:
    cfg = _load(args)
    from .backbone import temporal_patch_size

    spec = cfg.sources[0]
    s1 = temporal_patch_size(args.T, threshold=spec.temporal_patch_threshold)
    size = args.size or spec.tile_size
    t1 = args.T // s1
    comparison = evaluation.flops_comparison(
        cfg.model, t1, size, size, bands=spec.bands, temporal_patch=s1, num_classes=cfg.training.finetune.num_classes
    )
    report = {
        "raw_frames": args.T,
        "stage1_frames": t1,
        "size": size,
        "enabled_total_macs": comparison["enabled"]["total"],
        "disabled_total_macs": comparison["disabled"]["total"],
        "ratio": comparison["ratio"],
        "detail": comparison,
    }
    if not args.skip_wallclock:
        enabled_s = evaluation.wallclock_forward_seconds(cfg.model, spec, args.T)
        disabled_s = evaluation.wallclock_forward_seconds(replace(cfg.model, temporal_downsampling=False), spec, args.T)
        report["wallclock_enabled_s"] = enabled_s
        report["wallclock_disabled_s"] = disabled_s
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    print(f"temporal downsampling MACs: enabled {report['enabled_total_macs']:,} vs disabled {report['disabled_total_macs']:,} (ratio {report['ratio']:.3f})")
    if not args.skip_wallclock:
        print(f"wall-clock forward: enabled {report['wallclock_enabled_s'] * 1e3:.1f} ms vs disabled {report['wallclock_disabled_s'] * 1e3:.1f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phenomap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, **kwargs):
        p = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter, **kwargs)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic multi-source dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--tiles", type=int, default=None, help="tile count (default: data.tiles from the config)")
    p.add_argument("--workers", type=int, default=1, help="parallel generation workers (output is worker-count independent)")

    p = add("extract-fractions", cmd_extract_fractions, "tile a label raster and compute per-tile fractions")
    p.add_argument("--labels", required=True, help="label raster (.bin with .json header, or .npy)")
    p.add_argument("--mapping", default=None, help="class-mapping JSON (code -> bin); default identity")
    p.add_argument("--tile", type=int, default=224, help="tile edge in pixels")
    p.add_argument("--out", required=True, help="output JSONL path")

    p = add("pretrain", cmd_pretrain, "fraction-regression pretraining")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    p.add_argument("--out", required=True, help="run directory")

    p = add("finetune", cmd_finetune, "task finetuning with hard-mined cross-entropy")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--init", default=None, help="pretraining checkpoint directory")
    p.add_argument("--scratch", action="store_true", help="train from random initialization")
    p.add_argument("--data-fraction", type=float, default=None, help="train on a seeded fraction of the training tiles")

    p = add("evaluate", cmd_evaluate, "confusion-matrix metrics over a split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory (finetune 'best')")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.add_argument("--frames", type=int, default=None, help="override the evaluation clip length")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True, help="emit plot image files")

    p = add("predict", cmd_predict, "write one tile's class map")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--geo-id", default=None, help="tile id (default: first test tile)")
    p.add_argument("--frames", type=int, default=None, help="override the clip length")
    p.add_argument("--probs", action="store_true", help="also dump per-class probabilities as float32")

    p = add("inspect-shapes", cmd_inspect_shapes, "print the four-stage shape chain for a clip size")
    _add_common(p)
    p.add_argument("--T", type=int, required=True, help="clip length in frames")
    p.add_argument("--size", type=int, required=True, help="square tile edge in pixels")

    p = add("bench-flops", cmd_bench_flops, "compare MACs with temporal downsampling on vs off")
    _add_common(p)
    p.add_argument("--T", type=int, default=16, help="raw clip length in frames")
    p.add_argument("--size", type=int, default=None, help="tile edge (default: first source's tile_size)")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--skip-wallclock", action="store_true", help="skip the wall-clock forward timing")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
