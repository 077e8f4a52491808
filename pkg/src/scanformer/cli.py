"""``scanformer`` command line: gen | train | eval | bench | flops | viz."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from . import numerics as nx
from .config import RunConfig, load_config
from .errors import InputError, ScanFormerError
from .model import ScanFormer
from .objectives import metric_rows
from .pyramid import pyramid_batch
from .report import emit_selection_map, flops_estimate, selection_stats
from .synthgym import load_manifest, make_dataset, render_dataset
from .trainer import evaluate, load_checkpoint, train

log = logging.getLogger("scanformer")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.model = dataclasses.replace(cfg.model, seed=args.seed)
        cfg.train.seed = args.seed
        cfg.gen.train_seed = args.seed
    if args.out is not None:
        out = str(Path(args.out).resolve())
        if args.command == "gen":
            cfg.paths.data_dir = out
        else:
            cfg.paths.out_dir = out
    if getattr(args, "checkpoint", None) is not None:
        cfg.paths.checkpoint = str(Path(args.checkpoint).resolve())
    return cfg


def _split(cfg: RunConfig, name: str):
    manifest = Path(cfg.paths.data_dir) / name / "manifest.txt"
    if not manifest.exists():
        raise InputError(f"{manifest} not found; run `scanformer gen` first")
    return load_manifest(manifest)


def _model(cfg: RunConfig, required: bool = True) -> ScanFormer:
    path = Path(cfg.paths.checkpoint)
    if path.exists():
        return load_checkpoint(path)
    if required:
        raise InputError(f"checkpoint {path} not found")
    return ScanFormer(cfg.model)


def cmd_gen(cfg: RunConfig, args) -> None:
    root = Path(cfg.paths.data_dir)
    render_dataset(cfg.train.n_train, cfg.gen.train_seed, root / "train", cfg.gen)
    render_dataset(cfg.train.n_val, cfg.gen.val_seed, root / "val", cfg.gen)
    print(f"wrote {cfg.train.n_train} train and {cfg.train.n_val} val samples to {root}")


def cmd_train(cfg: RunConfig, args) -> None:
    model = ScanFormer(cfg.model)
    history = train(model, cfg.train, _split(cfg, "train"), _split(cfg, "val"),
                    out_dir=cfg.paths.out_dir, checkpoint=cfg.paths.checkpoint)
    last = history[-1]
    print(f"trained {len(history)} epochs; final l_bbox {last['l_bbox']:.4f}; "
          f"checkpoint {cfg.paths.checkpoint}")


def cmd_eval(cfg: RunConfig, args) -> None:
    model = _model(cfg)
    data = _split(cfg, "val")
    res = evaluate(model, data, merge=True)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ratios = res.kept / np.asarray(res.totals)
    (out / "eval.csv").write_text(metric_rows(res.ious, res.boxes, ratios))
    (out / "selection_stats.csv").write_text(selection_stats(res.kept, res.totals))
    for l in range(model.cfg.scales):
        print(f"scale {l}: Acc@0.5 {res.acc[l]:.2f}  mean IoU {res.mean_iou[l]:.4f}  "
              f"kept ratio {res.ratio[l]:.4f}")
    print(f"mean MACs per scan {res.macs.mean():.0f}")


def _median_scan_time(model, data, n, merge) -> float:
    times = []
    with nx.no_grad():
        for i in range(n):
            j = i % len(data)
            t0 = time.perf_counter()
            model.scan(data.images[j], data.ids[j], mode="eval", merge=merge)
            times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(cfg: RunConfig, args) -> None:
    model = _model(cfg, required=False)
    data = make_dataset(min(args.scans, 50), cfg.gen.val_seed, cfg.gen)
    res = evaluate(model, data, merge=True)
    kept = np.round(res.kept.mean(axis=0)).astype(int)
    text_len = int(round(float((data.ids != 0).sum(axis=1).mean())))
    print(flops_estimate(model.cfg, kept, text_len).format())
    print(f"measured mean MACs per scan (merged) {res.macs.mean():.0f}")
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    print("backend,mode,median_ms")
    for backend in backends:
        with kernels.use_backend(backend):
            for merge in (True, False):
                t = _median_scan_time(model, data, args.scans, merge)
                print(f"{backend},{'merged' if merge else 'duplicate'},{1e3 * t:.3f}")


def cmd_flops(cfg: RunConfig, args) -> None:
    mc = cfg.model
    if args.kept:
        kept = [int(v) for v in args.kept.split(",")]
    else:
        # the sparsity targets: half of scale 1, a quarter of scale 2, ...
        kept = [mc.tokens(0)] + [int(round(mc.tokens(l) * 2.0 ** -l)) for l in range(1, mc.scales)]
    text_len = mc.text_len if args.text_len is None else args.text_len
    print(flops_estimate(mc, kept, text_len).format())


def cmd_viz(cfg: RunConfig, args) -> None:
    model = _model(cfg)
    data = _split(cfg, "val")
    if not 0 <= args.sample < len(data):
        raise InputError(f"sample {args.sample} outside 0..{len(data) - 1}")
    img, ids = data.images[args.sample], data.ids[args.sample]
    with nx.no_grad():
        state = model.scan(img, ids, mode="eval", merge=True)
    levels = pyramid_batch(img[None].astype(np.float32), model.cfg.scales)
    out = Path(cfg.paths.out_dir) / f"sample{args.sample:06d}.ppm"
    for p in emit_selection_map(state, levels, out, model.cfg.patch):
        print(p)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "flops": cmd_flops, "viz": cmd_viz}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scanformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override model/train/gen seeds")
        p.add_argument("--out", help="output directory (dataset root for gen)")
        p.add_argument("--checkpoint", help="checkpoint file")
        if name == "bench":
            p.add_argument("--scans", type=int, default=100, help="timed scans per mode")
        if name == "flops":
            p.add_argument("--kept", help="comma-separated kept patches per scale")
            p.add_argument("--text-len", type=int, help="query length in words")
        if name == "viz":
            p.add_argument("--sample", type=int, default=0, help="validation sample index")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except (ScanFormerError, OSError) as exc:
        print(f"scanformer {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
