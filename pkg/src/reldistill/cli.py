"""Command-line driver.

Usage::

    reldistill pretrain-classifier --config exp.ini
    reldistill train-base --config exp.ini
    reldistill distill --config exp.ini --method rdd [--no-isp2p] [--no-mp2p] ...
    reldistill sample --checkpoint runs/x/distill/rdd/student_0001.pt --steps 1 --n 64
    reldistill evaluate --config exp.ini --checkpoint ... --steps 1

All artifacts go under ``[run] output_dir``; every command also writes its
resolved config and a provenance record into ``runs/<command>-<hash>/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, load_extractor, load_model, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import load_dataset
from .evaluation import evaluate_model, generate, load_stats, reference_stats
from .models import ConvClassifier, UNet
from .trainer import pretrain_classifier, progressive_distill, train_base


def _git_hash() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _record_run(cfg: ExperimentConfig, command: str, extra: Optional[dict] = None) -> Path:
    run_dir = Path(cfg.run.output_dir) / "runs" / f"{command}-{cfg.content_hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    prov = {"command": command, "config_hash": cfg.content_hash(), "seed": cfg.run.seed,
            "version": __version__, "git": _git_hash(), "time": time.time(), **(extra or {})}
    (run_dir / "provenance.json").write_text(json.dumps(prov, indent=2))
    return run_dir


def _append_metrics(cfg: ExperimentConfig, record: dict):
    path = Path(cfg.run.output_dir) / "metrics.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _dataset(cfg: ExperimentConfig):
    d = cfg.dataset
    return load_dataset(d.name, d.path, d.resolution, d.grayscale)


def _out(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.run.output_dir) / name


def cmd_pretrain_classifier(cfg: ExperimentConfig) -> Path:
    images, labels = _dataset(cfg)
    torch.manual_seed(cfg.run.seed)  # weight init
    clf = ConvClassifier(in_channels=images.shape[1], widths=cfg.model.classifier_widths,
                         num_classes=int(labels.max()) + 1, image_size=images.shape[-1])
    ext, acc = pretrain_classifier(images, labels, clf, cfg.train_config("classifier"),
                                   holdout=cfg.classifier.holdout)
    path = save_checkpoint(_out(cfg, "classifier.pt"), ext, config=cfg.train_config("classifier"),
                           meta={"holdout_accuracy": acc, "checksum": ext.checksum()})
    _append_metrics(cfg, {"command": "pretrain-classifier", "holdout_accuracy": acc})
    _record_run(cfg, "pretrain-classifier", {"checkpoint": str(path)})
    return path


def cmd_train_base(cfg: ExperimentConfig) -> Path:
    images, labels = _dataset(cfg)
    n_classes = int(labels.max()) + 1 if cfg.dataset.conditional else 0
    m = cfg.model
    torch.manual_seed(cfg.run.seed)
    model = UNet(in_channels=images.shape[1], base_channels=m.base_channels,
                 channel_mults=m.channel_mults, num_res_blocks=m.num_res_blocks,
                 num_classes=n_classes, dropout=m.dropout, image_size=images.shape[-1])
    tc = cfg.train_config("base")
    tc.metrics_path = str(_out(cfg, "base_metrics.jsonl"))
    model, ema, report = train_base(images, model, tc, labels=labels if n_classes else None)
    path = save_checkpoint(_out(cfg, "base.pt"), model, ema=ema, config=tc,
                           meta={"n_steps": cfg.distill.start_steps, "losses": report.series()})
    _record_run(cfg, "train-base", {"checkpoint": str(path)})
    return path


def method_tag(cfg: ExperimentConfig) -> str:
    d = cfg.distill
    flags = [name for name in ("no_cfd", "no_isp2p", "no_mp2p", "ii_p2p", "pd_mse") if getattr(d, name)]
    return "-".join([d.method] + flags)


def cmd_distill(cfg: ExperimentConfig, base_path: Optional[str] = None,
                classifier_path: Optional[str] = None) -> list[Path]:
    images, labels = _dataset(cfg)
    teacher = load_model(base_path or _out(cfg, "base.pt"))
    extractor = load_extractor(classifier_path or _out(cfg, "classifier.pt"))
    out_dir = _out(cfg, f"distill/{method_tag(cfg)}")
    stages = cfg.stage_configs(str(out_dir / "metrics.jsonl"))
    chain = progressive_distill(teacher, cfg.distill.start_steps, cfg.distill.end_steps, images, extractor,
                                [c for _, c in stages], labels=labels if cfg.dataset.conditional else None,
                                checkpoint_dir=out_dir)
    paths = [Path(report.checkpoint) for _, _, report in chain]
    _record_run(cfg, f"distill-{method_tag(cfg)}", {"checkpoints": [str(p) for p in paths]})
    return paths


def write_grid(images: torch.Tensor, path) -> Path:
    """Tile ``(N, C, H, W)`` images in [-1, 1] row-major by index into a PNG."""
    from PIL import Image

    n, c, h, w = images.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    arr = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i in range(n):
        r, k = divmod(i, cols)
        grid[r * h:(r + 1) * h, k * w:(k + 1) * w] = arr[i]
    img = Image.fromarray(grid[:, :, 0] if c == 1 else grid)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path


def cmd_sample(checkpoint, n_steps: int, n: int, seed: int, out) -> Path:
    model = load_model(checkpoint)
    shape = (model.in_channels, model.image_size, model.image_size)
    return write_grid(generate(model, n_steps, n, seed, shape), out)


def cmd_evaluate(cfg: ExperimentConfig, checkpoint, n_steps: int, reference: Optional[str] = None,
                 n_samples: Optional[int] = None, seed: Optional[int] = None,
                 classifier_path: Optional[str] = None) -> dict:
    model = load_model(checkpoint)
    extractor = load_extractor(classifier_path or _out(cfg, "classifier.pt"))
    if reference:
        ref = load_stats(reference, extractor.checksum())
    else:
        images, _ = _dataset(cfg)
        ref = reference_stats(_out(cfg, "stats"), cfg.dataset.name, extractor, images)
    record = evaluate_model(model, n_steps, n_samples or cfg.eval.n_samples, extractor, ref,
                            seed=cfg.run.seed if seed is None else seed, splits=cfg.eval.splits)
    record = {"command": "evaluate", "checkpoint": str(checkpoint), **record}
    _append_metrics(cfg, record)
    return record


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reldistill", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI experiment config (defaults are used when omitted)")
        sp.add_argument("--output-dir", help="override [run] output_dir")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        return sp

    with_config(sub.add_parser("pretrain-classifier", help="train the feature-extractor classifier"))
    with_config(sub.add_parser("train-base", help="train the many-step base denoiser"))

    d = with_config(sub.add_parser("distill", help="run the progressive distillation chain"))
    d.add_argument("--method", choices=("pd", "cfd", "rdd"))
    d.add_argument("--no-cfd", action="store_true")
    d.add_argument("--no-isp2p", action="store_true")
    d.add_argument("--no-mp2p", action="store_true")
    d.add_argument("--ii-p2p", action="store_true", help="add the intra-image relational term")
    d.add_argument("--pd-mse", action="store_true", help="keep the pixel loss next to feature terms")
    d.add_argument("--start-steps", type=int)
    d.add_argument("--end-steps", type=int)
    d.add_argument("--base", help="base checkpoint (default: <output_dir>/base.pt)")
    d.add_argument("--classifier", help="classifier checkpoint (default: <output_dir>/classifier.pt)")

    s = sub.add_parser("sample", help="write an image grid from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.png")

    e = with_config(sub.add_parser("evaluate", help="desk FID / IS of a checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--steps", type=int, required=True)
    e.add_argument("--reference", help="cached reference stats (.npz)")
    e.add_argument("--n-samples", type=int)
    e.add_argument("--classifier")
    return p


def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.output_dir:
        cfg.run.output_dir = args.output_dir
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.command == "distill":
        d = cfg.distill
        if args.method:
            d.method = args.method
        for flag in ("no_cfd", "no_isp2p", "no_mp2p", "ii_p2p", "pd_mse"):
            if getattr(args, flag):
                setattr(d, flag, True)
        if args.start_steps:
            d.start_steps = args.start_steps
        if args.end_steps:
            d.end_steps = args.end_steps
        cfg.stage_configs()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "sample":
            print(cmd_sample(args.checkpoint, args.steps, args.n, args.seed, args.out))
            return 0
        cfg = _resolve_config(args)
        if args.command == "pretrain-classifier":
            print(cmd_pretrain_classifier(cfg))
        elif args.command == "train-base":
            print(cmd_train_base(cfg))
        elif args.command == "distill":
            for path in cmd_distill(cfg, args.base, args.classifier):
                print(path)
        elif args.command == "evaluate":
            print(json.dumps(cmd_evaluate(cfg, args.checkpoint, args.steps, args.reference,
                                          args.n_samples, args.seed, args.classifier)))
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"reldistill {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
