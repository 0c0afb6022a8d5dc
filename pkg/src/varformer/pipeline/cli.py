"""Command-line entry point: ``varformer <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

import torch

from ..degradations import FAMILIES, SYNTHETIC_FAMILIES
from ..errors import VarformerError
from ..restorer import ABLATION_ROWS
from ..scale_probe import probe_sweep
from . import evaluate as ev
from . import reports
from .config import Config, load_config
from .training import (
    Data,
    Models,
    build_models,
    load_models,
    make_restore_fn,
    pretrain_var,
    pretrain_vq,
    save_models,
    train_stage1,
    train_stage2,
)


def _families(text: Optional[str], default) -> List[str]:
    if not text:
        return list(default)
    fams = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fams if f not in FAMILIES]
    if bad:
        raise VarformerError(f"unknown families: {', '.join(bad)}")
    return fams


def _config(args) -> Config:
    return load_config(args.config, seed=args.seed)


def _models(args, require=("msvq", "var")) -> Models:
    if not args.checkpoint:
        raise VarformerError(f"{args.command} needs --checkpoint")
    models = load_models(args.checkpoint, require)
    models.cfg = load_config(args.config, base=models.cfg, seed=args.seed)
    return models


def _out(args, *parts: str) -> str:
    path = os.path.join(args.out, *parts)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = _config(args)
    data = Data(cfg)
    images = data.test if args.split == "test" else data.train
    if args.count:
        images = images[: args.count]
    specs = reports.eval_specs(cfg.seed_for("eval_degradations"), _families(args.families, SYNTHETIC_FAMILIES))
    rows = ev.synthesize(args.out, images, specs)
    print(f"wrote {len(rows)} pairs to {os.path.join(args.out, 'manifest.csv')}")


def cmd_pretrain_vq(args) -> None:
    cfg = _config(args)
    models = build_models(cfg)
    data = Data(cfg)
    c1 = pretrain_vq(models, data, args.steps)
    c1.write(_out(args, "pretrain_vq_loss.csv"), title="quantizer")
    c2 = pretrain_var(models, data, args.var_steps)
    c2.write(_out(args, "pretrain_var_loss.csv"), title="transformer")
    path = _out(args, "pretrain.varf")
    save_models(path, models)
    print(f"checkpoint: {path}")


def cmd_train_stage1(args) -> None:
    models = _models(args)
    curve = train_stage1(models, Data(models.cfg), args.steps)
    curve.write(_out(args, "stage1_loss.csv"), title="stage 1")
    path = _out(args, "stage1.varf")
    save_models(path, models)
    print(f"checkpoint: {path}")


def cmd_train_stage2(args) -> None:
    models = _models(args, ("msvq", "var", "adapter"))
    curve = train_stage2(models, Data(models.cfg), args.steps)
    curve.write(_out(args, "stage2_loss.csv"), title="stage 2")
    path = _out(args, "stage2.varf")
    save_models(path, models)
    print(f"checkpoint: {path}")


def cmd_probe(args) -> None:
    from ..plotting import plot_probe_grid

    models = _models(args).eval()
    cfg = models.cfg
    data = Data(cfg)
    fams = _families(args.families, SYNTHETIC_FAMILIES)
    specs = reports.eval_specs(cfg.seed_for("probe"), fams)
    clean = list(data.test[: args.pairs])
    rows, grid = probe_sweep(models.msvq, models.var, clean, specs, os.path.join(args.out, "probe"))
    labels = [f"{p}:{s.family}" for p in range(len(clean)) for s in specs]
    patterns = sorted({r["pattern"] for r in rows}, key=[r["pattern"] for r in rows].index)
    plot_probe_grid(grid, clean, labels, patterns, _out(args, "probe_grid.png"))
    gap_specs = reports.eval_specs(cfg.seed_for("eval_degradations"), fams)
    reps = reports.family_gap_reports(models, data.test, gap_specs)
    reports.write_gap_reports(reps, _out(args, "gap_report.csv"))
    for s in gap_specs:
        reports.pca_figure(models, data.test, s, args.pca_scale, _out(args, f"pca_{s.family}.png"))
    aligned = sum(r.aligned_majority for r in reps)
    print(f"{len(rows)} probe cells; aligned majority in {aligned}/{len(reps)} families")


def cmd_restore(args) -> None:
    models = _models(args, ("msvq", "var", "adapter", "restorer"))
    restore = make_restore_fn(models)
    if not args.inputs:
        raise VarformerError("restore needs at least one input image")
    for path in args.inputs:
        img = ev.load_image(path)
        out = restore(torch.from_numpy(img)[None])[0].numpy()
        dst = ev.save_image(_out(args, os.path.basename(path)), out)
        print(dst)


def cmd_eval(args) -> None:
    restore = None
    if args.checkpoint:
        restore = make_restore_fn(_models(args, ("msvq", "var", "adapter", "restorer")))
    restored_dir = os.path.join(args.out, "restored") if args.save_images else None
    rows = ev.evaluate(args.manifest, restore, _out(args, "metrics.csv"), restored_dir=restored_dir)
    for fam, m in ev.summary(rows).items():
        print(f"{fam:16s} PSNR {m['psnr']:7.3f}  SSIM {m['ssim']:.4f}")


def cmd_ablate(args) -> None:
    from ..plotting import plot_loss_curves

    base = _models(args, ("msvq", "var", "adapter"))
    data = Data(base.cfg)
    rows = [r.strip() for r in args.rows.split(",")]
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise VarformerError(f"unknown ablation rows: {', '.join(unknown)}")
    curves = {}
    summary = []
    for row in rows:
        flags = ABLATION_ROWS[row]
        models = Models(base.cfg, base.msvq, base.var, base.adapter)
        curve = train_stage2(models, data, args.steps, flags)
        curve.write(_out(args, f"ablation_{row}_loss.csv"), figure=False)
        curves[f"({row}) {flags.label}"] = curve
        tail = curve.losses()[-min(50, len(curve.rows)):]
        summary.append({"row": row, "flags": flags.label, "steps": len(curve.rows),
                        "first_loss": f"{curve.losses()[0]:.6g}", "final_mean_loss": f"{tail.mean():.6g}"})
    ev.write_csv(_out(args, "ablation.csv"), ["row", "flags", "steps", "first_loss", "final_mean_loss"], summary)
    plot_loss_curves(curves, _out(args, "ablation_loss.png"))
    for s in summary:
        print(f"row {s['row']} [{s['flags']}]: {s['first_loss']} -> {s['final_mean_loss']}")


COMMANDS = {
    "synth": (cmd_synth, "write paired clean/degraded images and a manifest"),
    "pretrain-vq": (cmd_pretrain_vq, "clean reconstruction pre-training of quantizer and transformer"),
    "train-stage1": (cmd_train_stage1, "adapter + cross-attention training"),
    "train-stage2": (cmd_train_stage2, "restoration network training"),
    "probe": (cmd_probe, "scale-replacement grid and distribution-gap report"),
    "restore": (cmd_restore, "restore image files"),
    "eval": (cmd_eval, "PSNR/SSIM over a synth manifest"),
    "ablate": (cmd_ablate, "train the component-ablation topologies"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--checkpoint", help="input checkpoint")
        if name == "synth":
            p.add_argument("--split", choices=["train", "test"], default="test")
            p.add_argument("--count", type=int)
            p.add_argument("--families", help="comma-separated degradation families")
        if name in ("pretrain-vq", "train-stage1", "train-stage2"):
            p.add_argument("--steps", type=int, help="override the configured step count")
        if name == "pretrain-vq":
            p.add_argument("--var-steps", type=int, help="transformer pre-training steps")
        if name == "probe":
            p.add_argument("--pairs", type=int, default=2)
            p.add_argument("--families", help="comma-separated degradation families")
            p.add_argument("--pca-scale", type=int, default=3)
        if name == "restore":
            p.add_argument("inputs", nargs="*")
        if name == "eval":
            p.add_argument("--manifest", required=True)
            p.add_argument("--save-images", action="store_true")
        if name == "ablate":
            p.add_argument("--rows", default="a,d,e,f")
            p.add_argument("--steps", type=int, default=200)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (VarformerError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
