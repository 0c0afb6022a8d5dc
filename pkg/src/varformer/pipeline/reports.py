"""Analysis outputs shared by the CLI and the acceptance checks."""

from __future__ import annotations

import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..degradations import SYNTHETIC_FAMILIES, DegradationSpec, apply
from ..scale_probe import GapReport, encode_and_predict, gap_report, pca_2d
from .evaluate import write_csv
from .training import Models

GAP_COLUMNS = ["degradation", "scale", "gap_encoder", "gap_transformer", "aligned"]


def eval_specs(seed: int, families: Sequence[str] = SYNTHETIC_FAMILIES,
               params: Optional[Dict[str, Dict[str, float]]] = None) -> List[DegradationSpec]:
    params = params or {}
    return [DegradationSpec(f, params.get(f, {}), seed) for f in families]


def degrade_set(images: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply ``spec`` to every image, offsetting the seed by the image index."""
    return np.stack([
        apply(DegradationSpec(spec.family, spec.params, (spec.seed + i) % 2**64), img)
        for i, img in enumerate(images)
    ])


def family_gap_reports(models: Models, images: np.ndarray, specs: Sequence[DegradationSpec]) -> List[GapReport]:
    models.eval()
    clean = torch.from_numpy(images)
    adapter = models.adapter if models.cfg.adapter else None
    return [
        gap_report(models.msvq, models.var, clean, torch.from_numpy(degrade_set(images, s)), s.family, adapter)
        for s in specs
    ]


def write_gap_reports(reports: Sequence[GapReport], path: str, figure: bool = True) -> str:
    rows = []
    for r in reports:
        for k, (e, v) in enumerate(zip(r.per_scale_gap_encoder, r.per_scale_gap_transformer), 1):
            rows.append({"degradation": r.degradation, "scale": k, "gap_encoder": f"{e:.6g}",
                         "gap_transformer": f"{v:.6g}", "aligned": int(v <= e)})
    write_csv(path, GAP_COLUMNS, rows)
    if figure:
        from ..plotting import plot_gap_report

        plot_gap_report(reports, os.path.splitext(path)[0] + ".png")
    return path


@torch.no_grad()
def pca_figure(models: Models, images: np.ndarray, spec: DegradationSpec, scale: int, path: str) -> str:
    """2D PCA of spatially averaged scale features: clean/degraded, encoder/transformer."""
    from ..plotting import plot_pca_scatter

    adapter = models.adapter if models.cfg.adapter else None
    clean = torch.from_numpy(images)
    deg = torch.from_numpy(degrade_set(images, spec))
    enc_c, _ = encode_and_predict(models.msvq, models.var, clean)
    enc_d, _ = encode_and_predict(models.msvq, models.var, deg)
    _, pred_c = encode_and_predict(models.msvq, models.var, clean, adapter)
    _, pred_d = encode_and_predict(models.msvq, models.var, deg, adapter)
    feats = [m.per_scale[scale - 1].flatten(2).mean(-1) for m in (enc_c, enc_d, pred_c, pred_d)]
    pts = pca_2d(*feats)
    names = ["encoder clean", "encoder degraded", "transformer clean", "transformer degraded"]
    return plot_pca_scatter(dict(zip(names, pts)), path, f"{spec.family}, scale {scale}")
