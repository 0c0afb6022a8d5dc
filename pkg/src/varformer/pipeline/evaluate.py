"""Paired-image IO: synthesis of degraded test sets and PSNR/SSIM evaluation."""

from __future__ import annotations

import csv
import json
import os
from collections import OrderedDict
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from ..degradations import DegradationSpec, apply
from ..errors import DataError
from ..metrics import psnr, ssim

MANIFEST_COLUMNS = ["id", "family", "params", "seed", "clean_path", "degraded_path"]
METRIC_COLUMNS = ["id", "family", "psnr", "ssim"]


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(path: str, img: np.ndarray) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)
    return path


def load_image(path: str) -> np.ndarray:
    """8-bit RGB file -> (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, exactly what ``save_image`` + ``load_image`` produce."""
    return to_uint8(img).transpose(2, 0, 1).astype(np.float32) / 255.0


def synthesize(
    out_dir: str,
    images: np.ndarray,
    specs: Sequence[DegradationSpec],
) -> List[Dict[str, str]]:
    """Write ``clean/``, ``degraded/`` and ``manifest.csv``: one row per (image, spec).

    Each spec is applied with its seed offset by the image index, so every
    row has its own noise realisation and the recorded seed reproduces it.
    """
    rows = []
    for i, img in enumerate(images):
        clean_path = save_image(os.path.join(out_dir, "clean", f"{i:04d}.png"), img)
        for spec in specs:
            s = DegradationSpec(spec.family, spec.params, (spec.seed + i) % 2**64)
            rid = f"{i:04d}_{spec.family}"
            deg_path = save_image(os.path.join(out_dir, "degraded", f"{rid}.png"), apply(s, img))
            rows.append({
                "id": rid,
                "family": s.family,
                "params": s.params_json(),
                "seed": str(s.seed),
                "clean_path": os.path.relpath(clean_path, out_dir),
                "degraded_path": os.path.relpath(deg_path, out_dir),
            })
    write_csv(os.path.join(out_dir, "manifest.csv"), MANIFEST_COLUMNS, rows)
    return rows


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Dict]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        w.writerows(rows)
    return path


def read_manifest(path: str) -> List[Dict[str, str]]:
    """Rows of a synth manifest with paths resolved against the manifest directory."""
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing_cols = [c for c in ("id", "family", "clean_path", "degraded_path") if rows and c not in rows[0]]
    if missing_cols:
        raise DataError(f"manifest {path} lacks columns {missing_cols}")
    for r in rows:
        for key in ("clean_path", "degraded_path"):
            r[key] = os.path.normpath(os.path.join(base, r[key]))
    missing = [r[k] for r in rows for k in ("clean_path", "degraded_path") if not os.path.isfile(r[k])]
    if missing:
        raise DataError("missing image files:\n  " + "\n  ".join(missing))
    return rows


def spec_of(row: Dict[str, str]) -> DegradationSpec:
    return DegradationSpec(row["family"], json.loads(row.get("params") or "{}"), int(row.get("seed") or 0))


def evaluate_pairs(pairs: Iterable[tuple]) -> List[Dict[str, str]]:
    """``pairs`` yields (id, family, output, clean); returns per-image rows then one MEAN row per family.

    Family means are aggregated from the per-image values in sorted id
    order, so the result does not depend on iteration order.
    """
    per_image = []
    for rid, family, out, clean in pairs:
        per_image.append((rid, family, psnr(out, clean), ssim(out, clean)))
    per_image.sort(key=lambda r: r[0])
    by_family: Dict[str, List[tuple]] = OrderedDict()
    for r in per_image:
        by_family.setdefault(r[1], []).append(r)
    rows = [{"id": r[0], "family": r[1], "psnr": f"{r[2]:.6f}", "ssim": f"{r[3]:.6f}"} for r in per_image]
    for fam in sorted(by_family):
        vals = by_family[fam]
        rows.append({
            "id": f"MEAN:{fam}",
            "family": fam,
            "psnr": f"{np.mean([v[2] for v in vals]):.6f}",
            "ssim": f"{np.mean([v[3] for v in vals]):.6f}",
        })
    return rows


def summary(rows: Sequence[Dict[str, str]]) -> Dict[str, Dict[str, float]]:
    return {r["family"]: {"psnr": float(r["psnr"]), "ssim": float(r["ssim"])}
            for r in rows if r["id"].startswith("MEAN:")}


def evaluate(
    manifest: str,
    restore_fn: Optional[Callable[[torch.Tensor], torch.Tensor]],
    out_csv: str,
    batch_size: int = 8,
    figure: bool = True,
    restored_dir: Optional[str] = None,
) -> List[Dict[str, str]]:
    """Restore every degraded image of ``manifest`` and write the metrics CSV (+ a bar chart).

    ``restore_fn=None`` scores the degraded inputs themselves.
    """
    rows = read_manifest(manifest)
    outputs: List[np.ndarray] = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        deg = np.stack([load_image(r["degraded_path"]) for r in chunk])
        if restore_fn is None:
            outputs.extend(deg)
        else:
            res = restore_fn(torch.from_numpy(deg)).detach().cpu().numpy()
            outputs.extend(res)
    if restored_dir:
        for r, out in zip(rows, outputs):
            save_image(os.path.join(restored_dir, f"{r['id']}.png"), out)
    result = evaluate_pairs((r["id"], r["family"], out, load_image(r["clean_path"])) for r, out in zip(rows, outputs))
    write_csv(out_csv, METRIC_COLUMNS, result)
    if figure:
        from ..plotting import plot_metrics

        plot_metrics(summary(result), os.path.splitext(out_csv)[0] + ".png")
    return result
