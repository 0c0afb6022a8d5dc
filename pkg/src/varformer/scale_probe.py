"""Scale-replacement probe and the degraded-vs-clean distribution gap."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch

from .degradations import DegradationSpec, apply
from .errors import DomainError, ShapeError
from .metrics import psnr
from .msvq import MSVQ, MultiScaleLatent, accumulate
from .var_transformer import InjectionContext, VARTransformer


@dataclass(frozen=True)
class ReplacementSet:
    indices: frozenset

    @classmethod
    def of(cls, indices: Iterable[int], K: int) -> "ReplacementSet":
        idx = frozenset(int(i) for i in indices)
        bad = [i for i in idx if not 1 <= i <= K]
        if bad:
            raise DomainError(f"replacement indices {sorted(bad)} outside 1..{K}")
        return cls(idx)

    @property
    def label(self) -> str:
        return "{" + ",".join(str(i) for i in sorted(self.indices)) + "}"


def default_patterns(K: int) -> List[ReplacementSet]:
    """Prefixes {1}, {1,2}, ..., {1..K} followed by suffixes {K}, {K-1,K}, ..., {2..K}."""
    prefixes = [ReplacementSet(frozenset(range(1, n + 1))) for n in range(1, K + 1)]
    suffixes = [ReplacementSet(frozenset(range(K - n + 1, K + 1))) for n in range(1, K)]
    return prefixes + suffixes


def mix_latents(enc: MultiScaleLatent, pred: MultiScaleLatent, C: Iterable[int]) -> MultiScaleLatent:
    """Per-scale maps taken from ``pred`` for scales in C and from ``enc`` elsewhere."""
    if enc.K != pred.K:
        raise ShapeError(f"scale count mismatch: {enc.K} vs {pred.K}")
    for k, (a, b) in enumerate(zip(enc.per_scale, pred.per_scale)):
        if a.shape != b.shape:
            raise ShapeError(f"scale {k + 1}: {tuple(a.shape)} vs {tuple(b.shape)}")
    chosen = ReplacementSet.of(C, enc.K).indices
    maps = [p if i + 1 in chosen else e for i, (e, p) in enumerate(zip(enc.per_scale, pred.per_scale))]
    return MultiScaleLatent(maps, enc.provenance)


@torch.no_grad()
def replace_and_decode(msvq: MSVQ, enc: MultiScaleLatent, pred: MultiScaleLatent, C: Iterable[int]) -> torch.Tensor:
    """Decode the encoder sequence with the scales in C swapped for transformer predictions."""
    mixed = mix_latents(enc, pred, C)
    return msvq.decode(accumulate(mixed, range(1, mixed.K + 1)))


@torch.no_grad()
def encode_and_predict(msvq: MSVQ, var: VARTransformer, images: torch.Tensor, adapter=None):
    """Return (F_e, F_v) for a batch of images: encoder sequence and teacher-forced prediction."""
    latent = msvq.encode(images)
    if adapter is not None:
        latent = adapter(latent)
    tokens, enc = msvq.quantize(latent)
    pred = var.predict_features(tokens, InjectionContext(enc))
    return enc, pred


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


@torch.no_grad()
def probe_sweep(
    msvq: MSVQ,
    var: VARTransformer,
    clean_images: Sequence[np.ndarray],
    specs: Sequence[DegradationSpec],
    out_dir: str,
    patterns: Optional[Sequence[ReplacementSet]] = None,
    pred_equals_enc: bool = False,
):
    """Run the replacement grid and write one 8-bit image per cell plus ``manifest.csv``.

    Returns the list of manifest rows and a nested list
    ``grid[pair][degradation][pattern]`` of decoded images (3, H, W) in [0, 1].
    """
    from PIL import Image

    msvq.eval()
    var.eval()
    K = msvq.schedule.K
    patterns = list(patterns) if patterns is not None else default_patterns(K)
    os.makedirs(out_dir, exist_ok=True)
    rows, grid = [], []
    for p, clean in enumerate(clean_images):
        per_pair = []
        for spec in specs:
            deg = torch.from_numpy(apply(spec, clean))[None]
            enc, pred = encode_and_predict(msvq, var, deg)
            if pred_equals_enc:
                pred = enc
            cells = []
            for pat in patterns:
                out = replace_and_decode(msvq, enc, pred, pat.indices)[0]
                name = f"pair{p:03d}_{spec.family}_{'-'.join(map(str, sorted(pat.indices)))}.png"
                path = os.path.join(out_dir, name)
                Image.fromarray(_to_uint8(out)).save(path)
                rows.append({
                    "pair_id": p,
                    "degradation": spec.label,
                    "pattern": pat.label,
                    "output_path": path,
                    "psnr_vs_clean": f"{psnr(out.numpy(), clean):.4f}",
                })
                cells.append(out.numpy())
            per_pair.append(cells)
        grid.append(per_pair)
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pair_id", "degradation", "pattern", "output_path", "psnr_vs_clean"])
        w.writeheader()
        w.writerows(rows)
    return rows, grid


# ---------------------------------------------------------------------------
# distribution gap


def _scale_samples(x, k: Optional[int]) -> torch.Tensor:
    if isinstance(x, MultiScaleLatent):
        if k is None:
            raise DomainError("a scale index is required for MultiScaleLatent inputs")
        if not 1 <= k <= x.K:
            raise DomainError(f"scale {k} outside 1..{x.K}")
        x = x.per_scale[k - 1]
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.dim() == 2:
        return x
    return x.flatten(2).mean(-1)


def distribution_gap(clean, degraded, k: Optional[int] = None) -> float:
    """Euclidean distance between the mean (spatially averaged) feature vectors of two sample sets.

    ``clean``/``degraded`` are either MultiScaleLatent batches (with 1-based
    scale ``k``) or tensors of shape (N, d, h, w) or (N, d).
    """
    a = _scale_samples(clean, k)
    b = _scale_samples(degraded, k)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DomainError("distribution_gap needs at least 2 samples per set")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"feature dims differ: {tuple(a.shape[1:])} vs {tuple(b.shape[1:])}")
    return float(torch.linalg.vector_norm(a.mean(0) - b.mean(0)))


@dataclass
class GapReport:
    degradation: str
    per_scale_gap_encoder: List[float] = field(default_factory=list)
    per_scale_gap_transformer: List[float] = field(default_factory=list)

    def __post_init__(self):
        for g in self.per_scale_gap_encoder + self.per_scale_gap_transformer:
            if not (np.isfinite(g) and g >= 0):
                raise DomainError(f"invalid gap value {g}")

    @property
    def aligned_scales(self) -> int:
        """Number of scales where the transformer gap does not exceed the encoder gap."""
        return sum(v <= e for e, v in zip(self.per_scale_gap_encoder, self.per_scale_gap_transformer))

    @property
    def aligned_majority(self) -> bool:
        return self.aligned_scales > len(self.per_scale_gap_encoder) / 2


@torch.no_grad()
def gap_report(
    msvq: MSVQ,
    var: VARTransformer,
    clean: torch.Tensor,
    degraded: torch.Tensor,
    label: str,
    adapter=None,
) -> GapReport:
    """Per-scale gaps for encoder features (frozen encoder) and transformer predictions.

    The encoder side uses the plain encoder; the transformer side runs the
    full prior pipeline, including ``adapter`` when given.
    """
    enc_c, _ = encode_and_predict(msvq, var, clean)
    enc_d, _ = encode_and_predict(msvq, var, degraded)
    _, pred_c = encode_and_predict(msvq, var, clean, adapter)
    _, pred_d = encode_and_predict(msvq, var, degraded, adapter)
    K = msvq.schedule.K
    return GapReport(
        label,
        [distribution_gap(enc_c, enc_d, k) for k in range(1, K + 1)],
        [distribution_gap(pred_c, pred_d, k) for k in range(1, K + 1)],
    )


def pca_2d(*sets: torch.Tensor) -> List[np.ndarray]:
    """Project several (N_i, d) sample sets onto the top-2 principal axes of their union."""
    arrs = [np.asarray(s, dtype=np.float64) for s in sets]
    allx = np.concatenate(arrs)
    mu = allx.mean(0)
    _, _, vt = np.linalg.svd(allx - mu, full_matrices=False)
    return [(a - mu) @ vt[:2].T for a in arrs]
