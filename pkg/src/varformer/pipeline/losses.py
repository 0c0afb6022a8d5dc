"""Stage-1 feature matching loss and stage-2 reconstruction loss."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from ..errors import ShapeError
from ..metrics import psnr_torch
from ..var_transformer import sequence_cross_entropy


class PerceptualExtractor(nn.Module):
    """Frozen, randomly initialized 3-stage conv feature stack.

    A fixed-seed substitute for a pretrained VGG feature metric. Parameters
    never require gradient and are identical for a given seed.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        stages, cin = [], 3
        for w in widths:
            conv1, conv2 = nn.Conv2d(cin, w, 3, padding=1), nn.Conv2d(w, w, 3, padding=1)
            for conv in (conv1, conv2):
                fan_in = conv.weight[0].numel()
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    conv.bias.zero_()
            stages.append(nn.Sequential(conv1, nn.ReLU(), conv2, nn.ReLU()))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AvgPool2d(2)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor):
        feats = []
        h = x * 2 - 1
        for i, stage in enumerate(self.stages):
            if i:
                h = self.pool(h)
            h = stage(h)
            feats.append(h)
        return feats


def perceptual_distance(psi: PerceptualExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum over stages of the mean squared feature difference, per batch mean."""
    return sum((fa - fb).pow(2).mean() for fa, fb in zip(psi(a), psi(b)))


def fema_loss(
    tokens: Sequence[torch.Tensor],
    logits: torch.Tensor,
    f_a: torch.Tensor,
    f_e_gt_q: torch.Tensor,
    ce_weight: float = 1.0,
    feature_weight: float = 1.0,
    return_parts: bool = False,
):
    """Cross-entropy over every scale position plus squared distance to the stopped clean latent.

    Both terms are summed over positions/elements and averaged over the batch.
    """
    if f_a.shape != f_e_gt_q.shape:
        raise ShapeError(f"adapter output {tuple(f_a.shape)} vs clean latent {tuple(f_e_gt_q.shape)}")
    T = sum(t[0].numel() for t in tokens)
    if logits.shape[:2] != (tokens[0].shape[0], T):
        raise ShapeError(f"logits {tuple(logits.shape)} do not cover {T} positions")
    ce = sequence_cross_entropy(logits, tokens)
    feat = (f_a - f_e_gt_q.detach()).pow(2).flatten(1).sum(1).mean()
    total = ce_weight * ce + feature_weight * feat
    if return_parts:
        return total, {"ce": ce.item(), "feature": feat.item()}
    return total


def rec_loss(
    i_gt: torch.Tensor,
    i_rec: torch.Tensor,
    psi: PerceptualExtractor,
    psnr_weight: float = 1.0,
    perceptual_weight: float = 1.0,
) -> torch.Tensor:
    """Negative PSNR (batch mean) plus the perceptual feature distance."""
    if i_gt.shape != i_rec.shape:
        raise ShapeError(f"shape mismatch: {tuple(i_gt.shape)} vs {tuple(i_rec.shape)}")
    return -psnr_weight * psnr_torch(i_gt, i_rec).mean() + perceptual_weight * perceptual_distance(psi, i_gt, i_rec)
