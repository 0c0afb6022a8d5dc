"""Stage-1 adapter and the stage-2 prior-guided restoration U-net.

Every U-net level (encoder and decoder side) mixes the multi-scale prior
``S_v`` into its features in two steps:

* DAE: a weight predictor looks at the frozen VAR-encoder feature of that
  resolution and produces K softmax weights over scales; the re-weighted prior
  is projected to the level's shape and fused with the level feature using
  complementary per-element weights.
* AFT: query/mediator/key attention in which a small set of pooled mediator
  tokens bridges the level feature (queries) and the fused feature
  (keys/values), costing O(H * L) instead of O(H^2).

Decoder levels additionally blend in the matching encoder feature through a
sigmoid-gated skip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DomainError, ShapeError
from .msvq import MultiScaleLatent, ResBlock


@dataclass(frozen=True)
class MediatorConfig:
    L: int = 16
    d: int = 32

    def __post_init__(self):
        if self.L < 1 or self.d < 1:
            raise ConfigError(f"mediator needs L >= 1 and d >= 1, got L={self.L}, d={self.d}")

    def check(self, H: int) -> None:
        """Enforce L << H as L <= H / 4 for a level with H tokens."""
        if self.L * 4 > H:
            raise ConfigError(f"mediator tokens L={self.L} exceed H/4 for H={H} tokens")

    def grid(self, h: int, w: int) -> Tuple[int, int]:
        """Factor L into a pooling grid (a, b), a*b = L, as square as fits in (h, w)."""
        best = None
        for a in range(1, self.L + 1):
            if self.L % a:
                continue
            b = self.L // a
            if a <= h and b <= w:
                score = abs(math.log(a / b) - math.log(h / w))
                if best is None or score < best[0]:
                    best = (score, (a, b))
        if best is None:
            raise ConfigError(f"cannot pool a {h}x{w} map into L={self.L} mediator tokens")
        return best[1]


@dataclass(frozen=True)
class AblationFlags:
    skip: bool = True
    adapter: bool = True
    aft: bool = True
    dae: bool = True

    @property
    def label(self) -> str:
        on = [n for n in ("skip", "adapter", "aft", "dae") if getattr(self, n)]
        return "+".join(on) if on else "none"


# component ablations as flag topologies
ABLATION_ROWS: Dict[str, AblationFlags] = {
    "a": AblationFlags(skip=False, adapter=False, aft=False, dae=False),
    "b": AblationFlags(skip=False, adapter=True, aft=True, dae=True),
    "c": AblationFlags(skip=True, adapter=False, aft=True, dae=True),
    "d": AblationFlags(skip=True, adapter=True, aft=False, dae=True),
    "e": AblationFlags(skip=True, adapter=False, aft=True, dae=False),
    "f": AblationFlags(skip=True, adapter=True, aft=True, dae=True),
}


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise DomainError(f"{what} contains non-finite values")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# attention building blocks


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, -1).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, int(dim * mlp_ratio)), nn.GELU(), nn.Linear(int(dim * mlp_ratio), dim))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def _window_size(n: int, window: int) -> int:
    ws = min(window, n)
    while n % ws:
        ws -= 1
    return ws


class WindowBlock(nn.Module):
    """Residual transformer block with attention restricted to non-overlapping windows.

    Stand-in for a residual Swin block at toy scale (no shifting).
    """

    def __init__(self, dim: int, heads: int = 2, window: int = 4):
        super().__init__()
        self.window = window
        self.block = TransformerBlock(dim, heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        wh, ww = _window_size(H, self.window), _window_size(W, self.window)
        t = x.view(B, C, H // wh, wh, W // ww, ww).permute(0, 2, 4, 3, 5, 1).reshape(-1, wh * ww, C)
        t = self.block(t)
        t = t.view(B, H // wh, W // ww, wh, ww, C).permute(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)
        return t


# ---------------------------------------------------------------------------
# stage 1: adapter


class Adapter(nn.Module):
    """Self-attention stack on the frozen encoder latent, residual with a zero-initialized output."""

    def __init__(self, code_dim: int, latent_size: Tuple[int, int], width: int = 64, depth: int = 2, heads: int = 4):
        super().__init__()
        self.latent_size = tuple(latent_size)
        n = latent_size[0] * latent_size[1]
        self.inp = nn.Linear(code_dim, width)
        self.pos = nn.Parameter(torch.randn(n, width) * 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(width, heads, 4.0) for _ in range(depth)])
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, code_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() != 4 or tuple(latent.shape[-2:]) != self.latent_size or latent.shape[1] != self.inp.in_features:
            raise ShapeError(
                f"adapter expects (B, {self.inp.in_features}, {self.latent_size[0]}, {self.latent_size[1]}), "
                f"got {tuple(latent.shape)}"
            )
        B, d, H, W = latent.shape
        x = self.inp(latent.flatten(2).transpose(1, 2)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        delta = self.out(self.norm(x)).transpose(1, 2).reshape(B, d, H, W)
        return latent + delta


# ---------------------------------------------------------------------------
# stage 2: DAE


class ScaleWeightPredictor(nn.Module):
    """Predict K softmax weights over prior scales from a frozen VAR-encoder feature."""

    def __init__(self, in_channels: int, channels: int, K: int, window: int = 4, zero_init: bool = True,
                 pool: int = 8):
        super().__init__()
        self.pool = pool
        self.inp = nn.Conv2d(in_channels, channels, 1)
        self.block = WindowBlock(channels, 2, window)
        self.proj = nn.Conv2d(channels, K, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, f_ev: torch.Tensor) -> torch.Tensor:
        _check_finite(f_ev, "VAR-encoder feature")
        # the output is a global average, so work on a coarse grid
        if f_ev.shape[-1] > self.pool or f_ev.shape[-2] > self.pool:
            f_ev = F.adaptive_avg_pool2d(f_ev, (min(self.pool, f_ev.shape[-2]), min(self.pool, f_ev.shape[-1])))
        logits = self.proj(self.block(self.inp(f_ev))).mean((-2, -1))
        return logits.softmax(-1)


class PriorProjection(nn.Module):
    """Re-weight per-scale priors and project the sum to one level's shape.

    The per-scale maps are first brought to a common (latent-size) grid by
    bilinear interpolation, summed with the scale weights, then resized to the
    level resolution and passed through a 3x3 convolution to C channels.
    """

    def __init__(self, code_dim: int, channels: int, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(code_dim, channels, 3, padding=1, bias=bias)

    def mix(self, s_v: MultiScaleLatent, w: torch.Tensor) -> torch.Tensor:
        if w.shape[-1] != s_v.K:
            raise ShapeError(f"{w.shape[-1]} scale weights for {s_v.K} scales")
        size = s_v.latent_size
        out = None
        for j, m in enumerate(s_v.per_scale):
            r = m if tuple(m.shape[-2:]) == size else F.interpolate(m, size=size, mode="bilinear", align_corners=False)
            term = w[:, j, None, None, None] * r
            out = term if out is None else out + term
        return out

    def head(self, mixed: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        if tuple(mixed.shape[-2:]) != tuple(size):
            mixed = F.interpolate(mixed, size=tuple(size), mode="bilinear", align_corners=False)
        return self.conv(mixed)

    def forward(self, s_v: MultiScaleLatent, w: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        return self.head(self.mix(s_v, w), size)


class FusionWeights(nn.Module):
    """Complementary per-element weights (w1, w2) for a level feature and its projected prior."""

    def __init__(self, channels: int, window: int = 4, depth: int = 2, zero_init: bool = True):
        super().__init__()
        self.inp = nn.Conv2d(2 * channels, channels, 1)
        self.blocks = nn.Sequential(*[WindowBlock(channels, 2, window) for _ in range(depth)])
        self.out = nn.Conv2d(channels, 2 * channels, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, f: torch.Tensor, s_hat: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        _same_shape(f, s_hat, "fusion inputs")
        B, C, H, W = f.shape
        logits = self.out(self.blocks(self.inp(torch.cat([f, s_hat], 1))))
        w = logits.view(B, 2, C, H, W).softmax(1)
        return w[:, 0], w[:, 1]


def dae_scale_weights(predictor: ScaleWeightPredictor, f_ev: torch.Tensor) -> torch.Tensor:
    """(B, K) softmax weights over prior scales."""
    return predictor(f_ev)


def dae_reweight(projection: PriorProjection, s_v: MultiScaleLatent, w: torch.Tensor,
                 size: Tuple[int, int]) -> torch.Tensor:
    """``M(sum_j w_j * S_v^j)`` at spatial ``size``."""
    return projection(s_v, w, size)


def dae_fuse(fusion: FusionWeights, f: torch.Tensor, s_hat: torch.Tensor):
    """Return the fused feature ``f*w1 + s_hat*w2`` and the weight maps."""
    w1, w2 = fusion(f, s_hat)
    return f * w1 + s_hat * w2, (w1, w2)


# ---------------------------------------------------------------------------
# AFT


class AFT(nn.Module):
    """Mediator attention: ``softmax(Q M^T / sqrt d) (softmax(M K^T / sqrt d) V) + F``.

    Q comes from the level feature, K and V from the fused feature, and the
    mediator from both concatenated, pooled down to L tokens.
    """

    def __init__(self, channels: int, cfg: MediatorConfig = MediatorConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.q = nn.Conv2d(channels, d, 1)
        self.m = nn.Conv2d(2 * channels, d, 1)
        self.k = nn.Conv2d(channels, d, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.last_attn: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
        self.keep_attn = False

    def mediator(self, f: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        m = self.m(torch.cat([f_g, f], 1))
        grid = self.cfg.grid(*m.shape[-2:])
        return F.adaptive_avg_pool2d(m, grid).flatten(2).transpose(1, 2)

    def forward(self, f: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        _same_shape(f, f_g, "AFT inputs")
        B, C, H, W = f.shape
        self.cfg.check(H * W)
        scale = 1.0 / math.sqrt(self.cfg.d)
        q = self.q(f).flatten(2).transpose(1, 2)
        k = self.k(f_g).flatten(2).transpose(1, 2)
        v = self.v(f_g).flatten(2).transpose(1, 2)
        m = self.mediator(f, f_g)
        a_qm = (q @ m.transpose(1, 2) * scale).softmax(-1)
        a_mk = (m @ k.transpose(1, 2) * scale).softmax(-1)
        if self.keep_attn:
            self.last_attn = (a_qm.detach(), a_mk.detach())
        out = a_qm @ (a_mk @ v)
        return out.transpose(1, 2).reshape(B, C, H, W) + f


def aft_flops(H: int, C: int, cfg: MediatorConfig) -> Dict[str, int]:
    """Analytic FLOP count (2 per multiply-add) of one AFT call on H tokens with C channels."""
    L, d = cfg.L, cfg.d
    attention = 2 * (H * L * d + L * H * d + L * H * C + H * L * C) + 2 * (H * L + L * H)
    projections = 2 * (H * C * d + H * C * d + H * C * C + H * 2 * C * d) + H * d
    return {"attention": attention, "projections": projections, "total": attention + projections + H * C}


# ---------------------------------------------------------------------------
# mix-up skip


class MixupSkip(nn.Module):
    def __init__(self, theta: float = 0.0):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor(float(theta)))

    def forward(self, f_dec_hat: torch.Tensor, f_enc: torch.Tensor) -> torch.Tensor:
        return mixup_skip(f_dec_hat, f_enc, self.theta)


def mixup_skip(f_dec_hat: torch.Tensor, f_enc: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    _same_shape(f_dec_hat, f_enc, "mix-up skip inputs")
    g = torch.sigmoid(theta)
    return g * f_dec_hat + (1 - g) * f_enc


# ---------------------------------------------------------------------------
# U-net


class LevelGuide(nn.Module):
    """DAE (scale weights, re-weighting, fusion) followed by AFT for one level."""

    def __init__(self, channels: int, ev_channels: int, code_dim: int, K: int,
                 mediator: MediatorConfig, window: int = 4, fusion_depth: int = 2):
        super().__init__()
        self.weights = ScaleWeightPredictor(ev_channels, channels, K, window)
        self.prior = PriorProjection(code_dim, channels)
        self.fusion = FusionWeights(channels, window, fusion_depth)
        self.aft = AFT(channels, mediator)
        self.keep = False
        self.record: Dict[str, torch.Tensor] = {}

    def forward(self, f: torch.Tensor, s_v: MultiScaleLatent, f_ev: torch.Tensor, flags: AblationFlags) -> torch.Tensor:
        if flags.dae:
            w = dae_scale_weights(self.weights, f_ev)
            s_hat = dae_reweight(self.prior, s_v, w, f.shape[-2:])
            f_g, (w1, w2) = dae_fuse(self.fusion, f, s_hat)
            if self.keep:
                self.record = {"scale_weights": w.detach(), "w1": w1.detach(), "w2": w2.detach()}
        else:
            f_g = f
        if flags.aft:
            return self.aft(f, f_g)
        return f_g


class Restorer(nn.Module):
    """U-shaped restoration network guided at every level by the VAR scale prior."""

    def __init__(
        self,
        K: int,
        code_dim: int,
        ev_channels: Sequence[int],
        base: int = 32,
        levels: int = 3,
        mediator: MediatorConfig = MediatorConfig(),
        window: int = 4,
        fusion_depth: int = 2,
        flags: AblationFlags = AblationFlags(),
        guide_levels: Optional[Sequence[int]] = None,
    ):
        super().__init__()
        if len(ev_channels) != levels:
            raise ConfigError(f"{levels} levels need {levels} VAR-encoder feature maps, got {len(ev_channels)}")
        self.K = K
        self.levels = levels
        self.flags = flags
        self.guide_levels = tuple(sorted(guide_levels)) if guide_levels is not None else tuple(range(1, levels + 1))
        ch = [base * 2**i for i in range(levels)]
        self.channels = ch
        self.stem = nn.Conv2d(3, ch[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList([ResBlock(c) for c in ch])
        self.downs = nn.ModuleList([nn.Conv2d(ch[i], ch[i + 1], 4, stride=2, padding=1) for i in range(levels - 1)])
        self.ups = nn.ModuleList([
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch[i + 1], ch[i], 3, padding=1))
            for i in range(levels - 1)
        ])
        self.dec_blocks = nn.ModuleList([ResBlock(c) for c in ch])
        self.skips = nn.ModuleList([MixupSkip() for _ in ch])
        self.enc_guides = nn.ModuleList([LevelGuide(c, e, code_dim, K, mediator, window, fusion_depth) for c, e in zip(ch, ev_channels)])
        self.dec_guides = nn.ModuleList([LevelGuide(c, e, code_dim, K, mediator, window, fusion_depth) for c, e in zip(ch, ev_channels)])
        self.head = nn.Conv2d(ch[0], 3, 3, padding=1)

    def _guide(self, guide: LevelGuide, level: int, f, s_v, f_ev):
        if level not in self.guide_levels:
            return f
        return guide(f, s_v, f_ev, self.flags)

    def forward(self, degraded: torch.Tensor, s_v: MultiScaleLatent, f_ev: Sequence[torch.Tensor]) -> torch.Tensor:
        if degraded.dim() != 4 or degraded.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(degraded.shape)}")
        if len(f_ev) != self.levels:
            raise ShapeError(f"need {self.levels} VAR-encoder features, got {len(f_ev)}")
        if s_v.K != self.K:
            raise ShapeError(f"prior has {s_v.K} scales, restorer expects {self.K}")
        x = self.stem(degraded * 2 - 1)
        enc_feats = []
        for i in range(self.levels):
            f = self.enc_blocks[i](x)
            enc_feats.append(f)
            x = self._guide(self.enc_guides[i], i + 1, f, s_v, f_ev[i])
            if i < self.levels - 1:
                x = self.downs[i](x)
        for i in reversed(range(self.levels)):
            if i < self.levels - 1:
                x = self.ups[i](x)
            f_hat = self.dec_blocks[i](x)
            f = self.skips[i](f_hat, enc_feats[i]) if self.flags.skip else f_hat
            x = self._guide(self.dec_guides[i], i + 1, f, s_v, f_ev[i])
        return degraded + self.head(x)

    def restore(self, degraded, s_v, f_ev) -> torch.Tensor:
        return self.forward(degraded, s_v, f_ev).clamp(0.0, 1.0)

    def keep_records(self, on: bool = True) -> None:
        for g in list(self.enc_guides) + list(self.dec_guides):
            g.keep = on
            g.record = {}
