"""Block-causal next-scale transformer with same-scale cross-attention injection.

Under teacher forcing the positions of scale ``k`` are fed the accumulated
features of scales ``< k`` (block-averaged to the scale-k grid); scale 1 is fed
a learned start embedding. Self-attention is full within a scale and causal
across scales, so the logits of scale ``k`` only ever see tokens of scales
``< k``. Externally supplied multi-scale features (the encoder-side ``F_e``)
enter through cross-attention in which scale-k queries only see the
injected map of the same scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .msvq import Codebook, MultiScaleLatent, ScaleSchedule, downsample, upsample


def block_causal_mask(schedule: ScaleSchedule) -> torch.Tensor:
    """Boolean (T, T) mask; ``mask[i, j]`` is True when position j's scale <= position i's scale."""
    s = schedule.scale_ids()
    return s[None, :] <= s[:, None]


def same_scale_mask(schedule: ScaleSchedule) -> torch.Tensor:
    s = schedule.scale_ids()
    return s[None, :] == s[:, None]


def _grid_coords(schedule: ScaleSchedule) -> torch.Tensor:
    """(T, 2) row/column of every position within its own scale grid."""
    out = []
    for h, w in schedule.sizes:
        yy, xx = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
        out.append(torch.stack([yy.flatten(), xx.flatten()], 1))
    return torch.cat(out)


def context_offsets(schedule: ScaleSchedule, window: int) -> torch.Tensor:
    """(T, T) index of the relative offset between query i and context j, -1 where not allowed.

    Allowed pairs share a scale and, for ``window > 0``, lie within a
    ``window x window`` neighbourhood; offsets index a ``window**2`` table.
    ``window = 0`` allows the whole scale and maps every pair to index 0.
    """
    same = same_scale_mask(schedule)
    if window == 0:
        return torch.where(same, 0, -1)
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"context window must be 0 or odd, got {window}")
    r = window // 2
    c = _grid_coords(schedule)
    d = c[None, :, :] - c[:, None, :]
    inside = same & (d.abs() <= r).all(-1)
    idx = (d[..., 0] + r) * window + (d[..., 1] + r)
    return torch.where(inside, idx, -1)


@dataclass
class InjectionContext:
    source: Optional[MultiScaleLatent] = None
    enabled: bool = True

    @property
    def active(self) -> bool:
        return self.enabled and self.source is not None


class Attention(nn.Module):
    """Multi-head attention with an explicit boolean mask; keeps the last map if asked."""

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.keep_attn = False
        self.last_attn: Optional[torch.Tensor] = None

    def forward(self, x, kv, mask, bias=None):
        B, T, C = x.shape
        h = self.heads
        q = self.q(x).view(B, T, h, -1).transpose(1, 2)
        k = self.k(kv).view(B, kv.shape[1], h, -1).transpose(1, 2)
        v = self.v(kv).view(B, kv.shape[1], h, -1).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        if bias is not None:
            logits = logits + bias
        logits = logits.masked_fill(~mask, float("-inf"))
        attn = logits.softmax(-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, n_offsets: int = 1,
                 center_bias: float = 4.0):
        super().__init__()
        # learned per-head bias over relative context offsets, centre favoured at init
        bias = torch.zeros(heads, n_offsets)
        bias[:, n_offsets // 2] = center_bias if n_offsets > 1 else 0.0
        self.ctx_bias = nn.Parameter(bias)
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_x = nn.LayerNorm(dim)
        self.cross = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, mask, ctx=None, ctx_offsets=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        if ctx is not None:
            allowed = ctx_offsets >= 0
            bias = self.ctx_bias[:, ctx_offsets.clamp(min=0)]
            x = x + self.cross(self.ln_x(x), ctx, allowed, bias)
        return x + self.mlp(self.ln2(x))


class VARTransformer(nn.Module):
    """Next-scale predictor over token maps of a fixed :class:`ScaleSchedule`.

    The codebook is shared with the quantizer and is held by reference only,
    so it is not part of this module's parameters.
    """

    def __init__(
        self,
        schedule: ScaleSchedule,
        codebook: Codebook,
        width: int = 128,
        depth: int = 4,
        heads: int = 4,
        mlp_ratio: float = 4.0,
        context_window: int = 3,
    ):
        super().__init__()
        self.schedule = schedule
        self.context_window = context_window
        offsets = context_offsets(schedule, context_window)
        self._codebook = (codebook,)
        d_code, V = codebook.dim, codebook.V
        T = schedule.token_count
        std = math.sqrt(1 / width / 3)

        self.start = nn.Parameter(torch.randn(1, 1, width) * std)
        self.word_embed = nn.Linear(d_code, width)
        self.ctx_embed = nn.Linear(d_code, width)
        self.level_embed = nn.Parameter(torch.randn(schedule.K, width) * std)
        self.pos_embed = nn.Parameter(torch.randn(T, width) * std)
        self.blocks = nn.ModuleList([Block(width, heads, mlp_ratio, max(1, context_window**2)) for _ in range(depth)])
        self.head_norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, V)

        self.register_buffer("scale_ids", schedule.scale_ids(), persistent=False)
        self.register_buffer("mask", block_causal_mask(schedule), persistent=False)
        self.register_buffer("ctx_offsets", offsets, persistent=False)

    @property
    def codebook(self) -> Codebook:
        return self._codebook[0]

    def cross_attention_parameters(self) -> List[nn.Parameter]:
        params = list(self.ctx_embed.parameters())
        for b in self.blocks:
            params += [b.ctx_bias] + list(b.ln_x.parameters()) + list(b.cross.parameters())
        return params

    def zero_cross_attention(self) -> None:
        with torch.no_grad():
            for b in self.blocks:
                b.cross.proj.weight.zero_()
                b.cross.proj.bias.zero_()

    def _positional(self) -> torch.Tensor:
        return self.pos_embed + self.level_embed[self.scale_ids]

    def _check_tokens(self, tokens: Sequence[torch.Tensor]) -> None:
        if len(tokens) != self.schedule.K:
            raise ShapeError(f"got {len(tokens)} token maps, schedule has {self.schedule.K} scales")
        for k, (t, hw) in enumerate(zip(tokens, self.schedule.sizes)):
            if tuple(t.shape[-2:]) != hw:
                raise ShapeError(f"scale {k + 1}: token map is {tuple(t.shape[-2:])}, schedule says {hw}")

    def teacher_inputs(self, tokens: Sequence[torch.Tensor]) -> torch.Tensor:
        """Input features (B, T-1, d_code) for scales 2..K from the token maps of earlier scales."""
        cb = self.codebook
        size = self.schedule.latent_size
        acc = None
        feats = []
        for k in range(1, self.schedule.K):
            q = cb.lookup(tokens[k - 1]).detach()
            up = upsample(q, size)
            acc = up if acc is None else acc + up
            x = downsample(acc, self.schedule.sizes[k])
            feats.append(x.flatten(2).transpose(1, 2))
        return torch.cat(feats, 1)

    def embed_context(self, ctx: MultiScaleLatent) -> torch.Tensor:
        ctx.check(self.schedule)
        flat = torch.cat([m.flatten(2).transpose(1, 2) for m in ctx.per_scale], 1)
        return self.ctx_embed(flat) + self._positional()

    def forward(self, tokens: Sequence[torch.Tensor], ctx: Optional[InjectionContext] = None) -> torch.Tensor:
        """Teacher-forced logits (B, T, V); scale-k logits depend only on scales < k."""
        self._check_tokens(tokens)
        B = tokens[0].shape[0]
        x = self.word_embed(self.teacher_inputs(tokens))
        x = torch.cat([self.start.expand(B, -1, -1), x], 1) + self._positional()
        kv = None
        if ctx is not None and ctx.active:
            kv = self.embed_context(ctx.source)
            if kv.shape[0] != B:
                raise ShapeError(f"context batch {kv.shape[0]} != token batch {B}")
        for blk in self.blocks:
            x = blk(x, self.mask, kv, self.ctx_offsets)
        return self.head(self.head_norm(x))

    def split_scales(self, seq: torch.Tensor) -> List[torch.Tensor]:
        """Split (B, T, ...) along T into per-scale chunks."""
        return list(torch.split(seq, self.schedule.lengths, dim=1))

    def predict_tokens(self, logits: torch.Tensor) -> List[torch.Tensor]:
        """Greedy argmax token maps (ties go to the lowest index)."""
        out = []
        for chunk, (h, w) in zip(self.split_scales(logits), self.schedule.sizes):
            out.append(chunk.argmax(-1).reshape(-1, h, w))
        return out

    def predict_features(self, tokens: Sequence[torch.Tensor], ctx: Optional[InjectionContext] = None) -> MultiScaleLatent:
        """Full teacher-forced pass, argmax per scale, dequantized: the ``F_v`` sequence."""
        logits = self.forward(tokens, ctx)
        pred = self.predict_tokens(logits)
        return MultiScaleLatent([self.codebook.lookup(t).detach() for t in pred], "transformer")

    def predict_scale_features(
        self, prefix: Sequence[torch.Tensor], k: int, ctx: Optional[InjectionContext] = None
    ) -> torch.Tensor:
        """Dequantized greedy prediction (B, d_code, h_k, w_k) for 1-based scale ``k``.

        ``prefix`` holds the token maps of scales 1..k-1; later scales are
        irrelevant under block causality and are zero-filled.
        """
        if len(prefix) < k - 1:
            raise ShapeError(f"scale {k} needs {k - 1} prefix maps, got {len(prefix)}")
        ref = prefix[0] if prefix else None
        B = ref.shape[0] if ref is not None else (ctx.source.per_scale[0].shape[0] if ctx and ctx.active else 1)
        device = self.start.device
        tokens = list(prefix[: k - 1]) + [
            torch.zeros(B, h, w, dtype=torch.long, device=device) for h, w in self.schedule.sizes[k - 1 :]
        ]
        logits = self.forward(tokens, ctx)
        chunk = self.split_scales(logits)[k - 1]
        h, w = self.schedule.sizes[k - 1]
        return self.codebook.lookup(chunk.argmax(-1).reshape(B, h, w)).detach()


def flatten_tokens(tokens: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate per-scale token maps into a (B, T) sequence in scale order."""
    return torch.cat([t.flatten(1) for t in tokens], 1)


def sequence_cross_entropy(logits: torch.Tensor, tokens: Sequence[torch.Tensor]) -> torch.Tensor:
    """Cross-entropy summed over all positions, averaged over the batch."""
    target = flatten_tokens(tokens)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), reduction="sum")
    return ce / logits.shape[0]
