"""Multi-scale residual vector-quantized autoencoder.

An image is encoded to a latent grid, the grid is quantized residually over a
coarse-to-fine schedule of token maps against one shared codebook, and the
accumulated per-scale features are decoded back to pixels.

Scale transitions use block-mean downsampling and nearest upsampling. The two
are adjoint up to the block size, which is what makes the residual norm
non-increasing from one scale to the next whenever the zero codeword is
available (for schedules whose sizes divide the latent size).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, ShapeError

PROVENANCES = ("encoder", "transformer", "adapter")


@dataclass(frozen=True)
class ScaleSchedule:
    sizes: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 2:
            raise DomainError("a scale schedule needs at least two scales")
        if sizes[0] != (1, 1):
            raise DomainError(f"first scale must be (1, 1), got {sizes[0]}")
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if not (h1 > h0 and w1 > w0):
                raise DomainError(f"scale sizes must strictly increase, got {sizes}")

    @classmethod
    def square(cls, sides: Iterable[int]) -> "ScaleSchedule":
        return cls(tuple((s, s) for s in sides))

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def latent_size(self) -> Tuple[int, int]:
        return self.sizes[-1]

    @property
    def lengths(self) -> List[int]:
        return [h * w for h, w in self.sizes]

    @property
    def token_count(self) -> int:
        return sum(self.lengths)

    @property
    def boundaries(self) -> List[int]:
        """Start offset of each scale inside the flattened sequence."""
        out, cur = [], 0
        for n in self.lengths:
            out.append(cur)
            cur += n
        return out

    def scale_ids(self) -> torch.Tensor:
        """Scale index (0-based) of every sequence position, shape (T,)."""
        return torch.cat([torch.full((n,), k, dtype=torch.long) for k, n in enumerate(self.lengths)])


DEFAULT_SCHEDULE = ScaleSchedule.square((1, 2, 4, 8, 16))


@dataclass
class MultiScaleLatent:
    """Per-scale feature maps; map ``k`` has shape (B, d_code, h_k, w_k)."""

    per_scale: List[torch.Tensor]
    provenance: str = "encoder"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DomainError(f"unknown provenance {self.provenance!r}")

    @property
    def K(self) -> int:
        return len(self.per_scale)

    @property
    def latent_size(self) -> Tuple[int, int]:
        return tuple(self.per_scale[-1].shape[-2:])

    def check(self, schedule: ScaleSchedule) -> None:
        if self.K != schedule.K:
            raise ShapeError(f"latent has {self.K} scales, schedule has {schedule.K}")
        for k, (m, hw) in enumerate(zip(self.per_scale, schedule.sizes)):
            if tuple(m.shape[-2:]) != hw:
                raise ShapeError(f"scale {k + 1}: map is {tuple(m.shape[-2:])}, schedule says {hw}")

    def detach(self) -> "MultiScaleLatent":
        return MultiScaleLatent([m.detach() for m in self.per_scale], self.provenance)


def downsample(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.adaptive_avg_pool2d(x, tuple(size))


def upsample(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="nearest")


# ---------------------------------------------------------------------------
# codebook


class Codebook(nn.Module):
    """Shared VQ dictionary of ``V`` rows by ``dim`` columns.

    With ``contains_zero`` the first row is pinned to the zero vector and never
    receives gradient.
    """

    def __init__(self, V: int = 512, dim: int = 32, contains_zero: bool = True):
        super().__init__()
        if V < 2:
            raise DomainError("codebook needs at least 2 rows")
        self.contains_zero = contains_zero
        self.weight = nn.Parameter(torch.randn(V, dim) * 0.1)
        if contains_zero:
            with torch.no_grad():
                self.weight[0].zero_()
            self.weight.register_hook(self._mask_zero_row)

    @staticmethod
    def _mask_zero_row(grad: torch.Tensor) -> torch.Tensor:
        grad = grad.clone()
        grad[0] = 0
        return grad

    @property
    def V(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @property
    def entries(self) -> torch.Tensor:
        return self.weight

    def pin_zero(self) -> None:
        """Re-zero row 0 (optimizers with weight decay may otherwise drift it)."""
        if self.contains_zero:
            with torch.no_grad():
                self.weight[0].zero_()

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """Dequantize an index grid (B, h, w) to features (B, dim, h, w)."""
        return self.weight[indices].permute(0, 3, 1, 2)


def nearest_indices(x: torch.Tensor, entries: torch.Tensor, chunk: int = 1024) -> torch.Tensor:
    """Row-wise argmin of squared distance from ``x`` (N, d) to ``entries`` (V, d).

    Distances are the explicit sum of squared differences (not the expanded
    inner-product form) so the choice matches an exhaustive scan; ties go to
    the lowest index.
    """
    out = []
    for s in range(0, x.shape[0], chunk):
        d = (x[s : s + chunk, None, :] - entries[None, :, :]).pow(2).sum(-1)
        out.append(d.argmin(1))
    if not out:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat(out)


def nn_lookup(query, codebook) -> int:
    """Index of the codebook row nearest to one ``d_code`` vector."""
    entries = codebook.entries if isinstance(codebook, Codebook) else torch.as_tensor(codebook)
    if entries.shape[0] == 0:
        raise DomainError("empty codebook")
    q = torch.as_tensor(query, dtype=entries.dtype).reshape(1, -1)
    if not torch.isfinite(q).all():
        raise DomainError("query contains non-finite values")
    if q.shape[1] != entries.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != codebook dim {entries.shape[1]}")
    return int(nearest_indices(q, entries.detach())[0])


def quantize_map(x: torch.Tensor, codebook: Codebook) -> Tuple[torch.Tensor, torch.Tensor]:
    """Quantize every position of ``x`` (B, d, h, w).

    Returns ``(indices, q_st)`` where ``q_st`` carries the codeword values
    forward and an identity Jacobian backward (straight-through).
    """
    B, d, h, w = x.shape
    flat = x.detach().permute(0, 2, 3, 1).reshape(-1, d)
    idx = nearest_indices(flat, codebook.entries.detach()).reshape(B, h, w)
    q = codebook.lookup(idx).detach()
    # forward value is exactly q; backward is the identity w.r.t. x
    return idx, q + (x - x.detach())


def residual_quantize(latent: torch.Tensor, schedule: ScaleSchedule, codebook: Codebook):
    """Quantize ``latent`` (B, d, H, W) coarse-to-fine.

    For each scale the running residual is block-averaged to (h_k, w_k),
    quantized position-wise, upsampled back and subtracted.

    Returns:
        tokens: list of K index grids (B, h_k, w_k).
        ms: MultiScaleLatent of straight-through dequantized maps.
    """
    if latent.dim() != 4:
        raise ShapeError(f"expected latent of shape (B, d, H, W), got {tuple(latent.shape)}")
    if tuple(latent.shape[-2:]) != schedule.latent_size:
        raise ShapeError(f"latent is {tuple(latent.shape[-2:])}, schedule expects {schedule.latent_size}")
    if latent.shape[1] != codebook.dim:
        raise ShapeError(f"latent has {latent.shape[1]} channels, codebook dim is {codebook.dim}")
    residual = latent
    tokens, maps = [], []
    for hw in schedule.sizes:
        idx, q = quantize_map(downsample(residual, hw), codebook)
        tokens.append(idx)
        maps.append(q)
        residual = residual - upsample(q, schedule.latent_size)
    return tokens, MultiScaleLatent(maps, "encoder")


def accumulate(ms: MultiScaleLatent, selector: Iterable[int]) -> torch.Tensor:
    """Sum of the selected (1-based) per-scale maps, each upsampled to the latent size."""
    sel = sorted(set(int(i) for i in selector))
    for i in sel:
        if not 1 <= i <= ms.K:
            raise DomainError(f"scale index {i} outside 1..{ms.K}")
    size = ms.latent_size
    ref = ms.per_scale[-1]
    out = torch.zeros_like(ref)
    for i in sel:
        out = out + upsample(ms.per_scale[i - 1], size)
    return out


def tokens_to_latent(tokens: Sequence[torch.Tensor], codebook: Codebook, provenance: str = "encoder") -> MultiScaleLatent:
    return MultiScaleLatent([codebook.lookup(t) for t in tokens], provenance)


# ---------------------------------------------------------------------------
# autoencoder


class ResBlock(nn.Module):
    def __init__(self, ch: int, groups: int = 8):
        super().__init__()
        self.body = nn.Sequential(
            nn.GroupNorm(min(groups, ch), ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(min(groups, ch), ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """Two stride-2 stages (4x downsampling); exposes per-resolution features."""

    def __init__(self, code_dim: int = 32, width: int = 32):
        super().__init__()
        self.channels = [width, 2 * width, 2 * width]
        c1, c2, c3 = self.channels
        self.stem = nn.Conv2d(3, c1, 3, padding=1)
        self.block1 = ResBlock(c1)
        self.down1 = nn.Conv2d(c1, c2, 4, stride=2, padding=1)
        self.block2 = ResBlock(c2)
        self.down2 = nn.Conv2d(c2, c3, 4, stride=2, padding=1)
        self.block3 = ResBlock(c3)
        self.out = nn.Sequential(nn.GroupNorm(8, c3), nn.SiLU(), nn.Conv2d(c3, code_dim, 1))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        f1 = self.block1(self.stem(x * 2 - 1))
        f2 = self.block2(self.down1(f1))
        f3 = self.block3(self.down2(f2))
        return self.out(f3), [f1, f2, f3]


class Decoder(nn.Module):
    def __init__(self, code_dim: int = 32, width: int = 32):
        super().__init__()
        c1, c2 = width, 2 * width
        self.net = nn.Sequential(
            nn.Conv2d(code_dim, c2, 3, padding=1), ResBlock(c2), ResBlock(c2),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c2, c2, 3, padding=1), ResBlock(c2),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c2, c1, 3, padding=1), ResBlock(c1),
            nn.GroupNorm(8, c1), nn.SiLU(), nn.Conv2d(c1, 3, 3, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z) * 0.5 + 0.5


class MSVQ(nn.Module):
    downsample_factor = 4

    def __init__(
        self,
        schedule: ScaleSchedule = DEFAULT_SCHEDULE,
        vocab_size: int = 512,
        code_dim: int = 32,
        width: int = 32,
        commitment: float = 0.25,
    ):
        super().__init__()
        self.schedule = schedule
        self.commitment = commitment
        self.encoder = Encoder(code_dim, width)
        self.decoder = Decoder(code_dim, width)
        self.codebook = Codebook(vocab_size, code_dim, contains_zero=True)

    @property
    def pyramid_channels(self) -> List[int]:
        return list(self.encoder.channels)

    def _check_image(self, image: torch.Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected images of shape (B, 3, H, W), got {tuple(image.shape)}")
        f = self.downsample_factor
        H, W = image.shape[-2:]
        if H % f or W % f:
            raise ShapeError(f"image size {H}x{W} must be a multiple of {f}")
        lat = (H // f, W // f)
        if lat != self.schedule.latent_size:
            raise ShapeError(f"image size {H}x{W} gives latent {lat}, schedule expects {self.schedule.latent_size}")

    def encode_pyramid(self, image: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        self._check_image(image)
        return self.encoder(image)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encode_pyramid(image)[0]

    def quantize(self, latent: torch.Tensor):
        return residual_quantize(latent, self.schedule, self.codebook)

    def decode_raw(self, latent: torch.Tensor) -> torch.Tensor:
        if tuple(latent.shape[-2:]) != self.schedule.latent_size:
            raise ShapeError(f"latent is {tuple(latent.shape[-2:])}, expected {self.schedule.latent_size}")
        if not torch.isfinite(latent).all():
            raise DomainError("latent contains non-finite values")
        return self.decoder(latent)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(latent).clamp(0.0, 1.0)

    def reconstruct(self, image: torch.Tensor) -> torch.Tensor:
        _, ms = self.quantize(self.encode(image))
        return self.decode(accumulate(ms, range(1, ms.K + 1)))

    def loss(self, image: torch.Tensor):
        """Reconstruction + codebook + commitment loss for one batch."""
        z = self.encode(image)
        tokens, ms = self.quantize(z)
        zq = accumulate(ms, range(1, ms.K + 1))
        recon = self.decode_raw(zq)
        rec = F.mse_loss(recon, image)
        # codebook / commitment terms, per scale on the block-averaged residual
        residual = z
        cb = commit = z.new_zeros(())
        for idx, hw in zip(tokens, self.schedule.sizes):
            target = downsample(residual, hw)
            q = self.codebook.lookup(idx)
            cb = cb + F.mse_loss(q, target.detach())
            commit = commit + F.mse_loss(target, q.detach())
            residual = residual - upsample(q.detach() + (target - target.detach()), self.schedule.latent_size)
        total = rec + cb + self.commitment * commit
        return total, {"rec": rec.item(), "codebook": cb.item(), "commit": commit.item()}
