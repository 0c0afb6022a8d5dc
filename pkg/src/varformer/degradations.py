"""Seeded synthetic degradations and the procedural toy corpus.

Images are float32 numpy arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
All randomness comes from a Philox counter-based generator keyed by the
degradation seed, so the same spec and image give bit-identical output on
any platform running the same numpy release.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError

FAMILIES = (
    "gaussian_noise",
    "real_noise",
    "motion_blur",
    "haze",
    "low_light",
    "rain",
    "identity",
)

# Families that take part in the distribution-alignment analysis.
SYNTHETIC_FAMILIES = ("gaussian_noise", "motion_blur", "haze", "low_light", "rain")

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "gaussian_noise": {"sigma": 25.0},
    "real_noise": {"peak": 30.0, "read_sigma": 5.0},
    "motion_blur": {"length": 7.0, "angle": 0.0},
    "haze": {"transmission": 0.5, "airlight": 0.9},
    "low_light": {"gamma": 2.0, "brightness": 0.5},
    "rain": {"density": 0.02, "angle": 70.0, "length": 9.0, "intensity": 0.6},
    "identity": {},
}


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` (portable across platforms)."""
    return np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 64) - 1)))


@dataclass(frozen=True)
class DegradationSpec:
    family: str
    params: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown degradation family {self.family!r}; expected one of {FAMILIES}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.family])
        if unknown:
            raise DomainError(f"{self.family}: unknown parameters {sorted(unknown)}")
        p = self.resolved()
        fam = self.family
        if fam == "gaussian_noise" and not p["sigma"] > 0:
            raise DomainError("gaussian_noise requires sigma > 0 (0-255 scale)")
        if fam == "real_noise" and not (p["peak"] > 0 and p["read_sigma"] >= 0):
            raise DomainError("real_noise requires peak > 0 and read_sigma >= 0")
        if fam == "motion_blur" and not p["length"] >= 1:
            raise DomainError("motion_blur requires kernel length >= 1")
        if fam == "haze" and not 0 < p["transmission"] <= 1:
            raise DomainError("haze requires transmission in (0, 1]")
        if fam == "low_light" and not (p["gamma"] >= 1 and 0 < p["brightness"] <= 1):
            raise DomainError("low_light requires gamma >= 1 and brightness in (0, 1]")
        if fam == "rain" and not (p["density"] >= 0 and p["length"] >= 1):
            raise DomainError("rain requires density >= 0 and streak length >= 1")
        if not all(math.isfinite(float(v)) for v in p.values()):
            raise DomainError(f"{fam}: parameters must be finite")

    def resolved(self) -> dict[str, float]:
        return {**DEFAULT_PARAMS[self.family], **{k: float(v) for k, v in self.params.items()}}

    @property
    def label(self) -> str:
        if not self.params:
            return self.family
        return self.family + "(" + ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items())) + ")"

    def params_json(self) -> str:
        return json.dumps(dict(sorted(self.resolved().items())))


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected an RGB image of shape (3, H, W), got {image.shape}")
    return image.astype(np.float32, copy=False)


def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Normalized linear blur kernel of the given length (pixels) and angle (degrees)."""
    n = int(round(length))
    if n <= 1:
        return np.ones((1, 1), dtype=np.float64)
    size = n if n % 2 else n + 1
    k = np.zeros((size, size), dtype=np.float64)
    c = (size - 1) / 2
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)
    # supersample the segment so the kernel is smooth at oblique angles
    for t in np.linspace(-(n - 1) / 2, (n - 1) / 2, 4 * n):
        x, y = c + t * dx, c + t * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for yy, xx, w in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                          (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
            if 0 <= yy < size and 0 <= xx < size:
                k[yy, xx] += w
    return k / k.sum()


def _blur(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in image])


def apply(spec: DegradationSpec, image: np.ndarray) -> np.ndarray:
    """Degrade ``image`` according to ``spec``; output is clamped to [0, 1]."""
    img = _check_image(image).astype(np.float64)
    p = spec.resolved()
    rng = philox(spec.seed)
    fam = spec.family
    if fam == "identity":
        return _check_image(image).copy()
    if fam == "gaussian_noise":
        out = img + rng.standard_normal(img.shape) * (p["sigma"] / 255.0)
    elif fam == "real_noise":
        # Poisson-Gaussian stand-in for sensor noise
        shot = rng.poisson(np.clip(img, 0, 1) * p["peak"]) / p["peak"]
        out = shot + rng.standard_normal(img.shape) * (p["read_sigma"] / 255.0)
    elif fam == "motion_blur":
        out = _blur(img, motion_kernel(p["length"], p["angle"]))
    elif fam == "haze":
        t = p["transmission"]
        out = img * t + p["airlight"] * (1.0 - t)
    elif fam == "low_light":
        out = np.power(img, p["gamma"]) * p["brightness"]
    elif fam == "rain":
        seeds = (rng.random(img.shape[1:]) < p["density"]).astype(np.float64)
        seeds *= 0.5 + 0.5 * rng.random(img.shape[1:])
        streaks = ndimage.convolve(seeds, motion_kernel(p["length"], p["angle"]), mode="wrap")
        streaks *= p["length"]
        out = img + p["intensity"] * np.clip(streaks, 0, 1)[None]
    else:  # pragma: no cover - guarded by DegradationSpec
        raise DomainError(fam)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# procedural corpus


def procedural_image(seed: int, size: int = 64) -> np.ndarray:
    """One seeded texture: a color gradient, a few flat shapes and band-limited noise."""
    rng = philox(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1 = rng.random(3), rng.random(3)
    angle = rng.random() * 2 * math.pi
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-12)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(int(rng.integers(1, 5))):
        color = rng.random(3)
        cx, cy = rng.random(2)
        r = 0.08 + 0.22 * rng.random()
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r**2
        else:
            mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * (0.5 + rng.random()))
        alpha = 0.6 + 0.4 * rng.random()
        img = np.where(mask[None], (1 - alpha) * img + alpha * color[:, None, None], img)

    noise = ndimage.gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 2.5, 2.5), mode="wrap")
    noise /= noise.std() + 1e-12
    img = img + 0.06 * noise
    return np.clip(img, 0, 1).astype(np.float32)


def make_corpus(count: int, seed: int, size: int = 64) -> np.ndarray:
    """Stack of ``count`` procedural images, shape ``(count, 3, size, size)``."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(count, dtype=np.uint64)
    return np.stack([procedural_image(int(s), size) for s in seeds])
