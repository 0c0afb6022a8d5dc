"""Run configuration: one flat set of documented keys, loadable from a YAML file.

Keys (defaults in parentheses):

data
    seed (0)                root seed; every other seed derives from it (see ``derive_seed``)
    image_size (64)         training crop / corpus image side
    train_size (200)        procedural training images
    test_size (50)          procedural test images
quantizer
    scales ("1,2,4,8,16")   square scale schedule, comma separated
    vocab_size (512), code_dim (32), vq_width (16), commitment (0.25)
transformer
    var_width (128), var_depth (4), var_heads (4),
    var_context_window (3)  side of the same-scale context neighbourhood, 0 = whole scale
adapter
    adapter_width (64), adapter_depth (2), adapter_heads (4)
restorer
    unet_base (16), unet_levels (3), mediator_tokens (16), mediator_dim (32),
    window (4), fusion_depth (2), guide_levels ("all" or e.g. "1,3")
optimisation
    batch_size (4), lr_init (1e-4), lr_final (1e-6), beta1 (0.9), beta2 (0.999)
    pretrain_vq_steps, pretrain_vq_lr, pretrain_var_steps, pretrain_var_lr,
    stage1_steps (750), stage2_steps (600), stage2_lr (1e-3, decays to 1% of itself)
losses
    ce_weight (1), feature_weight (1), psnr_weight (1), perceptual_weight (1)
ablation
    skip, adapter, aft, dae (all true)
task weights
    weight_haze (0.3), weight_low_light (0.1), weight_rain (0.2),
    weight_gaussian_noise (0.2), weight_real_noise (0.1), weight_motion_blur (0.1)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import yaml

from ..errors import ConfigError
from ..msvq import ScaleSchedule
from ..restorer import AblationFlags, MediatorConfig
from .sampling import TaskWeighting

# counter slots for derive_seed
SEED_SLOTS = {
    "corpus_train": 0,
    "corpus_test": 1,
    "msvq_init": 2,
    "var_init": 3,
    "adapter_init": 4,
    "restorer_init": 5,
    "perceptual": 6,
    "pretrain_vq_data": 7,
    "pretrain_var_data": 8,
    "stage1_data": 9,
    "stage2_data": 10,
    "eval_degradations": 11,
    "probe": 12,
}


def derive_seed(root: int, purpose: str) -> int:
    """64-bit seed for ``purpose``: SeedSequence([root, slot]) with a fixed slot per purpose."""
    slot = SEED_SLOTS[purpose]
    return int(np.random.SeedSequence([int(root), slot]).generate_state(1, dtype=np.uint64)[0] & (2**63 - 1))


@dataclass
class Config:
    seed: int = 0
    image_size: int = 64
    train_size: int = 200
    test_size: int = 50

    scales: str = "1,2,4,8,16"
    vocab_size: int = 512
    code_dim: int = 32
    vq_width: int = 16
    commitment: float = 0.25

    var_width: int = 128
    var_depth: int = 4
    var_heads: int = 4
    var_context_window: int = 3

    adapter_width: int = 64
    adapter_depth: int = 2
    adapter_heads: int = 4

    unet_base: int = 16
    unet_levels: int = 3
    mediator_tokens: int = 16
    mediator_dim: int = 32
    window: int = 4
    fusion_depth: int = 2
    guide_levels: str = "all"

    batch_size: int = 4
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    pretrain_vq_steps: int = 1500
    pretrain_vq_lr: float = 2e-3
    pretrain_var_steps: int = 600
    pretrain_var_lr: float = 1e-3
    stage1_steps: int = 750
    stage2_steps: int = 600
    stage2_lr: float = 1e-3

    ce_weight: float = 1.0
    feature_weight: float = 1.0
    psnr_weight: float = 1.0
    perceptual_weight: float = 1.0

    skip: bool = True
    adapter: bool = True
    aft: bool = True
    dae: bool = True

    weight_haze: float = 0.3
    weight_low_light: float = 0.1
    weight_rain: float = 0.2
    weight_gaussian_noise: float = 0.2
    weight_real_noise: float = 0.1
    weight_motion_blur: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            want = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str, "bool": bool}[f.type]
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
                setattr(self, f.name, v)
            if want is bool and not isinstance(v, bool) or want is not bool and isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected {want.__name__}, got {v!r}")
            if not isinstance(v, want):
                raise ConfigError(f"{f.name}: expected {want.__name__}, got {v!r}")
        if self.lr_final > self.lr_init:
            raise ConfigError("lr_final must not exceed lr_init")
        for k in ("lr_init", "pretrain_vq_lr", "pretrain_var_lr", "stage2_lr"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("pretrain_vq_steps", "pretrain_var_steps", "stage1_steps", "stage2_steps"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.schedule  # validates
        self.task_weighting
        MediatorConfig(self.mediator_tokens, self.mediator_dim)

    # derived objects

    @property
    def schedule(self) -> ScaleSchedule:
        try:
            sides = [int(s) for s in self.scales.split(",")]
            return ScaleSchedule.square(sides)
        except ValueError as e:
            raise ConfigError(f"scales: {e}") from e

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(self.skip, self.adapter, self.aft, self.dae)

    @property
    def mediator(self) -> MediatorConfig:
        return MediatorConfig(self.mediator_tokens, self.mediator_dim)

    @property
    def guide_level_set(self) -> Optional[Tuple[int, ...]]:
        if self.guide_levels.strip() == "all":
            return None
        return tuple(int(s) for s in self.guide_levels.split(","))

    @property
    def task_weighting(self) -> TaskWeighting:
        return TaskWeighting({
            "haze": self.weight_haze,
            "low_light": self.weight_low_light,
            "rain": self.weight_rain,
            "gaussian_noise": self.weight_gaussian_noise,
            "real_noise": self.weight_real_noise,
            "motion_blur": self.weight_motion_blur,
        })

    def seed_for(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "Config":
        return from_mapping({**self.to_dict(), **changes})


def from_mapping(data: Mapping[str, Any]) -> Config:
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**dict(data))


# keys that fix parameter shapes; they cannot change once a checkpoint exists
ARCH_KEYS = frozenset({
    "image_size", "scales", "vocab_size", "code_dim", "vq_width", "var_width", "var_depth", "var_heads", "var_context_window",
    "adapter_width", "adapter_depth", "adapter_heads", "unet_base", "unet_levels", "mediator_tokens",
    "mediator_dim", "window", "fusion_depth",
})


def read_config_file(path: str) -> Dict[str, Any]:
    """Raw flat mapping from a YAML file (validated for flatness, not for keys)."""
    with open(path) as fh:
        loaded = yaml.safe_load(fh) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: expected a flat mapping of keys to values")
    for k, v in loaded.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{path}: key {k!r} must be a scalar")
    return loaded


def load_config(path: Optional[str] = None, base: Optional[Config] = None, **overrides) -> Config:
    """Defaults (or ``base``) updated by the file at ``path`` and then by non-None ``overrides``."""
    data: Dict[str, Any] = base.to_dict() if base is not None else {}
    if path:
        data.update(read_config_file(path))
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = from_mapping(data)
    if base is not None:
        changed = sorted(k for k in ARCH_KEYS if getattr(cfg, k) != getattr(base, k))
        if changed:
            raise ConfigError(f"cannot change architecture keys of a trained checkpoint: {', '.join(changed)}")
    return cfg
