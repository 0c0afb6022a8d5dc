"""Model construction, persistence and the training stages.

Stages, in order:

1. ``pretrain_vq``   quantized autoencoder on clean images
2. ``pretrain_var``  transformer on clean token maps with the clean encoder
                     sequence injected (reconstruction pre-training)
3. ``train_stage1``  adapter + cross-attention on degraded inputs, feature matching loss
4. ``train_stage2``  restorer on degraded inputs, reconstruction loss; all prior modules frozen
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from ..degradations import apply, make_corpus
from ..errors import CheckpointError
from ..msvq import MSVQ, MultiScaleLatent, accumulate, downsample, upsample
from ..restorer import AblationFlags, Adapter, Restorer
from ..var_transformer import InjectionContext, VARTransformer, sequence_cross_entropy
from . import checkpoint as ckpt
from .config import Config, from_mapping
from .losses import PerceptualExtractor, fema_loss, rec_loss
from .sampling import sample_task_batch

log = logging.getLogger(__name__)


def cosine_lr(step: int, steps: int, lr_init: float, lr_final: float) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at step ``steps - 1``."""
    if steps <= 1:
        return lr_init
    t = min(max(step, 0), steps - 1) / (steps - 1)
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * t))


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, t in module.state_dict().items():
        h.update(k.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Models:
    cfg: Config
    msvq: MSVQ
    var: VARTransformer
    adapter: Adapter
    restorer: Optional[Restorer] = None
    stage: str = "init"

    def modules(self) -> Dict[str, nn.Module]:
        out = {"msvq": self.msvq, "var": self.var, "adapter": self.adapter}
        if self.restorer is not None:
            out["restorer"] = self.restorer
        return out

    def eval(self) -> "Models":
        for m in self.modules().values():
            m.eval()
        return self


def _seeded(seed: int, fn: Callable[[], nn.Module]) -> nn.Module:
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return fn()
    finally:
        torch.random.set_rng_state(state)


def build_restorer(cfg: Config, msvq: MSVQ, flags: Optional[AblationFlags] = None) -> Restorer:
    return _seeded(cfg.seed_for("restorer_init"), lambda: Restorer(
        cfg.schedule.K, cfg.code_dim, msvq.pyramid_channels, base=cfg.unet_base, levels=cfg.unet_levels,
        mediator=cfg.mediator, window=cfg.window, fusion_depth=cfg.fusion_depth,
        flags=flags or cfg.flags, guide_levels=cfg.guide_level_set,
    ))


def build_models(cfg: Config, with_restorer: bool = False) -> Models:
    sched = cfg.schedule
    msvq = _seeded(cfg.seed_for("msvq_init"), lambda: MSVQ(sched, cfg.vocab_size, cfg.code_dim, cfg.vq_width, cfg.commitment))
    var = _seeded(cfg.seed_for("var_init"), lambda: VARTransformer(sched, msvq.codebook, cfg.var_width, cfg.var_depth, cfg.var_heads,
                                                                  context_window=cfg.var_context_window))
    adapter = _seeded(cfg.seed_for("adapter_init"), lambda: Adapter(
        cfg.code_dim, sched.latent_size, cfg.adapter_width, cfg.adapter_depth, cfg.adapter_heads))
    restorer = build_restorer(cfg, msvq) if with_restorer else None
    return Models(cfg, msvq, var, adapter, restorer)


def save_models(path: str, models: Models) -> None:
    meta = {"config": models.cfg.to_dict(), "stage": models.stage}
    ckpt.save_modules(path, models.modules(), meta)


def load_models(path: str, require: Iterable[str] = ("msvq", "var")) -> Models:
    sections = ckpt.read_checkpoint(path)
    meta = ckpt.read_meta(sections)
    ckpt.require(sections, *require)
    cfg = from_mapping(meta["config"])
    models = build_models(cfg, with_restorer="restorer" in sections)
    for name, module in models.modules().items():
        if name in sections:
            ckpt.load_blob(module, sections[name], name)
    models.stage = meta.get("stage", "unknown")
    return models.eval()


# ---------------------------------------------------------------------------
# data


class Data:
    """Procedural train/test corpora for one config (cached per seed)."""

    _cache: Dict[Tuple[int, int, int, int], Tuple[np.ndarray, np.ndarray]] = {}

    def __init__(self, cfg: Config):
        key = (cfg.seed, cfg.train_size, cfg.test_size, cfg.image_size)
        if key not in Data._cache:
            Data._cache[key] = (
                make_corpus(cfg.train_size, cfg.seed_for("corpus_train"), cfg.image_size),
                make_corpus(cfg.test_size, cfg.seed_for("corpus_test"), cfg.image_size),
            )
        self.train, self.test = Data._cache[key]


def degraded_batch(cfg: Config, rng: np.random.Generator, corpus: np.ndarray):
    pairs = sample_task_batch(cfg.task_weighting, cfg.batch_size, rng, corpus)
    clean = torch.from_numpy(np.stack([c for c, _ in pairs]))
    deg = torch.from_numpy(np.stack([apply(s, c) for c, s in pairs]))
    return clean, deg, [s for _, s in pairs]


def clean_batch(cfg: Config, rng: np.random.Generator, corpus: np.ndarray, batch_size: Optional[int] = None):
    idx = rng.integers(len(corpus), size=batch_size or cfg.batch_size)
    x = torch.from_numpy(corpus[idx].copy())
    flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
    return torch.where(flip[:, None, None, None], x.flip(-1), x)


# ---------------------------------------------------------------------------
# loop helpers


@dataclass
class LossCurve:
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    def add(self, step: int, loss: float, lr: float) -> None:
        self.rows.append((step, float(loss), float(lr)))

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write(self, path: str, figure: bool = True, title: str = "") -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for s, l, lr in self.rows:
                w.writerow([s, f"{l:.6g}", f"{lr:.6g}"])
        if figure:
            from ..plotting import plot_loss_curves

            plot_loss_curves({title or "loss": self}, os.path.splitext(path)[0] + ".png")


def _adam(params, cfg: Config, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2))


def _run(steps: int, lr_init: float, lr_final: float, opt: torch.optim.Optimizer, step_fn, label: str) -> LossCurve:
    curve = LossCurve()
    t0 = time.time()
    for step in range(steps):
        lr = cosine_lr(step, steps, lr_init, lr_final)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = step_fn(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.add(step, loss.item(), lr)
        if step % 100 == 0 or step == steps - 1:
            log.info("%s step %d/%d loss %.4f lr %.2e (%.0fs)", label, step, steps, loss.item(), lr, time.time() - t0)
    return curve


def _freeze(*modules: nn.Module) -> None:
    for m in modules:
        m.requires_grad_(False)


# ---------------------------------------------------------------------------
# stage 0: clean reconstruction pre-training


@torch.no_grad()
def _init_codebook(msvq: MSVQ, images: torch.Tensor, gen: torch.Generator) -> None:
    """Seed codebook rows 1..V-1 with encoder residual vectors from all scales."""
    z = msvq.encode(images)
    samples, residual = [], z
    for hw in msvq.schedule.sizes:
        r = downsample(residual, hw)
        samples.append(r.permute(0, 2, 3, 1).reshape(-1, r.shape[1]))
        residual = residual - upsample(r * 0.5, msvq.schedule.latent_size)
    pool = torch.cat(samples)
    V = msvq.codebook.V
    pick = torch.randint(len(pool), (V - 1,), generator=gen)
    msvq.codebook.weight[1:] = pool[pick] + 0.01 * torch.randn(V - 1, pool.shape[1], generator=gen)
    msvq.codebook.pin_zero()


def pretrain_vq(models: Models, data: Data, steps: Optional[int] = None) -> LossCurve:
    cfg = models.cfg
    steps = steps or cfg.pretrain_vq_steps
    msvq = models.msvq.train()
    rng = np.random.default_rng(cfg.seed_for("pretrain_vq_data"))
    torch.manual_seed(cfg.seed_for("pretrain_vq_data"))
    _init_codebook(msvq, clean_batch(cfg, rng, data.train, 32), torch.Generator().manual_seed(cfg.seed))
    opt = _adam(msvq.parameters(), cfg, cfg.pretrain_vq_lr)

    def step(_):
        loss, _parts = msvq.loss(clean_batch(cfg, rng, data.train))
        return loss

    curve = _run(steps, cfg.pretrain_vq_lr, cfg.pretrain_vq_lr * 0.01, opt, step, "pretrain-vq")
    msvq.codebook.pin_zero()
    models.stage = "pretrain-vq"
    return curve


def pretrain_var(models: Models, data: Data, steps: Optional[int] = None) -> LossCurve:
    """Teacher-forced training on clean token maps with the clean encoder sequence injected."""
    cfg = models.cfg
    steps = steps or cfg.pretrain_var_steps
    msvq, var = models.msvq.eval(), models.var.train()
    _freeze(msvq)
    var.requires_grad_(True)
    rng = np.random.default_rng(cfg.seed_for("pretrain_var_data"))
    opt = _adam(var.parameters(), cfg, cfg.pretrain_var_lr)

    def step(_):
        with torch.no_grad():
            tokens, ms = msvq.quantize(msvq.encode(clean_batch(cfg, rng, data.train)))
        logits = var(tokens, InjectionContext(ms))
        return sequence_cross_entropy(logits, tokens)

    curve = _run(steps, cfg.pretrain_var_lr, cfg.pretrain_var_lr * 0.01, opt, step, "pretrain-var")
    models.stage = "pretrain-var"
    return curve


# ---------------------------------------------------------------------------
# stage 1


def stage1_forward(models: Models, clean: torch.Tensor, deg: torch.Tensor, use_adapter: bool = True):
    """Return (fema loss, parts) for one batch of clean/degraded pairs."""
    cfg, msvq, var = models.cfg, models.msvq, models.var
    with torch.no_grad():
        tok_c, ms_c = msvq.quantize(msvq.encode(clean))
        target = accumulate(ms_c, range(1, ms_c.K + 1))
        z_d = msvq.encode(deg)
    f_a = models.adapter(z_d) if use_adapter else z_d
    tok_a, ms_a = msvq.quantize(f_a)
    logits = var(tok_a, InjectionContext(ms_a))
    return fema_loss(tok_c, logits, f_a, target, cfg.ce_weight, cfg.feature_weight, return_parts=True)


def stage1_parameters(models: Models) -> List[nn.Parameter]:
    return list(models.adapter.parameters()) + models.var.cross_attention_parameters()


def train_stage1(models: Models, data: Data, steps: Optional[int] = None) -> LossCurve:
    """Adapter + cross-attention training with the feature matching loss; everything else frozen."""
    cfg = models.cfg
    steps = steps or cfg.stage1_steps
    models.msvq.eval()
    models.var.eval()  # no dropout anywhere; eval keeps LayerNorm/GroupNorm behaviour identical
    models.adapter.train()
    _freeze(models.msvq, models.var, models.adapter)
    params = stage1_parameters(models)
    for p in params:
        p.requires_grad_(True)
    rng = np.random.default_rng(cfg.seed_for("stage1_data"))
    opt = _adam(params, cfg, cfg.lr_init)

    def step(_):
        clean, deg, _specs = degraded_batch(cfg, rng, data.train)
        loss, _parts = stage1_forward(models, clean, deg)
        return loss

    curve = _run(steps, cfg.lr_init, cfg.lr_final, opt, step, "stage1")
    _freeze(models.adapter, models.var)
    models.stage = "stage1"
    return curve


# ---------------------------------------------------------------------------
# stage 2


class PriorExtractor:
    """Frozen path from a degraded image to (S_v, VAR-encoder pyramid)."""

    def __init__(self, models: Models, use_adapter: bool = True):
        self.models = models
        self.use_adapter = use_adapter

    @torch.no_grad()
    def __call__(self, deg: torch.Tensor) -> Tuple[MultiScaleLatent, List[torch.Tensor]]:
        m = self.models
        z, pyramid = m.msvq.encode_pyramid(deg)
        if self.use_adapter:
            z = m.adapter(z)
        tokens, ms = m.msvq.quantize(z)
        s_v = m.var.predict_features(tokens, InjectionContext(ms))
        return s_v, pyramid


def perceptual_for(cfg: Config) -> PerceptualExtractor:
    return PerceptualExtractor(cfg.seed_for("perceptual"))


def train_stage2(
    models: Models,
    data: Data,
    steps: Optional[int] = None,
    flags: Optional[AblationFlags] = None,
) -> LossCurve:
    """Restorer training with the reconstruction loss; quantizer, transformer and adapter stay frozen."""
    cfg = models.cfg
    steps = steps or cfg.stage2_steps
    flags = flags or cfg.flags
    for m in (models.msvq, models.var, models.adapter):
        m.eval()
    _freeze(models.msvq, models.var, models.adapter)
    if models.restorer is None or models.restorer.flags != flags:
        models.restorer = build_restorer(cfg, models.msvq, flags)
    restorer = models.restorer.train()
    restorer.requires_grad_(True)
    extractor = PriorExtractor(models, use_adapter=flags.adapter)
    psi = perceptual_for(cfg)
    rng = np.random.default_rng(cfg.seed_for("stage2_data"))
    opt = _adam(restorer.parameters(), cfg, cfg.stage2_lr)

    def step(_):
        clean, deg, _specs = degraded_batch(cfg, rng, data.train)
        s_v, pyramid = extractor(deg)
        out = restorer(deg, s_v, pyramid)
        return rec_loss(clean, out, psi, cfg.psnr_weight, cfg.perceptual_weight)

    curve = _run(steps, cfg.stage2_lr, cfg.stage2_lr * 0.01, opt, step, f"stage2[{flags.label}]")
    restorer.eval()
    models.stage = "stage2"
    return curve


def make_restore_fn(models: Models) -> Callable[[torch.Tensor], torch.Tensor]:
    """Batch restore function (B, 3, H, W) -> (B, 3, H, W) in [0, 1]."""
    if models.restorer is None:
        raise CheckpointError("checkpoint has no 'restorer' section; run train-stage2 first")
    models.eval()
    extractor = PriorExtractor(models, use_adapter=models.restorer.flags.adapter)

    @torch.no_grad()
    def restore(deg: torch.Tensor) -> torch.Tensor:
        s_v, pyramid = extractor(deg)
        return models.restorer.restore(deg, s_v, pyramid)

    return restore
