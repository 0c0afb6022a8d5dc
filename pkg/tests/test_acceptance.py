"""Acceptance checks, one reported line each. Tolerances are fixed here and not tuned per run."""

import filecmp
import os
import time

import numpy as np
import pytest
import torch

from varformer.degradations import SYNTHETIC_FAMILIES, DegradationSpec
from varformer.metrics import psnr
from varformer.msvq import (
    DEFAULT_SCHEDULE,
    Codebook,
    MultiScaleLatent,
    ScaleSchedule,
    accumulate,
    nn_lookup,
    residual_quantize,
)
from varformer.pipeline import evaluate as ev
from varformer.pipeline import reports
from varformer.pipeline.config import Config
from varformer.pipeline.losses import PerceptualExtractor, fema_loss, rec_loss
from varformer.pipeline.training import (
    Data,
    Models,
    build_models,
    degraded_batch,
    make_restore_fn,
    pretrain_var,
    pretrain_vq,
    stage1_forward,
    train_stage1,
    train_stage2,
)
from varformer.restorer import (
    ABLATION_ROWS,
    AFT,
    FusionWeights,
    MediatorConfig,
    MixupSkip,
    ScaleWeightPredictor,
    aft_flops,
    dae_fuse,
    mixup_skip,
)
from varformer.scale_probe import encode_and_predict, probe_sweep, replace_and_decode
from varformer.var_transformer import InjectionContext, VARTransformer

# pinned tolerances
LOOKUP_BUDGET_S = 1.0
NORM_RTOL = 1e-6  # float32 round-off allowance on residual norms
CAUSALITY_BUDGET_S = 10.0
AFT_ATOL = 1e-5
FLOP_DOUBLING_TOL = 0.05
NORMALIZATION_ATOL = 1e-6
GRAD_RTOL = 1e-3
GRAD_BUDGET_S = 60.0
FEMA_RATIO = 0.5
STEP_BUDGET = 2000
PSNR_GAIN_DB = 2.0
SMOKE_BUDGET_S = 30 * 60
ALIGNED_FAMILIES = 4
ABLATION_STEPS = 200


# --- 1 ------------------------------------------------------------------------------


def test_01_quantizer_oracle(acceptance):
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((512, 32)).astype(np.float32)
    queries = rng.standard_normal((1000, 32)).astype(np.float32)
    cb = torch.from_numpy(rows)
    t0 = time.perf_counter()
    got = [nn_lookup(q, cb) for q in queries]
    elapsed = time.perf_counter() - t0
    # oracle: float64 squared distance to every row, first minimum
    want = [int(np.argmin(((rows.astype(np.float64) - q) ** 2).sum(1))) for q in queries]
    mismatches = sum(a != b for a, b in zip(got, want))
    ok = mismatches == 0 and elapsed < LOOKUP_BUDGET_S
    acceptance(1, ok, f"{mismatches} mismatches / 1000 queries, {elapsed:.3f} s (< {LOOKUP_BUDGET_S} s)")


# --- 2 ------------------------------------------------------------------------------


def test_02_telescoping_monotonicity(acceptance):
    g = torch.Generator().manual_seed(2)
    cb = Codebook(512, 32, contains_zero=True)
    with torch.no_grad():
        cb.weight[1:] = torch.randn(511, 32, generator=g) * 0.3
    violations = 0
    for _ in range(100):
        latent = torch.randn(1, 32, 16, 16, generator=g)
        _, ms = residual_quantize(latent, DEFAULT_SCHEDULE, cb)
        norms = [float(torch.linalg.vector_norm(latent - accumulate(ms, range(1, k + 1)))) for k in range(6)]
        violations += sum(b > a * (1 + NORM_RTOL) for a, b in zip(norms, norms[1:]))
    acceptance(2, violations == 0, f"{violations} violations over 100 latents x 5 scales")


# --- 3 ------------------------------------------------------------------------------


def test_03_block_causality(acceptance):
    t0 = time.perf_counter()
    sched = ScaleSchedule.square((1, 2, 3, 4))
    torch.manual_seed(3)
    cb = Codebook(32, 8)
    model = VARTransformer(sched, cb, width=32, depth=4, heads=4).eval()
    g = torch.Generator().manual_seed(3)
    tokens = [torch.randint(0, 32, (2, h, w), generator=g) for h, w in sched.sizes]
    ctx = InjectionContext(MultiScaleLatent([torch.randn(2, 8, h, w, generator=g) for h, w in sched.sizes]))
    worst, reached = 0.0, True
    with torch.no_grad():
        for use_ctx in (None, ctx):
            base = model(tokens, use_ctx)
            end = 0
            for k in range(sched.K):
                end += sched.lengths[k]
                pert = [t.clone() for t in tokens]
                pert[k] = (pert[k] + 1) % 32
                out = model(pert, use_ctx)
                worst = max(worst, float((out[:, :end] - base[:, :end]).abs().max()))
                if k + 1 < sched.K:
                    reached &= bool((out[:, end:] != base[:, end:]).any())
    elapsed = time.perf_counter() - t0
    ok = worst == 0.0 and reached and elapsed < CAUSALITY_BUDGET_S
    acceptance(3, ok, f"max |diff| at scales <= k: {worst:g}; later scales affected: {reached}; {elapsed:.2f} s")


# --- 4 ------------------------------------------------------------------------------


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _aft_dense(aft, f, fg):
    """Explicit numpy composition for one sample (C, h, w)."""
    C, h, w = f.shape

    def conv(x, layer):
        W = layer.weight.detach().double().numpy()[:, :, 0, 0]
        return W @ x.reshape(x.shape[0], -1) + layer.bias.detach().double().numpy()[:, None]

    q, k, v = conv(f, aft.q).T, conv(fg, aft.k).T, conv(fg, aft.v).T
    m = conv(np.concatenate([fg, f]), aft.m).reshape(-1, h, w)
    a, b = aft.cfg.grid(h, w)
    m = m.reshape(-1, a, h // a, b, w // b).mean((2, 4)).reshape(-1, a * b).T
    s = np.sqrt(aft.cfg.d)
    out = _softmax(q @ m.T / s) @ (_softmax(m @ k.T / s) @ v)
    return out.T.reshape(C, h, w) + f


def test_04_mediator_attention_oracle(acceptance):
    torch.manual_seed(4)
    cfg = MediatorConfig(16, 8)
    aft = AFT(8, cfg)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        f, fg = rng.standard_normal((2, 8, 8, 8))  # H = 64 tokens
        out = aft(torch.tensor(f[None], dtype=torch.float32), torch.tensor(fg[None], dtype=torch.float32))
        worst = max(worst, float(np.abs(out[0].detach().numpy() - _aft_dense(aft, f, fg)).max()))
    ratio = aft_flops(128, 8, cfg)["total"] / aft_flops(64, 8, cfg)["total"]
    ok = worst < AFT_ATOL and abs(ratio / 2 - 1) <= FLOP_DOUBLING_TOL
    acceptance(4, ok, f"max |aft - dense| {worst:.2e} (< {AFT_ATOL}); FLOPs(2H)/FLOPs(H) = {ratio:.4f}")


# --- 5 ------------------------------------------------------------------------------


def test_05_fusion_normalization(acceptance):
    torch.manual_seed(5)
    fusion = FusionWeights(8, window=4, depth=2, zero_init=False)
    predictor = ScaleWeightPredictor(16, 8, 5, window=4, zero_init=False)
    worst_w, worst_s = 0.0, 0.0
    with torch.no_grad():
        for _ in range(100):
            w1, w2 = fusion(torch.randn(2, 8, 8, 8), torch.randn(2, 8, 8, 8))
            worst_w = max(worst_w, float((w1 + w2 - 1).abs().max()))
            s = predictor(torch.randn(2, 16, 8, 8) * 3)
            worst_s = max(worst_s, float((s.sum(-1) - 1).abs().max()))
    ok = worst_w <= NORMALIZATION_ATOL and worst_s <= NORMALIZATION_ATOL
    acceptance(5, ok, f"max |w1+w2-1| {worst_w:.1e}, max |sum ScaleWeights - 1| {worst_s:.1e}")


# --- 6 ------------------------------------------------------------------------------


def test_06_mixup_exactness(acceptance):
    g = torch.Generator().manual_seed(6)
    a = torch.randn(4, 8, 8, 8, generator=g, dtype=torch.float64)
    b = torch.randn(4, 8, 8, 8, generator=g, dtype=torch.float64)
    worst = 0.0
    for theta in (-3.0, -0.5, 0.25, 1.7):
        s = 1.0 / (1.0 + np.exp(-theta))
        out = mixup_skip(a, b, torch.tensor(theta, dtype=torch.float64))
        worst = max(worst, float((out - (s * a + (1 - s) * b)).abs().max()))
    mean_exact = torch.equal(MixupSkip(0.0).double()(a, b), 0.5 * a + 0.5 * b)
    eps = float(np.finfo(np.float64).eps) * float(max(a.abs().max(), b.abs().max())) * 4
    ok = worst <= eps and mean_exact
    acceptance(6, ok, f"max error {worst:.1e} (<= {eps:.1e}, a few ulp); theta=0 exact mean: {mean_exact}")


# --- 7 ------------------------------------------------------------------------------


def test_07_gradient_checks(acceptance):
    t0 = time.perf_counter()
    torch.manual_seed(7)
    d = torch.float64
    kw = dict(eps=1e-6, atol=1e-8, rtol=GRAD_RTOL)
    results = {}

    fusion = FusionWeights(4, window=2, depth=1, zero_init=False).double()
    f, s = (torch.randn(1, 4, 4, 4, dtype=d, requires_grad=True) for _ in range(2))
    results["dae fuse"] = torch.autograd.gradcheck(lambda a, b: dae_fuse(fusion, a, b)[0], (f, s), **kw)

    aft = AFT(4, MediatorConfig(4, 4)).double()
    f, fg = (torch.randn(1, 4, 4, 4, dtype=d, requires_grad=True) for _ in range(2))
    results["aft"] = torch.autograd.gradcheck(aft, (f, fg), **kw)

    a, b = (torch.randn(1, 4, 4, 4, dtype=d, requires_grad=True) for _ in range(2))
    theta = torch.tensor(0.4, dtype=d, requires_grad=True)
    results["mixup"] = torch.autograd.gradcheck(mixup_skip, (a, b, theta), **kw)

    tokens = [torch.randint(0, 8, (1, h, h)) for h in (1, 2, 4)]
    logits = torch.randn(1, 21, 8, dtype=d, requires_grad=True)
    fa = torch.randn(1, 4, 4, 4, dtype=d, requires_grad=True)
    target = torch.randn(1, 4, 4, 4, dtype=d)
    results["fema"] = torch.autograd.gradcheck(lambda l, x: fema_loss(tokens, l, x, target), (logits, fa), **kw)

    psi = PerceptualExtractor(0).double()
    gt = torch.rand(1, 3, 4, 4, dtype=d)
    rec = (gt + 0.1 * torch.randn(1, 3, 4, 4, dtype=d)).requires_grad_(True)
    results["rec"] = torch.autograd.gradcheck(lambda r: rec_loss(gt, r, psi), (rec,), **kw)

    elapsed = time.perf_counter() - t0
    ok = all(results.values()) and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in results.items())
    acceptance(7, ok, f"{detail}; rtol {GRAD_RTOL}, {elapsed:.1f} s (< {GRAD_BUDGET_S:.0f} s)")


# --- 8, 9, 11: one shared smoke run on the default configuration ---------------------


@pytest.fixture(scope="session")
def smoke():
    torch.set_num_threads(1)
    cfg = Config()
    t0 = time.perf_counter()
    data = Data(cfg)
    models = build_models(cfg)
    rng = np.random.default_rng(cfg.seed_for("eval_degradations"))
    clean, deg, _ = degraded_batch(cfg.replace(batch_size=16), rng, data.test)

    def fema():
        with torch.no_grad():
            return float(stage1_forward(models, clean, deg)[0])

    pretrain_vq(models, data)
    fema_start = fema()
    pretrain_var(models, data)
    train_stage1(models, data)
    fema_end = fema()
    gaps = reports.family_gap_reports(models, data.test, reports.eval_specs(cfg.seed_for("eval_degradations")))
    stage1 = Models(cfg, models.msvq, models.var, models.adapter)
    train_stage2(models, data)
    restore = make_restore_fn(models)
    gains = {}
    for fam, params in (("gaussian_noise", {"sigma": 25.0}), ("low_light", {"gamma": 2.0})):
        spec = DegradationSpec(fam, params, cfg.seed_for("eval_degradations"))
        d = reports.degrade_set(data.test, spec)
        with torch.no_grad():
            r = restore(torch.from_numpy(d)).numpy()
        before = float(np.mean([psnr(x, c) for x, c in zip(d, data.test)]))
        after = float(np.mean([psnr(x, c) for x, c in zip(r, data.test)]))
        gains[fam] = (before, after)
    elapsed = time.perf_counter() - t0
    return dict(cfg=cfg, data=data, models=models, stage1=stage1, fema=(fema_start, fema_end),
                gaps=gaps, gains=gains, elapsed=elapsed)


def test_08_smoke_training(acceptance, smoke):
    cfg = smoke["cfg"]
    start, end = smoke["fema"]
    steps = cfg.pretrain_var_steps + cfg.stage1_steps
    ok_a = end <= FEMA_RATIO * start and steps <= STEP_BUDGET
    ok_b = all(after >= before + PSNR_GAIN_DB for before, after in smoke["gains"].values())
    ok_t = smoke["elapsed"] <= SMOKE_BUDGET_S
    gains = "; ".join(f"{f} {b:.2f} -> {a:.2f} dB" for f, (b, a) in smoke["gains"].items())
    detail = (f"(a) fema {start:.1f} -> {end:.1f}, ratio {end / start:.3f} (<= {FEMA_RATIO}) in {steps} steps; "
              f"(b) {gains} (needs +{PSNR_GAIN_DB} dB); runtime {smoke['elapsed'] / 60:.1f} min")
    acceptance(8, ok_a and ok_b and ok_t, detail)


def test_09_distribution_alignment(acceptance, smoke):
    reps = smoke["gaps"]
    aligned = [r.degradation for r in reps if r.aligned_majority]
    per = ", ".join(f"{r.degradation} {r.aligned_scales}/{len(r.per_scale_gap_encoder)}" for r in reps)
    acceptance(9, len(aligned) >= ALIGNED_FAMILIES and len(reps) == len(SYNTHETIC_FAMILIES),
               f"{len(aligned)}/{len(reps)} families aligned at a majority of scales ({per})")


def test_11_ablation_harness(acceptance, smoke):
    base = smoke["stage1"]
    curves = {}
    for row in ("a", "d", "e", "f"):
        models = Models(base.cfg, base.msvq, base.var, base.adapter)
        curves[row] = train_stage2(models, smoke["data"], ABLATION_STEPS, ABLATION_ROWS[row]).losses()
    complete = all(len(c) == ABLATION_STEPS and np.isfinite(c).all() for c in curves.values())
    keys = list(curves)
    distinct = all(not np.array_equal(curves[p], curves[q]) for i, p in enumerate(keys) for q in keys[i + 1:])
    finals = ", ".join(f"{r} {c[-20:].mean():.3f}" for r, c in curves.items())
    acceptance(11, complete and distinct,
               f"{ABLATION_STEPS} steps each, finite: {complete}, pairwise distinct: {distinct} (final {finals})")


# --- 10 -----------------------------------------------------------------------------


def test_10_probe_identities(acceptance, tmp_path):
    cfg = Config(image_size=32, scales="1,2,4,8")
    models = build_models(cfg).eval()
    data = Data(cfg.replace(train_size=4, test_size=2))
    imgs = torch.from_numpy(data.test)
    enc, pred = encode_and_predict(models.msvq, models.var, imgs)
    K = enc.K
    with torch.no_grad():
        id_empty = torch.equal(replace_and_decode(models.msvq, enc, pred, []),
                               models.msvq.decode(accumulate(enc, range(1, K + 1))))
        id_all = torch.equal(replace_and_decode(models.msvq, enc, pred, range(1, K + 1)),
                             models.msvq.decode(accumulate(pred, range(1, K + 1))))
        full = replace_and_decode(models.msvq, enc, enc, [])
        id_same = all(torch.equal(replace_and_decode(models.msvq, enc, enc, C), full)
                      for C in ([1], [2, 4], range(1, K + 1)))

    specs = reports.eval_specs(cfg.seed_for("probe"))
    runs = []
    for r in range(2):
        out = tmp_path / f"run{r}"
        probe_sweep(models.msvq, models.var, list(data.test), specs, str(out / "probe"))
        ev.synthesize(str(out / "synth"), data.test, specs)
        runs.append(out)
    files = sorted(os.path.relpath(os.path.join(d, f), runs[0])
                   for d, _, fs in os.walk(runs[0]) for f in fs if f.endswith(".png"))
    same = [filecmp.cmp(runs[0] / f, runs[1] / f, shallow=False) for f in files]
    # manifests record absolute probe paths, so compare the synth manifest only
    same.append(filecmp.cmp(runs[0] / "synth" / "manifest.csv", runs[1] / "synth" / "manifest.csv", shallow=False))
    ok = id_empty and id_all and id_same and all(same) and len(files) > 0
    acceptance(10, ok, f"C=empty {id_empty}, C=all {id_all}, pred=enc {id_same}; "
                       f"{sum(same)}/{len(same)} files bit-identical across reruns")
