import csv
import math
import os

import numpy as np
import pytest
import torch
import yaml

from varformer.degradations import DegradationSpec, apply, procedural_image
from varformer.errors import CheckpointError, ConfigError, DataError, DomainError, ShapeError
from varformer.metrics import psnr, ssim
from varformer.msvq import ScaleSchedule
from varformer.pipeline import checkpoint as ckpt
from varformer.pipeline import evaluate as ev
from varformer.pipeline.cli import main
from varformer.pipeline.config import Config, derive_seed, from_mapping, load_config
from varformer.pipeline.losses import PerceptualExtractor, fema_loss, perceptual_distance, rec_loss
from varformer.pipeline.sampling import DEFAULT_TASK_WEIGHTS, TaskWeighting, sample_task_batch
from varformer.pipeline.training import (
    Data,
    PriorExtractor,
    build_models,
    cosine_lr,
    load_models,
    param_digest,
    save_models,
    stage1_parameters,
    train_stage1,
    train_stage2,
)
from varformer.restorer import ABLATION_ROWS

TINY = dict(
    image_size=16, train_size=8, test_size=4, scales="1,2,4", vocab_size=32, code_dim=8, vq_width=8,
    var_width=32, var_depth=2, var_heads=4, adapter_width=16, adapter_depth=1, adapter_heads=4,
    unet_base=4, mediator_tokens=4, mediator_dim=4, window=2, fusion_depth=1, batch_size=2,
    pretrain_vq_steps=3, pretrain_var_steps=3, stage1_steps=3, stage2_steps=3,
)


def tiny_cfg(**kw):
    return from_mapping({**TINY, **kw})


# --- losses -----------------------------------------------------------------------------


def one_hot_logits(tokens, V, margin=20.0):
    flat = torch.cat([t.flatten(1) for t in tokens], 1)
    return torch.nn.functional.one_hot(flat, V).double() * margin


def test_fema_perfect_prediction_near_zero():
    sched = ScaleSchedule(((1, 1), (2, 2)))
    g = torch.Generator().manual_seed(0)
    tokens = [torch.randint(0, 512, (2, h, w), generator=g) for h, w in sched.sizes]
    f = torch.randn(2, 8, 2, 2, dtype=torch.float64)
    loss = fema_loss(tokens, one_hot_logits(tokens, 512), f.clone(), f)
    # closed form: T * log(1 + 511 e^-20)
    assert 0 <= float(loss) < 1e-4
    assert float(loss) == pytest.approx(5 * math.log1p(511 * math.exp(-20)), rel=1e-9)


def test_fema_uniform_logits_closed_form():
    sched = ScaleSchedule(((1, 1), (2, 2), (4, 4)))
    tokens = [torch.zeros(3, h, w, dtype=torch.long) for h, w in sched.sizes]
    logits = torch.zeros(3, 21, 512, dtype=torch.float64)
    f = torch.zeros(3, 4, 4, 4, dtype=torch.float64)
    assert float(fema_loss(tokens, logits, f, f)) == pytest.approx(21 * math.log(512), rel=1e-12)


def test_fema_stop_gradient_and_errors():
    sched = ScaleSchedule(((1, 1), (2, 2)))
    tokens = [torch.zeros(1, h, w, dtype=torch.long) for h, w in sched.sizes]
    logits = torch.randn(1, 5, 16, requires_grad=True)
    f_a = torch.randn(1, 4, 2, 2, requires_grad=True)
    target = torch.randn(1, 4, 2, 2, requires_grad=True)
    fema_loss(tokens, logits, f_a, target).backward()
    assert target.grad is None or torch.equal(target.grad, torch.zeros_like(target))
    assert f_a.grad.abs().sum() > 0
    with pytest.raises(ShapeError):
        fema_loss(tokens, logits, f_a, target[:, :2])
    with pytest.raises(ShapeError):
        fema_loss(tokens, logits[:, :4], f_a, target)


def test_gradcheck_fema():
    sched = ScaleSchedule(((1, 1), (2, 2)))
    tokens = [torch.tensor([[2]]), torch.tensor([[[0, 1], [3, 2]]])]
    logits = torch.randn(1, 5, 4, dtype=torch.float64, requires_grad=True)
    f_a = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    tgt = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda l, f: fema_loss(tokens, l, f, tgt), (logits, f_a), eps=1e-6, atol=1e-6, rtol=1e-3)


@pytest.fixture(scope="module")
def psi():
    return PerceptualExtractor(seed=3).double()


def test_rec_loss_identity_and_symmetry(psi):
    a = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    b = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    assert float(rec_loss(a, a, psi)) == -100.0
    assert float(perceptual_distance(psi, a, b)) == pytest.approx(float(perceptual_distance(psi, b, a)), rel=1e-12)
    assert torch.isfinite(rec_loss(a, b, psi))
    with pytest.raises(ShapeError):
        rec_loss(a, b[..., :8], psi)


def test_psnr_term_gradient_parallel_to_mse(psi):
    gt = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    rec = (gt + 0.05 * torch.randn_like(gt)).requires_grad_(True)
    (g1,) = torch.autograd.grad(rec_loss(gt, rec, psi, 1.0, 0.0), rec)
    (g2,) = torch.autograd.grad((rec - gt).pow(2).mean(), rec)
    cos = torch.nn.functional.cosine_similarity(g1.flatten(), g2.flatten(), dim=0)
    assert abs(float(cos) - 1) < 1e-6


def test_gradcheck_rec_loss():
    psi = PerceptualExtractor(seed=1, widths=(4, 4, 4)).double()
    gt = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    rec = (gt + 0.1 * torch.randn_like(gt)).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda r: rec_loss(gt, r, psi), (rec,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_perceptual_extractor_frozen_and_seeded():
    a, b = PerceptualExtractor(seed=5), PerceptualExtractor(seed=5)
    assert param_digest(a) == param_digest(b)
    assert all(not p.requires_grad for p in a.parameters())
    a.train()
    assert not a.training
    assert param_digest(PerceptualExtractor(seed=6)) != param_digest(a)


# --- schedule, sampling, config ---------------------------------------------------------


def test_cosine_schedule_endpoints_and_monotone():
    lrs = [cosine_lr(s, 500, 1e-4, 1e-6) for s in range(500)]
    assert lrs[0] == pytest.approx(1e-4, abs=1e-15)
    assert abs(lrs[-1] - 1e-6) <= 1e-9
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_task_weights_values():
    assert DEFAULT_TASK_WEIGHTS == {"haze": 0.3, "low_light": 0.1, "rain": 0.2, "gaussian_noise": 0.2,
                                  "real_noise": 0.1, "motion_blur": 0.1}
    with pytest.raises(DomainError):
        TaskWeighting({"haze": 0.5, "rain": 0.4})
    with pytest.raises(DomainError):
        TaskWeighting({"haze": 1.2, "rain": -0.2})


def test_sampling_frequencies():
    corpus = np.zeros((3, 3, 4, 4), np.float32)
    pairs = sample_task_batch(TaskWeighting(), 10_000, np.random.default_rng(0), corpus)
    fams = [s.family for _, s in pairs]
    for fam, w in DEFAULT_TASK_WEIGHTS.items():
        assert abs(fams.count(fam) / len(fams) - w) <= 0.02


def test_sampling_one_hot_determinism_and_empty():
    corpus = np.random.default_rng(0).random((5, 3, 4, 4)).astype(np.float32)
    pairs = sample_task_batch(TaskWeighting({"rain": 1.0}), 50, np.random.default_rng(1), corpus)
    assert {s.family for _, s in pairs} == {"rain"}
    a = sample_task_batch(TaskWeighting(), 20, np.random.default_rng(7), corpus)
    b = sample_task_batch(TaskWeighting(), 20, np.random.default_rng(7), corpus)
    assert [(s, c.tobytes()) for c, s in a] == [(s, c.tobytes()) for c, s in b]
    with pytest.raises(DataError):
        sample_task_batch(TaskWeighting(), 2, np.random.default_rng(0), corpus[:0])


def test_config_defaults_and_errors(tmp_path):
    cfg = Config()
    assert (cfg.lr_init, cfg.lr_final, cfg.beta1, cfg.beta2) == (1e-4, 1e-6, 0.9, 0.999)
    assert list(cfg.schedule.sizes) == [(1, 1), (2, 2), (4, 4), (8, 8), (16, 16)]
    assert cfg.flags == ABLATION_ROWS["f"]
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 4, "stage1_steps": 7}))
    assert load_config(str(path)).stage1_steps == 7
    assert load_config(str(path), seed=9).seed == 9
    path.write_text("bogus_key: 1\n")
    with pytest.raises(ConfigError, match="bogus_key"):
        load_config(str(path))
    for bad in ({"lr_final": 1.0}, {"stage2_steps": 0}, {"stage2_lr": 0.0}, {"skip": "yes"}, {"weight_haze": 0.9}, {"scales": "2,4"}):
        with pytest.raises((ConfigError, DomainError)):
            from_mapping(bad)
    with pytest.raises(ConfigError, match="architecture"):
        load_config(None, base=cfg, var_width=64)


def test_derived_seeds_distinct_and_stable():
    seeds = {derive_seed(0, p) for p in ("corpus_train", "corpus_test", "msvq_init", "stage2_data")}
    assert len(seeds) == 4
    assert derive_seed(0, "msvq_init") == derive_seed(0, "msvq_init") != derive_seed(1, "msvq_init")


# --- checkpoint -------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tmp_path):
    cfg = tiny_cfg()
    models = build_models(cfg, with_restorer=True)
    with torch.no_grad():
        for p in models.adapter.parameters():
            p.add_(0.01)
    path = str(tmp_path / "m.varf")
    save_models(path, models)
    loaded = load_models(path)
    assert loaded.cfg == cfg
    for name, m in models.modules().items():
        assert param_digest(m) == param_digest(loaded.modules()[name])
    x = torch.rand(2, 3, 16, 16)
    models.eval()
    a = models.restorer(x, *PriorExtractor(models)(x))
    b = loaded.restorer(x, *PriorExtractor(loaded)(x))
    assert torch.equal(a, b)


def test_checkpoint_layout(tmp_path):
    path = str(tmp_path / "x.varf")
    ckpt.write_checkpoint(path, {"a": b"\x00" * 8, "bb": b"\x01\x02\x03\x04"})
    raw = open(path, "rb").read()
    assert raw[:8] == b"VARF0001"
    assert int.from_bytes(raw[8:12], "little") == 2
    assert ckpt.read_checkpoint(path) == {"a": b"\x00" * 8, "bb": b"\x01\x02\x03\x04"}


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        ckpt.read_checkpoint(str(tmp_path / "missing.varf"))
    bad = tmp_path / "bad.varf"
    bad.write_bytes(b"NOTAVARF" + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.read_checkpoint(str(bad))
    good = str(tmp_path / "g.varf")
    ckpt.write_checkpoint(good, {"a": b"\x00" * 64})
    (tmp_path / "t.varf").write_bytes(open(good, "rb").read()[:-10])
    with pytest.raises(CheckpointError):
        ckpt.read_checkpoint(str(tmp_path / "t.varf"))
    models = build_models(tiny_cfg())
    save_models(good, models)
    with pytest.raises(CheckpointError, match="restorer"):
        load_models(good, require=("msvq", "restorer"))


# --- freeze contracts -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_models():
    cfg = tiny_cfg()
    return build_models(cfg), Data(cfg)


def test_stage1_freeze_contract(tiny_models):
    models, data = tiny_models
    with torch.no_grad():
        models.adapter.out.weight.normal_(0, 0.01)
    trainable = {id(p) for p in stage1_parameters(models)}
    before = {n: p.detach().clone() for n, p in models.var.named_parameters()}
    msvq_digest = param_digest(models.msvq)
    adapter_digest = param_digest(models.adapter)
    curve = train_stage1(models, data, steps=3)
    assert len(curve.rows) == 3 and abs(curve.rows[-1][2] - models.cfg.lr_final) <= 1e-9
    assert param_digest(models.msvq) == msvq_digest
    assert param_digest(models.adapter) != adapter_digest
    for n, p in models.var.named_parameters():
        if id(p) in trainable:
            continue
        assert torch.equal(p, before[n]), n
    assert any(not torch.equal(p, before[n]) for n, p in models.var.named_parameters() if id(p) in trainable)


def test_stage2_freeze_contract(tiny_models):
    models, data = tiny_models
    digests = {n: param_digest(m) for n, m in models.modules().items()}
    curve = train_stage2(models, data, steps=2)
    lr = models.cfg.stage2_lr
    assert [r[2] for r in curve.rows] == pytest.approx([lr, lr * 0.01], rel=1e-12)
    for n in ("msvq", "var", "adapter"):
        assert param_digest(models.modules()[n]) == digests[n]
    assert models.restorer is not None


# --- evaluation -------------------------------------------------------------------------


@pytest.fixture
def synth_dir(tmp_path):
    images = np.stack([procedural_image(i, 16) for i in range(3)])
    specs = [DegradationSpec("gaussian_noise", {"sigma": 25.0}, 5), DegradationSpec("haze")]
    ev.synthesize(str(tmp_path), images, specs)
    return tmp_path


def test_synth_manifest(synth_dir):
    rows = list(csv.DictReader(open(synth_dir / "manifest.csv")))
    assert len(rows) == 6
    assert list(rows[0]) == ev.MANIFEST_COLUMNS
    r = rows[0]
    clean = ev.load_image(str(synth_dir / r["clean_path"]))
    expected = ev.quantize8(apply(ev.spec_of(r), procedural_image(0, 16)))
    assert np.array_equal(ev.load_image(str(synth_dir / r["degraded_path"])), expected)
    assert np.array_equal(clean, ev.quantize8(procedural_image(0, 16)))


def test_evaluate_perfect_restoration(synth_dir):
    clean_of = {r["degraded_path"]: r["clean_path"] for r in ev.read_manifest(str(synth_dir / "manifest.csv"))}
    paths = iter(ev.read_manifest(str(synth_dir / "manifest.csv")))

    def oracle(batch):
        return torch.from_numpy(np.stack([ev.load_image(clean_of[next(paths)["degraded_path"]]) for _ in batch]))

    rows = ev.evaluate(str(synth_dir / "manifest.csv"), oracle, str(synth_dir / "m.csv"), figure=False)
    s = ev.summary(rows)
    assert s["haze"] == {"psnr": 100.0, "ssim": 1.0}
    assert s["gaussian_noise"] == {"psnr": 100.0, "ssim": 1.0}


def test_evaluate_identity_matches_direct(synth_dir):
    out = synth_dir / "metrics.csv"
    rows = ev.evaluate(str(synth_dir / "manifest.csv"), None, str(out))
    assert len(rows) == 6 + 2
    assert (synth_dir / "metrics.png").exists()
    written = list(csv.DictReader(open(out)))
    assert list(written[0]) == ["id", "family", "psnr", "ssim"]
    assert [r["id"] for r in written[-2:]] == ["MEAN:gaussian_noise", "MEAN:haze"]
    man = {r["id"]: r for r in ev.read_manifest(str(synth_dir / "manifest.csv"))}
    for r in written[:-2]:
        m = man[r["id"]]
        d, c = ev.load_image(m["degraded_path"]), ev.load_image(m["clean_path"])
        assert float(r["psnr"]) == pytest.approx(psnr(d, c), abs=1e-6)
        assert float(r["ssim"]) == pytest.approx(ssim(d, c), abs=1e-6)


def test_evaluate_order_independent():
    rng = np.random.default_rng(0)
    items = [(f"{i:02d}", "f" + str(i % 2), rng.random((3, 12, 12)), rng.random((3, 12, 12))) for i in range(6)]
    assert ev.evaluate_pairs(items) == ev.evaluate_pairs(items[::-1])


def test_evaluate_missing_files(synth_dir):
    os.remove(synth_dir / "degraded" / "0001_haze.png")
    os.remove(synth_dir / "clean" / "0002.png")
    with pytest.raises(DataError) as e:
        ev.read_manifest(str(synth_dir / "manifest.csv"))
    assert "0001_haze.png" in str(e.value) and "0002.png" in str(e.value)
    with pytest.raises(DataError):
        ev.read_manifest(str(synth_dir / "nope.csv"))


# --- CLI --------------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    out = str(tmp_path / "run")
    common = ["--config", str(cfg_path), "--out", out]
    assert main(["synth", *common, "--count", "2"]) == 0
    assert main(["pretrain-vq", *common]) == 0
    assert main(["train-stage1", *common, "--checkpoint", f"{out}/pretrain.varf"]) == 0
    assert main(["train-stage2", *common, "--checkpoint", f"{out}/stage1.varf"]) == 0
    assert main(["probe", *common, "--checkpoint", f"{out}/stage1.varf", "--pairs", "1",
                 "--families", "haze,gaussian_noise"]) == 0
    assert main(["eval", *common, "--checkpoint", f"{out}/stage2.varf", "--manifest", f"{out}/manifest.csv"]) == 0
    assert main(["restore", "--out", f"{out}/restored", "--checkpoint", f"{out}/stage2.varf",
                 f"{out}/degraded/0000_haze.png"]) == 0
    assert main(["ablate", *common, "--checkpoint", f"{out}/stage1.varf", "--steps", "2"]) == 0
    for name in ("pretrain_vq_loss.csv", "pretrain_vq_loss.png", "pretrain_var_loss.csv", "stage1_loss.csv",
                 "stage1_loss.png", "stage2_loss.csv", "probe_grid.png", "gap_report.csv", "gap_report.png",
                 "pca_haze.png", "metrics.csv", "metrics.png", "ablation.csv", "ablation_loss.png",
                 "probe/manifest.csv", "restored/0000_haze.png"):
        assert os.path.isfile(os.path.join(out, name)), name
    with open(os.path.join(out, "stage1_loss.csv")) as fh:
        assert next(csv.reader(fh)) == ["step", "loss", "lr"]
    with open(os.path.join(out, "ablation.csv")) as fh:
        assert [r["row"] for r in csv.DictReader(fh)] == ["a", "d", "e", "f"]


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert main(["pretrain-vq", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "nonsense" in capsys.readouterr().err
    assert main(["train-stage1", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.varf")]) == 2
    assert main(["eval", "--out", str(tmp_path), "--manifest", str(tmp_path / "none.csv")]) == 2
