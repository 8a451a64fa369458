"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py``; the verdict lines are printed
straight to the terminal even when output capture is on.  The two benchmark
criteria share one training sweep (about five minutes on a single core).
"""
import filecmp
import math
import time
from decimal import Decimal, getcontext

import numpy as np
import pytest
import torch

from pgfanet import losses as L
from pgfanet import metrics as M
from pgfanet.benchmark import BenchmarkConfig, run_benchmark
from pgfanet.data import SynthConfig, load_dataset, synth_generate
from pgfanet.gradcheck import run_all
from pgfanet.model import ModelConfig
from pgfanet.trainer import (TrainConfig, ema_update, init_state, mean_pixel_dice, poly_lr, rampup_weight,
                             train)
from pgfanet.uncertainty import entropy_uncertainty, rectify_teacher, shape_attention, uncertainty_maps

from . import oracles
from .test_losses import _random_instance_fixture
from .test_metrics import CASES


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")
        assert ok, detail
    return emit


def test_01_gradient_correctness(verdict):
    t0 = time.time()
    results = run_all(seed=0, tol=1e-4)
    elapsed = time.time() - t0
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and worst < 1e-4 and elapsed < 60
    names = ", ".join(r.name for r in results)
    verdict(1, "gradient check", ok, f"{names}; worst rel err {worst:.2e}; {elapsed:.1f}s")


def test_02_loss_oracles(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        probs, inst, labels = _random_instance_fixture(rng)
        got = L.vcc_loss(L.InstanceBatch(probs, inst, labels)).item()
        worst = max(worst, abs(got - oracles.vcc(probs.tolist(), inst.tolist(), labels.tolist())))
    sum_err = 0.0
    for _ in range(20):
        probs, inst, labels = _random_instance_fixture(rng, c=2)
        logits = torch.log(probs)
        total, parts = L.seg_loss(logits, labels, L.InstanceBatch(probs, inst, labels), L.LossWeights())
        sum_err = max(sum_err, abs(parts["ce"] + parts["dice"] + parts["vcc"] - total.item()))
    ok = worst <= 1e-9 and sum_err <= 1e-9
    verdict(2, "loss oracles", ok, f"vcc max |err| {worst:.1e}; breakdown max |err| {sum_err:.1e}")


def test_03_uncertainty_invariants(verdict):
    t0 = time.time()
    g = torch.Generator().manual_seed(0)
    bad = []
    for trial in range(1000):
        c = int(torch.randint(2, 6, (1,), generator=g))
        scale = float(torch.rand(1, generator=g)) * 10
        s = scale * torch.randn(2, c, 4, 4, generator=g, dtype=torch.float64)
        t = scale * torch.randn(2, c, 4, 4, generator=g, dtype=torch.float64)
        maps = uncertainty_maps(s, t)
        u = maps.teacher_entropy
        if u.min() < 0 or u.max() > 1:
            bad.append((trial, "entropy range"))
        if (maps.rectified_teacher.sum(1) - 1).abs().max() > 1e-6:
            bad.append((trial, "rectified rows"))
        w = shape_attention(s, t)
        if w.min() < 1 or w.max() > 2:
            bad.append((trial, "shape weight"))
        q_s, q_t = torch.softmax(s, 1), torch.softmax(t, 1)
        zeros = torch.zeros_like(u)
        if not (torch.equal(rectify_teacher(q_t, q_s, zeros), q_t)
                and torch.equal(rectify_teacher(q_t, q_s, zeros + 1), q_s)):
            bad.append((trial, "rectify identities"))
        onehot = torch.nn.functional.one_hot(torch.randint(0, c, (2, 4, 4), generator=g), c)
        onehot = onehot.permute(0, 3, 1, 2).to(torch.float64)
        uniform = torch.full_like(q_s, 1.0 / c)
        if not (torch.all(entropy_uncertainty(onehot) == 0)
                and torch.allclose(entropy_uncertainty(uniform), torch.ones_like(u), atol=1e-12)):
            bad.append((trial, "entropy endpoints"))
    elapsed = time.time() - t0
    ok = not bad and elapsed < 60
    verdict(3, "uncertainty invariants", ok, f"1000 trials, {len(bad)} violations {bad[:3]}; {elapsed:.1f}s")


def test_04_schedule_exactness(verdict):
    T, k = 300, 0.1
    getcontext().prec = 50
    exact = Decimal("0.1") * Decimal(-5).exp()
    err0 = abs(Decimal(rampup_weight(0, T, k)) - exact)
    grid = [rampup_weight(T * i / 999, T, k) for i in range(1000)]
    monotone = all(b >= a for a, b in zip(grid, grid[1:]))
    ok = (rampup_weight(T, T, k) == k and err0 < Decimal("1e-9") and monotone
          and poly_lr(0, 1000, 2.5e-4) == 2.5e-4 and poly_lr(1000, 1000, 2.5e-4) == 0.0)
    verdict(4, "schedule exactness", ok,
            f"lambda(T)={rampup_weight(T, T, k)}, |lambda(0)-k e^-5|={float(err0):.1e}, monotone={monotone}")


def test_05_ema_contraction(verdict):
    model_cfg = ModelConfig(base_width=4, stage_widths=(4, 4, 8, 8), aspp_rates=(1, 2, 3))
    state = init_state(model_cfg, TrainConfig())
    with torch.no_grad():
        for p in state.teacher.parameters():
            p.add_(torch.randn_like(p))

    def dist():
        return math.sqrt(sum(float(((a.detach().double() - b.detach().double()) ** 2).sum()) for a, b in
                             zip(state.teacher.parameters(), state.student.parameters())))

    d0 = dist()
    for _ in range(50):
        ema_update(state, 0.99)
    ratio = dist() / d0
    rel = abs(ratio / 0.99 ** 50 - 1)
    verdict(5, "EMA contraction", rel < 1e-6, f"ratio {ratio:.9f} vs {0.99 ** 50:.9f} (rel err {rel:.1e})")


def test_06_metric_oracles(verdict):
    t0 = time.time()
    pairs = [
        ("aji", M.aji, oracles.aji),
        ("f1", M.detection_f1, oracles.detection_f1),
        ("object_dice", M.object_dice, oracles.object_dice),
        ("object_haus", lambda g, p: M.object_hausdorff(g, p, 100),
         lambda g, p: oracles.object_hausdorff(g, p, 100)),
        ("hd95", lambda g, p: M.hausdorff95(p > 0, g > 0),
         lambda g, p: oracles.hausdorff95((np.asarray(p) > 0).tolist(), (np.asarray(g) > 0).tolist())),
    ]
    worst = {}
    for name, impl, oracle in pairs:
        worst[name] = max(abs(impl(g, p) - oracle(g.tolist(), p.tolist())) for g, p in CASES)
    elapsed = time.time() - t0
    ok = len(CASES) == 100 and all(v <= 1e-9 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.0e}" for k, v in worst.items())
    verdict(6, "metric oracles", ok, f"100 maps; max |err| {detail}; {elapsed:.1f}s")


def test_07_supervised_overfit(verdict, tmp_path):
    torch.set_num_threads(1)
    samples = list(load_dataset(synth_generate(SynthConfig(num_images=8, image_size=64, seed=3), tmp_path)))
    cfg = TrainConfig(total_epochs=300, batch_labeled=8, batch_unlabeled=0, enable_inter=False,
                      enable_intra=False, enable_shape=False, augment=False, base_lr=1e-3, val_every=0)
    t0 = time.time()
    res = train(ModelConfig(), cfg, samples)
    elapsed = time.time() - t0
    dice = mean_pixel_dice(res.state.student, samples)
    steps = res.state.global_step
    ok = dice >= 0.95 and steps <= 300 and elapsed < 300
    verdict(7, "supervised overfit", ok, f"pixel Dice {dice:.4f} after {steps} steps in {elapsed:.0f}s")


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    torch.set_num_threads(1)
    t0 = time.time()
    results = run_benchmark(BenchmarkConfig(), tmp_path_factory.mktemp("bench"))
    return results, time.time() - t0


def _per_seed(results, name, key):
    return np.array([r[key] for r in results[name]])


def test_08_ssl_benefit(verdict, benchmark):
    results, elapsed = benchmark
    sup_d, ssl_d = _per_seed(results, "supervised", "dice"), _per_seed(results, "full", "dice")
    sup_a, ssl_a = _per_seed(results, "supervised", "aji"), _per_seed(results, "full", "aji")
    wins = int(np.sum((ssl_d > sup_d) & (ssl_a > sup_a)))
    ok = (ssl_d.mean() >= sup_d.mean() + 0.01 and ssl_a.mean() > sup_a.mean() and wins >= 2
          and elapsed < 1800)
    detail = (f"Dice {ssl_d.mean():.4f} vs {sup_d.mean():.4f}, AJI {ssl_a.mean():.4f} vs {sup_a.mean():.4f}, "
              f"{wins}/3 seeds better; sweep {elapsed:.0f}s")
    verdict(8, "semi-supervised benefit", ok, detail)


def test_09_inter_consistency_ablation(verdict, benchmark):
    results, _ = benchmark
    sup_a, mt_a = _per_seed(results, "supervised", "aji"), _per_seed(results, "mt", "aji")
    wins = int(np.sum(mt_a > sup_a))
    ok = mt_a.mean() > sup_a.mean() and wins >= 2
    verdict(9, "inter-consistency ablation", ok,
            f"AJI {mt_a.mean():.4f} vs {sup_a.mean():.4f}, {wins}/3 seeds better")


def test_10_determinism(verdict, tmp_path):
    synth = SynthConfig(num_images=4, image_size=32, instances_per_image=(3, 5), radius_range=(2.5, 4.0), seed=7)
    a, b = synth_generate(synth, tmp_path / "a"), synth_generate(synth, tmp_path / "b")
    cmp = filecmp.dircmp(a, b)
    same_files = all(filecmp.cmp(a / sub / f, b / sub / f, shallow=False)
                     for sub in ("images", "masks") for f in sorted(p.name for p in (a / sub).iterdir()))
    same_data = same_files and not cmp.left_only and not cmp.right_only and filecmp.cmp(
        a / "meta.json", b / "meta.json", shallow=False)
    samples = list(load_dataset(a))
    model_cfg = ModelConfig(base_width=4, stage_widths=(4, 4, 8, 8), aspp_rates=(1, 2, 3))
    cfg = TrainConfig(total_epochs=5, steps_per_epoch=2, base_lr=1e-3, batch_labeled=2, batch_unlabeled=2,
                      patch_size=32, val_every=0)
    runs = [[r.to_dict() for r in train(model_cfg, cfg, samples[:2], samples[2:]).reports] for _ in range(2)]
    same_steps = len(runs[0]) >= 10 and runs[0][:10] == runs[1][:10]
    verdict(10, "determinism", same_data and same_steps,
            f"datasets byte-identical={same_data}, first 10 StepReports identical={same_steps}")

