"""Acceptance criteria 1-12, each at its stated tolerance.

Each test records one ``criterion N PASS|FAIL: ...`` line; the lines are
printed together in the terminal summary.
"""
import json
import math
import random
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from sslchange._utils import module_checksum
from sslchange.adapter import AdapterTrainConfig, freeze, train_adapter
from sslchange.data import SynthSceneConfig, dilution_count, load_manifest, load_pairs, synth_generate
from sslchange.encoder import ClipSpec, ResUNetEncoder, clip_encoder
from sslchange.finetune import ChangeDetectionNet, FinetuneConfig, Fusion, FusionSpec, finetune
from sslchange.head import (CODE_DIM, ContrastiveCodes, HierarchicalContrastiveHead, channel_loss,
                            neg_cos, spatial_loss, total_loss)
from sslchange.metrics import ConfusionCounts, accumulate, compute_metrics
from sslchange.pipeline import RunConfig, run_pipeline
from sslchange.pretrain import PretrainConfig, pretrain

pytestmark = pytest.mark.acceptance

# 32px canvases keep the behavioural criteria inside their CPU budgets.
CANVAS = 32
COLLAPSE_LR = 0.3
SPREAD_FLOOR = 0.25 / math.sqrt(CODE_DIM)
COLLAPSE_CEIL = 0.05 / math.sqrt(CODE_DIM)


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def synth200(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth200")
    synth_generate(SynthSceneConfig(canvas_size=CANVAS, seed=0), root)
    return root


@pytest.fixture(scope="module")
def images200(synth200):
    return {s: load_pairs(load_manifest(synth200, s)) for s in ("train", "val", "test")}


@pytest.fixture(scope="module")
def adapter_run(images200):
    """20-epoch adapter on train+val; the test T1 images are the held-out probe."""
    t1 = torch.cat([images200[s][0] for s in ("train", "val")])
    t2 = torch.cat([images200[s][1] for s in ("train", "val")])
    probe = images200["test"][0]
    start = time.time()
    bundle = train_adapter(t1, t2, AdapterTrainConfig(epochs=20, seed=0), probe=probe)
    return freeze(bundle), time.time() - start


def test_criterion_01_dilution_counts():
    start = time.time()
    expected = {445: (45, 89, 223), 128: (13, 26, 64), 10000: (1000, 2000, 5000), 3000: (300, 600, 1500)}
    got = {n: tuple(dilution_count(n, r) for r in (0.1, 0.2, 0.5)) for n in expected}
    elapsed = time.time() - start
    record(1, got == expected and elapsed < 1, f"counts {got}, {elapsed:.3f}s")


def test_criterion_02_metric_oracle():
    start = time.time()
    rng = np.random.default_rng(2)
    worst, counts = 0.0, ConfusionCounts()
    exact = True
    total = [0, 0, 0, 0]
    for _ in range(1000):
        pred = rng.random((32, 32)) < rng.random()
        gt = rng.random((32, 32)) < rng.random()
        c = accumulate(pred, gt)
        tp = fp = fn = tn = 0
        for i in range(32):
            for j in range(32):
                p, g = bool(pred[i, j]), bool(gt[i, j])
                tp += p and g
                fp += p and not g
                fn += g and not p
                tn += not p and not g
        exact &= (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        m = compute_metrics(c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
        worst = max(worst, *(abs(a - b) for a, b in zip(m, (prec, rec, f1, iou))))
        counts = counts + c
        total = [a + b for a, b in zip(total, (tp, fp, fn, tn))]
    exact &= counts.as_dict() == dict(zip(("tp", "fp", "fn", "tn"), total))
    elapsed = time.time() - start
    record(2, exact and worst <= 1e-12 and elapsed < 10,
           f"counts exact={exact}, max metric diff {worst:.1e}, {elapsed:.1f}s")


def test_criterion_03_f1_iou_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10000):
        tp, fp, fn, tn = (int(v) for v in rng.integers(1, 10**6, size=4))
        m = compute_metrics(ConfusionCounts(tp, fp, fn, tn))
        worst = max(worst, abs(m.f1 - 2 * m.iou / (1 + m.iou)))
    record(3, worst <= 1e-12, f"max |F1 - 2IoU/(1+IoU)| = {worst:.1e}")


def _fd_grad(f, x, h=1e-4):
    g = torch.zeros_like(x)
    for i in range(x.numel()):
        e = torch.zeros_like(x)
        e.view(-1)[i] = h
        g.view(-1)[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_criterion_04_neg_cos_gradcheck():
    gen = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(100):
        p = torch.randn(8, dtype=torch.float64, generator=gen)
        z = torch.randn(8, dtype=torch.float64, generator=gen)
        for wrt in ("p", "z"):
            if wrt == "p":
                f = lambda v: neg_cos(v, z).item()  # noqa: E731
                x = p.clone().requires_grad_()
                neg_cos(x, z).backward()
                base = p
            else:
                f = lambda v: neg_cos(p, v, stop_grad=False).item()  # noqa: E731
                x = z.clone().requires_grad_()
                neg_cos(p, x, stop_grad=False).backward()
                base = z
            fd = _fd_grad(f, base)
            rel = (x.grad - fd).norm() / max(x.grad.norm(), fd.norm())
            worst = max(worst, rel.item())
    record(4, worst < 1e-4, f"max relative error {worst:.2e} over 100 pairs")


def _random_codes(gen, n=2, c=4, hw=3, d=16, leaf=True):
    m = lambda: torch.randn(n, c, hw, hw, generator=gen, requires_grad=leaf)  # noqa: E731
    v = lambda: torch.randn(n, d, generator=gen, requires_grad=leaf)  # noqa: E731
    return ContrastiveCodes(m(), m(), m(), m(), v(), v(), v(), v())


def test_criterion_05_stop_gradient_contract():
    gen = torch.Generator().manual_seed(5)
    ok = True
    for trial in range(20):
        codes = _random_codes(gen)
        loss = total_loss(spatial_loss(codes), channel_loss(codes), alpha=0.5).total
        names = ("z1", "z1_prime", "z2", "z2_prime", "p1", "p1_prime", "p2", "p2_prime")
        grads = torch.autograd.grad(loss, [getattr(codes, k) for k in names], allow_unused=True)
        g = dict(zip(names, grads))
        z_zero = all(g[k] is None or torch.count_nonzero(g[k]) == 0 for k in names[:4])
        p_nonzero = any(g[k] is not None and torch.count_nonzero(g[k]) > 0 for k in names[4:])
        ok &= z_zero and p_nonzero
    record(5, ok, "z-side gradients exactly zero, p-side nonzero, 20 random code sets")


def test_criterion_06_loss_bounds_and_symmetry():
    gen = torch.Generator().manual_seed(6)
    lo, hi, asym = math.inf, -math.inf, 0.0
    for _ in range(1000):
        codes = _random_codes(gen, leaf=False)
        spa, cha = spatial_loss(codes), channel_loss(codes)
        lo, hi = min(lo, spa.item(), cha.item()), max(hi, spa.item(), cha.item())
        sw = codes.swapped()
        a = total_loss(spa, cha).total
        b = total_loss(spatial_loss(sw), channel_loss(sw)).total
        asym = max(asym, abs(a - b).item())
    ok = lo >= -1 - 1e-6 and hi <= 1 + 1e-6 and asym <= 1e-6
    record(6, ok, f"losses in [{lo:.4f}, {hi:.4f}], max swap difference {asym:.1e}")


def test_criterion_07_shape_contracts():
    torch.manual_seed(7)
    enc = ResUNetEncoder().eval()
    head = HierarchicalContrastiveHead(enc.out_channels).eval()
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        f = enc(x)
        z1, p1 = head.spatial_project_predict(f)
        z2, p2 = head.channel_project_predict(f)
        clipped = clip_encoder(enc, ClipSpec(3))
        net = ChangeDetectionNet(64, clipped, "concatenate")
        fused = net.embed(x)
        y = net(x, x)
    fusion = Fusion(FusionSpec("concatenate"), 3, net.align.out_channels)
    checks = {
        "fused == input size": f.shape[-2:] == x.shape[-2:],
        "spatial branch size-preserving": z1.shape == p1.shape == f.shape,
        "channel codes 2048-d": z2.shape == p2.shape == (2, 2048),
        "concat channels 3+C_a": fusion.out_channels == fused.shape[1] == 3 + net.align.out_channels,
        "change map at input size": y.shape == (2, 1, 64, 64),
    }
    failed = [k for k, v in checks.items() if not v]
    record(7, not failed, "all shape checks hold" if not failed else f"failed: {failed}")


def test_criterion_08_collapse_pair(images200):
    # augmentation views make the pair independent of how well the adapter trained
    t1 = torch.cat([images200[s][0] for s in ("train", "val", "test")])
    start = time.time()
    stds = {}
    for sg in (True, False):
        cfg = PretrainConfig(epochs=20, lr=COLLAPSE_LR, seed=0, stop_gradient=sg,
                             disable_adapter=True)
        _, report = pretrain(t1, None, cfg)
        stds[sg] = report.code_std
    elapsed = time.time() - start
    keeps = min(stds[True]) > SPREAD_FLOOR
    drops = stds[False][-1] < COLLAPSE_CEIL
    record(8, keeps and drops and elapsed < 600,
           f"with stop-grad min std {min(stds[True]):.5f} > {SPREAD_FLOOR:.5f}; "
           f"without final std {stds[False][-1]:.5f} < {COLLAPSE_CEIL:.5f}; {elapsed:.0f}s")


def test_criterion_09_adapter_cycle_drop(adapter_run):
    bundle, elapsed = adapter_run
    first, last = bundle.log[0]["probe_cycle_l1"], bundle.log[19]["probe_cycle_l1"]
    drop = 1 - last / first
    record(9, drop >= 0.30 and elapsed < 600,
           f"probe cycle L1 {first:.4f} -> {last:.4f} ({100 * drop:.1f}% drop), {elapsed:.0f}s")


def _e2e_config(root, out_dir, seed, **overrides):
    raw = {"out_dir": str(out_dir), "seed": seed,
           "data": {"root": str(root), "dilution_ratio": 0.2},
           "adapter": {"epochs": 20}, "pretrain": {"epochs": 20}, "finetune": {"epochs": 30}}
    cfg = RunConfig.from_dict(raw)
    return cfg.replace(**overrides) if overrides else cfg


def test_criterion_10_non_inferiority(synth200, tmp_path):
    start = time.time()
    wins, rows = 0, []
    for seed in (0, 1, 2):
        f1 = {}
        for arm, extra in (("ssl", {}), ("base", {"finetune.use_pretrained": False})):
            run = run_pipeline(_e2e_config(synth200, tmp_path / f"{arm}{seed}", seed, **extra))
            f1[arm] = json.loads((run / "finetune" / "stage.json").read_text())["best_val_f1"]
        wins += f1["ssl"] >= f1["base"] - 0.01
        rows.append(f"seed {seed}: {f1['ssl']:.4f} vs {f1['base']:.4f}")
    elapsed = time.time() - start
    record(10, wins >= 2 and elapsed < 45 * 60,
           f"{wins}/3 seeds non-inferior ({'; '.join(rows)}), {elapsed / 60:.1f} min")


def test_criterion_11_frozen_contracts(images200, adapter_run):
    adapter, _ = adapter_run
    t1, t2, gt = images200["val"]
    before_adapter = module_checksum(adapter.g1) + module_checksum(adapter.g2)
    model, _ = pretrain(t1, adapter, PretrainConfig(epochs=1, seed=0))
    after_adapter = module_checksum(adapter.g1) + module_checksum(adapter.g2)
    clipped = clip_encoder(model.encoder)
    before_clip = module_checksum(clipped)
    finetune((t1[:16], t2[:16], gt[:16]), (t1[16:], t2[16:], gt[16:]), clipped,
             FinetuneConfig(epochs=2, seed=0))
    after_clip = module_checksum(clipped)
    ok = before_adapter == after_adapter and before_clip == after_clip
    record(11, ok, f"adapter checksum unchanged={before_adapter == after_adapter}, "
                   f"clipped encoder checksum unchanged={before_clip == after_clip}")


def test_criterion_12_determinism(synth200, tmp_path):
    small = {"adapter.epochs": 2, "pretrain.epochs": 2, "finetune.epochs": 3}
    results = []
    for rep in ("a", "b"):
        run = run_pipeline(_e2e_config(synth200, tmp_path / rep, 11, **small))
        results.append(json.loads((run / "evaluate" / "metrics.json").read_text()))
    keys = ("precision", "recall", "f1", "iou")
    diff = max(abs(results[0][k] - results[1][k]) for k in keys)
    record(12, diff <= 1e-6, f"max metric difference between identical runs {diff:.1e} ({results[0]['f1']:.4f} F1)")
