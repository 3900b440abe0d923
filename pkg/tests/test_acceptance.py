"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (shown in the terminal summary) before
asserting.  The training criteria share one default-budget pre-training run
and cache every adaptation run, so the whole module takes roughly 40 minutes
on one CPU core.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from helpers import analytic_grads, numeric_grad, scalar, three_layer_problem

from loralign import checkpoint, cli, linalg
from loralign.align import AlignConfig, alignment_scores, build_reference_frames, flip_threshold_cosine, mean_align_loss, sign_correct
from loralign.autodiff import Tape
from loralign.lora import PlacementSpec, inject_adapters, select_targets
from loralign.model import ToyRestorer
from loralign.tasks import KINDS, make_batch
from loralign.trainer import TrainConfig, Trainer, adapt, pretrain

SEEDS = (0, 1, 2)
NOVEL = "raindrop"

_pretrains: dict[str, tuple] = {}
_adapts: dict[tuple, tuple] = {}


@pytest.fixture(scope="module")
def base(pretrained):
    _pretrains[NOVEL] = pretrained
    return pretrained


def pretrained_for(novel):
    if novel not in _pretrains:
        model, report = pretrain(tuple(k for k in KINDS if k != novel), TrainConfig(mode="pretrain", seed=0))
        _pretrains[novel] = (model.state_dict(), report)
    return _pretrains[novel]


def adapt_run(mode, seed=0, novel=NOVEL, rank=4, k=16):
    key = (mode, seed, novel, rank, k)
    if key not in _adapts:
        state, _ = pretrained_for(novel)
        pre = tuple(t for t in KINDS if t != novel)
        cfg = TrainConfig(mode=mode, seed=seed, rank=rank, align=AlignConfig(k=k))
        _adapts[key] = adapt(state, pre, novel, cfg)
    return _adapts[key]


def fmt(x):
    return f"{x:.2f}"


# --------------------------------------------------------------------------


def test_criterion_1_svd_property_suite(acceptance_log):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_orth = worst_rec = 0.0
    ordered = True
    for _ in range(500):
        m, n = rng.integers(1, 17, size=2)
        w = rng.normal(size=(m, n)) * 10.0 ** rng.uniform(-3, 3)
        s = linalg.svd(w)
        p = min(m, n)
        worst_orth = max(
            worst_orth, np.linalg.norm(s.U.T @ s.U - np.eye(p)), np.linalg.norm(s.V.T @ s.V - np.eye(p))
        )
        worst_rec = max(worst_rec, np.linalg.norm(s.U @ np.diag(s.sigma) @ s.V.T - w) / np.linalg.norm(w))
        ordered &= bool(np.all(np.diff(s.sigma) <= 0) and np.all(s.sigma >= 0))
    dt = time.perf_counter() - t0
    ok = worst_orth <= 2e-10 and worst_rec <= 1e-9 and ordered and dt < 10
    acceptance_log(1, ok, f"orth {worst_orth:.1e} (<=2e-10), recon {worst_rec:.1e} (<=1e-9), ordered {ordered}, {dt:.1f}s (<10s)")
    assert ok


def test_criterion_2_train_loss_gradcheck(acceptance_log):
    t0 = time.perf_counter()
    worst = 0.0
    ok = True
    for seed in range(3):
        build, params = three_layer_problem(np.random.default_rng(seed))
        for p, g in zip(params, analytic_grads(build, params)):
            num = numeric_grad(scalar(build), p, h=1e-5)
            err = np.abs(g - num)
            ok &= bool(np.all(err <= 1e-8 + 1e-5 * np.abs(num)))
            worst = max(worst, float(np.max(err / (1e-8 + 1e-5 * np.abs(num)))))
    dt = time.perf_counter() - t0
    ok &= dt < 60
    acceptance_log(2, ok, f"worst error / tolerance {worst:.1e} (<=1) over 3 models, {dt:.1f}s (<60s)")
    assert ok


def test_criterion_3_sign_correction_suite(acceptance_log):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    checks = {}

    def unit(m, k):
        x = rng.normal(size=(m, k))
        return x / np.linalg.norm(x, axis=0)

    U, V = unit(8, 5), unit(6, 5)
    checks["no-flip"] = not sign_correct(U, V, U, V, 7.0)[2].any()
    Uc, Vc, mask = sign_correct(U, V, -U, -V, 7.0)
    checks["exact-flip"] = bool(mask.all() and np.array_equal(Uc, U) and np.array_equal(Vc, V))
    checks["cosine"] = abs(flip_threshold_cosine(7.0) + 0.96) < 1e-15
    agree = True
    for _ in range(1000):
        a = unit(5, 1)
        b = -a + rng.uniform(0, 0.6) * unit(5, 1)
        b /= np.linalg.norm(b)
        cos = float(a[:, 0] @ b[:, 0])
        if abs(cos + 0.96) > 1e-12:
            agree &= bool(sign_correct(a, a, b, b, 7.0)[2][0] == (cos < -0.96))
    checks["threshold-equivalence"] = agree
    idem = paired = True
    for _ in range(200):
        Ur, Vr = unit(7, 4), unit(5, 4)
        Un = np.where(rng.random(4) < 0.5, -1.0, 1.0) * (Ur + 0.1 * rng.normal(size=(7, 4)))
        Un /= np.linalg.norm(Un, axis=0)
        Vn = unit(5, 4)
        Uc, Vc, mask = sign_correct(Ur, Vr, Un, Vn, 7.0)
        sgn = np.where(mask, -1.0, 1.0)
        paired &= bool(np.array_equal(Uc, Un * sgn) and np.array_equal(Vc, Vn * sgn))
        idem &= not sign_correct(Ur, Vr, Uc, Vc, 7.0)[2].any()
        idem &= bool(np.all(np.diagonal(alignment_scores(Uc, Vc, Ur, Vr)[0]) >= -0.96 - 1e-6))
    checks["idempotence"], checks["paired"] = idem, paired
    dt = time.perf_counter() - t0
    ok = all(checks.values()) and dt < 5
    failed = [k for k, v in checks.items() if not v]
    acceptance_log(3, ok, f"{len(checks) - len(failed)}/{len(checks)} checks exact{' (failed: ' + ', '.join(failed) + ')' if failed else ''}, {dt:.2f}s (<5s)")
    assert ok


def test_criterion_4_identity_and_reduction_laws(base, acceptance_log):
    state, _ = base
    model = ToyRestorer()
    model.load_state_dict(state)
    inject_adapters(model, select_targets(model, PlacementSpec()), 4, 0)
    frames = build_reference_frames(model, 16)
    zero_align = mean_align_loss(Tape(), model, frames, 16, 7.0).value.item()

    batches = [make_batch(NOVEL, range(8 * i, 8 * i + 8)) for i in range(10)]
    trajectories = []
    for mode in ("lora", "lora-a"):
        m = ToyRestorer()
        m.load_state_dict(state)
        inject_adapters(m, select_targets(m, PlacementSpec()), 4, 0)
        cfg = TrainConfig(mode=mode, align=AlignConfig(w_align=0.0))
        tr = Trainer(m, cfg, build_reference_frames(m, 16) if mode == "lora-a" else None)
        snaps = []
        for step in range(100):
            tr.train_step(*batches[step % len(batches)])
            snaps.append(np.concatenate([p.value.ravel() for p in m.trainable_parameters()]))
        trajectories.append(snaps)
    identical = all(np.array_equal(a, b) for a, b in zip(*trajectories))

    frozen = True
    for mode in ("lora", "lora-a"):
        adapted, _ = adapt_run(mode, 0)
        params = adapted.named_parameters()
        frozen &= all(np.array_equal(params[name].value, ref) for name, ref in state.items())

    ok = zero_align <= 1e-9 and identical and frozen
    acceptance_log(
        4, ok, f"B=0 align {zero_align:.1e} (<=1e-9), lora-a(w=0) == lora for 100 steps: {identical}, frozen weights bit-identical: {frozen}"
    )
    assert ok


def test_criterion_5_forgetting(base, acceptance_log):
    _, pre_report = base
    parts, ok = [], True
    runtime = pre_report.wall_clock
    for seed in SEEDS:
        runs = {mode: adapt_run(mode, seed)[1] for mode in ("finetune-full", "lora", "lora-a")}
        runtime += sum(r.wall_clock for r in runs.values())
        lora, la = runs["lora"], runs["lora-a"]
        pre_novel, pre_mean = lora.psnr("before", NOVEL), lora.mean_pre_psnr("before")
        a = lora.psnr("after", NOVEL) - pre_novel >= 2.0
        b = pre_mean - lora.mean_pre_psnr("after") >= 0.5
        c = la.mean_pre_psnr("after") >= lora.mean_pre_psnr("after") + 0.3
        d = la.psnr("after", NOVEL) >= lora.psnr("after", NOVEL) - 1.0
        ok &= a and b and c and d
        parts.append(
            f"seed {seed}: novel {fmt(pre_novel)}->lora {fmt(lora.psnr('after', NOVEL))}/lora-a {fmt(la.psnr('after', NOVEL))}"
            f"/full {fmt(runs['finetune-full'].psnr('after', NOVEL))}, pre-mean {fmt(pre_mean)}->lora {fmt(lora.mean_pre_psnr())}"
            f"/lora-a {fmt(la.mean_pre_psnr())}/full {fmt(runs['finetune-full'].mean_pre_psnr())} [a={a} b={b} c={c} d={d}]"
        )
    ok &= runtime <= 15 * 60
    acceptance_log(5, ok, f"runtime {runtime / 60:.1f} min (<=15); " + "; ".join(parts))
    assert ok


def test_criterion_6_task_independence(base, acceptance_log):
    parts, ok = [], True
    for novel in KINDS:
        rep = adapt_run("lora", 0, novel=novel)[1]
        gain = rep.psnr("after", novel) - rep.psnr("before", novel)
        ok &= gain >= 2.0
        parts.append(f"{novel} +{gain:.2f} dB")
    acceptance_log(6, ok, "LoRA novel-task gain (>=2 dB): " + ", ".join(parts))
    assert ok


def test_criterion_7_rank_trend(base, acceptance_log):
    reps = {r: adapt_run("lora", 0, rank=r)[1] for r in (2, 32)}
    reg = ToyRestorer().layer_registry()
    counts_ok = all(reps[r].trainable_params == sum(r * (e.m + e.n) for e in reg) for r in reps)
    p2, p32 = reps[2].psnr("after", NOVEL), reps[32].psnr("after", NOVEL)
    ok = p32 >= p2 - 0.1 and counts_ok
    acceptance_log(
        7, ok, f"novel PSNR r=2 {fmt(p2)}, r=32 {fmt(p32)} (r=32 >= r=2 - 0.1); counts {reps[2].trainable_params}/{reps[32].trainable_params} exact: {counts_ok}"
    )
    assert ok


def test_criterion_8_k_trend(base, acceptance_log):
    ks = (2, 8, 32)
    pre = {k: np.mean([adapt_run("lora-a", s, k=k)[1].mean_pre_psnr() for s in SEEDS]) for k in ks}
    nov = {k: np.mean([adapt_run("lora-a", s, k=k)[1].psnr("after", NOVEL) for s in SEEDS]) for k in ks}
    monotone = all(pre[a] <= pre[b] for a, b in zip(ks, ks[1:]))
    ok = monotone and nov[32] <= nov[2] + 0.2
    acceptance_log(
        8,
        ok,
        "mean pre-task PSNR over 3 seeds "
        + ", ".join(f"k={k} {fmt(pre[k])}" for k in ks)
        + f" (non-decreasing); novel k=2 {fmt(nov[2])}, k=32 {fmt(nov[32])} (k=32 <= k=2 + 0.2)",
    )
    assert ok


def test_criterion_9_roundtrip_and_cli_determinism(base, tmp_path, acceptance_log, capsys):
    adapted, _ = adapt_run("lora-a", 0)
    t0 = time.perf_counter()
    checkpoint.save_checkpoint(adapted, tmp_path / "a.laln")
    back = checkpoint.load_checkpoint(tmp_path / "a.laln")
    roundtrip = all(
        p.value.tobytes() == back.named_parameters()[name].value.tobytes() for name, p in adapted.named_parameters().items()
    )
    fast = ["--steps", "2", "--batch", "2", "--pool", "4", "--eval-every", "0"]
    outs = []
    for i in range(2):
        assert cli.main(["pretrain", "--out", str(tmp_path / f"run{i}")] + fast) == 0
        outs.append(((tmp_path / f"run{i}" / "report.csv").read_bytes(), (tmp_path / f"run{i}" / "model.laln").read_bytes()))
    capsys.readouterr()
    deterministic = outs[0] == outs[1]
    golden = Path(__file__).parent / "golden" / "help_adapt.txt"
    help_out = subprocess.run(
        [sys.executable, "-m", "loralign", "adapt", "--help"], capture_output=True, text=True, env=dict(os.environ, COLUMNS="200")
    ).stdout
    golden_ok = help_out == golden.read_text()
    dt = time.perf_counter() - t0
    ok = roundtrip and deterministic and golden_ok and dt < 10
    acceptance_log(9, ok, f"checkpoint bit-exact: {roundtrip}, CLI CSV+checkpoint deterministic: {deterministic}, help golden: {golden_ok}, {dt:.1f}s (<10s)")
    assert ok
