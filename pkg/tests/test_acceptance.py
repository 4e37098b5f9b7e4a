"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected by the ``acceptance_report`` fixture and printed in
the pytest terminal summary under "acceptance criteria".
"""

import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from morse import iar, smoe
from morse import kernel_lab as kl
from morse.autograd import Tensor, grad_check, ops
from morse.config import load_config
from morse.data import make_benchmark
from morse.iar import PositionalEncoder, RenderingHead
from morse.metrics import compute_metrics
from morse.model import build_model
from morse.trainer import Streams, awa_lambda, evaluate, train, train_step
from oracles import metrics_oracle, random_mask_pair

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
SEEDS = (0, 1, 2)
N_CONFIGS = 20


# ----------------------------------------------------------------------
# 1. gradient fidelity
# ----------------------------------------------------------------------


def _jitter(module, rng):
    # random parameters: zero-initialised biases can park ReLUs exactly on the kink
    for p in module.parameters():
        p.data = (p.data + rng.normal(0.0, 0.1, p.shape)).astype(p.dtype)
    return module


def _leaf(rng, shape, dtype):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)


def _case_conv(rng, dtype):
    B, C, O = rng.integers(1, 3), rng.integers(1, 6), rng.integers(1, 6)
    H, W = rng.integers(2, 7, 2)
    k = int(rng.choice([1, 3, 5]))
    x, w, b = _leaf(rng, (B, C, H, W), dtype), _leaf(rng, (O, C, k, k), dtype), _leaf(rng, (O,), dtype)
    proj = rng.standard_normal((B, O, H, W))
    return lambda: ops.sum(ops.mul(ops.conv2d(x, w, b), proj)), [x, w, b]


def _case_upsample(rng, dtype):
    C, h, w = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
    H, W = h + rng.integers(0, 9), w + rng.integers(0, 9)
    x = _leaf(rng, (1, C, h, w), dtype)
    proj = rng.standard_normal((1, C, H, W))
    return lambda: ops.sum(ops.mul(ops.bilinear_upsample(x, H, W), proj)), [x]


def _case_point_sample(rng, dtype):
    C, H, W, P = rng.integers(1, 5), rng.integers(2, 8), rng.integers(2, 8), rng.integers(1, 12)
    f = _leaf(rng, (C, H, W), dtype)
    pts = np.stack([rng.uniform(0, W - 1, P), rng.uniform(0, H - 1, P)], axis=1)
    proj = rng.standard_normal((C, P))
    return lambda: ops.sum(ops.mul(ops.point_sample(f, pts), proj)), [f]


def _case_softmax(rng, dtype):
    B, N, S = rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 6)
    x = _leaf(rng, (B, N, S), dtype)
    mask = rng.random((B, N, 1)) < 0.6
    mask[np.arange(B), rng.integers(0, N, B)] = True
    proj = rng.standard_normal((B, N, S))
    return lambda: ops.sum(ops.mul(ops.softmax(x, axis=1, mask=mask), proj)), [x]


def _case_pe(rng, dtype):
    L, H, W, P = rng.integers(1, 9), rng.integers(2, 20), rng.integers(2, 20), rng.integers(1, 12)
    pe = PositionalEncoder(L, float(rng.uniform(0.5, 3.0)), int(rng.integers(1000))).astype(dtype)
    _jitter(pe, rng)
    pts = np.stack([rng.integers(0, W, P), rng.integers(0, H, P)], axis=1)
    proj = rng.standard_normal((2 * L, P))
    return lambda: ops.sum(ops.mul(iar.encode_positions(pe, pts, H, W), proj)), pe.parameters()


def _smoe_inputs(rng, dtype):
    N, D = rng.integers(2, 5), rng.integers(1, 4)
    B, H, W = rng.integers(1, 3), rng.integers(2, 5), rng.integers(2, 5)
    m = smoe.SMoE(N, D, (int(rng.integers(2, 5)),), (int(rng.integers(2, 6)),), int(rng.integers(1000))).astype(dtype)
    _jitter(m, rng)
    feats = [_leaf(rng, (B, D, H, W), dtype) for _ in range(N)]
    mask = smoe.sample_batch_mask(N, B, 0.5, rng)
    return m, feats, mask


def _case_gating(rng, dtype):
    m, feats, mask = _smoe_inputs(rng, dtype)
    proj = rng.standard_normal((feats[0].shape[0], m.n_experts) + feats[0].shape[2:])
    leaves = feats + [p for conv in m.gate for p in conv.parameters()]
    return lambda: ops.sum(ops.mul(smoe.gate_weights(m, feats, mask).W, proj)), leaves


def _case_fusion(rng, dtype):
    m, feats, mask = _smoe_inputs(rng, dtype)
    proj = rng.standard_normal(feats[0].shape)
    return lambda: ops.sum(ops.mul(m(feats, mask)[0], proj)), feats + m.parameters()


def _case_render(rng, dtype):
    L, C, K, P = rng.integers(1, 5), rng.integers(1, 5), rng.integers(2, 5), rng.integers(1, 10)
    head = RenderingHead(2 * L + C, K, (int(rng.integers(2, 7)), int(rng.integers(2, 7))), int(rng.integers(1000)))
    _jitter(head.astype(dtype), rng)
    pe_feats, point_feats = _leaf(rng, (2 * L, P), dtype), _leaf(rng, (C, P), dtype)
    labels = rng.integers(0, K, P)
    fn = lambda: iar.render_loss(iar.render_points(head, pe_feats, point_feats), labels)  # noqa: E731
    return fn, [pe_feats, point_feats] + head.parameters()


GRAD_CASES = {
    "conv": _case_conv,
    "upsample": _case_upsample,
    "point_sample": _case_point_sample,
    "softmax": _case_softmax,
    "pe": _case_pe,
    "gating": _case_gating,
    "fusion_mlp": _case_fusion,
    "rendering_head": _case_render,
}


def test_criterion_01_gradient_fidelity(acceptance_report):
    start = time.perf_counter()
    worst, failures = {}, []
    for name, make in GRAD_CASES.items():
        for d, (dtype, tol) in enumerate(((np.float64, 1e-6), (np.float32, 1e-3))):
            rng = np.random.default_rng([zlib.crc32(name.encode()), d])
            errs = []
            for i in range(N_CONFIGS):
                fn, leaves = make(rng, dtype)
                r = grad_check(fn, leaves, tol=tol, n_samples=6, rng=rng)
                errs.append(r.max_rel_err)
                if not r.passed:
                    failures.append(f"{name}/{np.dtype(dtype).name}#{i}: {r.max_rel_err:.2e} at {r.worst}")
            worst[f"{name}/{np.dtype(dtype).name}"] = max(errs)
    elapsed = time.perf_counter() - start
    f64 = max(v for k, v in worst.items() if k.endswith("float64"))
    f32 = max(v for k, v in worst.items() if k.endswith("float32"))
    ok = not failures and elapsed < 120
    acceptance_report(
        1, ok, f"{len(GRAD_CASES)} ops x {N_CONFIGS} configs, worst f64 {f64:.1e} f32 {f32:.1e}, {elapsed:.0f}s"
    )
    assert not failures, failures
    assert elapsed < 120


# ----------------------------------------------------------------------
# 2. gate normalisation
# ----------------------------------------------------------------------


def test_criterion_02_gate_normalization(acceptance_report):
    rng = np.random.default_rng(2)
    worst_sum, leaked, mismatched = 0.0, 0, 0
    for _ in range(100):
        N, D = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        B, H, W = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        m = smoe.SMoE(N, D, (int(rng.integers(2, 6)),), (4,), int(rng.integers(1000)))
        feats = [Tensor((rng.standard_normal((B, D, H, W)) * 3).astype(np.float32)) for _ in range(N)]
        mask = smoe.sample_batch_mask(N, B, float(rng.uniform(0.1, 0.9)), rng)
        Wt = smoe.gate_weights(m, feats, mask).W.data
        active = mask.active[:, :, None, None]
        worst_sum = max(worst_sum, float(np.abs(Wt.sum(axis=1) - 1).max()))
        leaked += int(np.count_nonzero(np.where(active, 0, Wt)))
        off = smoe.sample_batch_mask(N, B, 0.0, rng)
        mismatched += int(not np.array_equal(m(feats, off)[0].data, m(feats, None)[0].data))
    ok = worst_sum <= 1e-5 and leaked == 0 and mismatched == 0
    acceptance_report(2, ok, f"max |sum-1| {worst_sum:.1e}, inactive nonzero {leaked}, alpha=0 mismatches {mismatched}")
    assert worst_sum <= 1e-5
    assert leaked == 0
    assert mismatched == 0


# ----------------------------------------------------------------------
# 3. point-selection contract
# ----------------------------------------------------------------------


def test_criterion_03_point_selection(acceptance_report):
    n_points, k_p, rho = 2048, 3, 0.75
    problems = []
    for i in range(50):
        H, W = [(128, 128), (64, 96), (100, 80)][i % 3]
        logits = np.random.default_rng(i).standard_normal((3, H, W))
        if i % 5 == 0:
            logits = logits.round(1)  # many exact uncertainty ties
        pts = iar.select_points(logits, n_points, k_p, rho, np.random.default_rng(1000 + i))

        # oracle: same candidate draw, full sort on (-uncertainty, pixel index)
        ref_rng = np.random.default_rng(1000 + i)
        cand = ref_rng.choice(H * W, size=min(k_p * n_points, H * W), replace=False)
        srt = np.sort(logits.reshape(3, -1), axis=0)
        u = srt[-2] - srt[-1]
        ranked = sorted(cand.tolist(), key=lambda j: (-u[j], j))[:1536]

        flat = pts.flat_index(W)
        unc = flat[pts.origin == iar.UNCERTAIN]
        if pts.count != 2048 or len(np.unique(flat)) != 2048:
            problems.append(f"map {i}: {pts.count} points, {len(np.unique(flat))} distinct")
        if (pts.origin == iar.UNIFORM).sum() != 512:
            problems.append(f"map {i}: {(pts.origin == iar.UNIFORM).sum()} uniform points")
        if unc.tolist() != ranked:
            problems.append(f"map {i}: ranked subset differs from the sort oracle")
    acceptance_report(3, not problems, f"50 maps, 1536 ranked + 512 uniform; {len(problems)} problems")
    assert not problems, problems


# ----------------------------------------------------------------------
# 4. AWA schedule
# ----------------------------------------------------------------------


def test_criterion_04_awa_schedule(acceptance_report):
    problems = []
    for T in (2, 7, 100, 2000):
        lam = 0.1
        vals = [awa_lambda(t, T, lam) for t in range(T + 1)]
        if any(v != 0 for t, v in enumerate(vals) if t <= T / 2):
            problems.append(f"T={T}: nonzero weight in the first half")
        if any(b < a for a, b in zip(vals, vals[1:])):
            problems.append(f"T={T}: not monotone")
        if abs(vals[-1] - lam / 2) > 1e-15:
            problems.append(f"T={T}: final weight {vals[-1]}")

    cfg = load_config(DESK).with_updates(
        backbone={"base_channels": 4, "expert_dim": 4},
        model={"mlp_hidden": (8,), "gate_channels": (4,), "head_hidden": (8, 8), "pe_frequencies": 4},
        train={"total_iters": 10, "n_points_train": 32, "lr0": 1e-2},
        scene={"resolution": 32, "n_train": 2, "n_test": 0},
    )
    (tx, ty), _ = make_benchmark(cfg.scene, cfg.scene_seed)
    model = build_model(cfg.backbone, cfg.model, cfg.train_seed)
    streams = Streams.from_seed(cfg.train_seed)
    first_half_delta, second_half_moved = 0.0, False
    for t in range(cfg.train.total_iters):
        before = [p.data.copy() for p in model.render_parameters()]
        train_step(model, (tx[:1], ty[:1]), cfg.train, t, streams)
        delta = max(float(np.abs(p.data - b).max()) for p, b in zip(model.render_parameters(), before))
        if t <= cfg.train.total_iters / 2:
            first_half_delta = max(first_half_delta, delta)
        elif delta > 0:
            second_half_moved = True
    if first_half_delta != 0.0:
        problems.append(f"rendering parameters moved by {first_half_delta} in the first half")
    if not second_half_moved:
        problems.append("rendering parameters never moved in the second half")
    acceptance_report(4, not problems, "; ".join(problems) or "schedule checks and exact-zero render deltas hold")
    assert not problems, problems


# ----------------------------------------------------------------------
# 5. metric oracles
# ----------------------------------------------------------------------


def test_criterion_05_metric_oracles(acceptance_report):
    rng = np.random.default_rng(5)
    mismatches, worst_j = 0, 0.0
    for _ in range(200):
        H, W = rng.integers(1, 65, 2)
        K = int(rng.integers(2, 5))
        pred, gt = random_mask_pair(rng, H, W, K)
        r = compute_metrics(pred, gt, K)
        got = np.stack([r.dsc, r.jaccard, r.hd95, r.asd], axis=1)
        if not np.array_equal(got, metrics_oracle(pred, gt, K)):
            mismatches += 1
        worst_j = max(worst_j, float(np.abs(r.jaccard - r.dsc / (2 - r.dsc)).max()))
    ok = mismatches == 0 and worst_j <= 1e-9
    acceptance_report(5, ok, f"200 pairs, {mismatches} inexact, max |J - D/(2-D)| {worst_j:.1e}")
    assert mismatches == 0
    assert worst_j <= 1e-9


# ----------------------------------------------------------------------
# 6. PE kernel identity
# ----------------------------------------------------------------------


def test_criterion_06_pe_kernel_identity(acceptance_report):
    rng = np.random.default_rng(6)
    pe = PositionalEncoder(128, 1.0, 6)
    x1, x2 = rng.uniform(-1, 1, (1000, 2)), rng.uniform(-1, 1, (1000, 2))
    gap = float(np.abs(kl.pe_kernel(pe, x1, x2) - kl.pe_kernel_cosine(pe, x1, x2)).max())
    shift = rng.uniform(-0.5, 0.5, (1000, 2))
    drift = float(np.abs(kl.pe_kernel(pe, x1 + shift, x2 + shift) - kl.pe_kernel(pe, x1, x2)).max())
    ok = gap <= 1e-10 and drift <= 1e-10
    acceptance_report(6, ok, f"1000 draws, identity gap {gap:.1e}, translation drift {drift:.1e}")
    assert gap <= 1e-10
    assert drift <= 1e-10


# ----------------------------------------------------------------------
# 7. RFF approximation
# ----------------------------------------------------------------------


def test_criterion_07_rff_approximation(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    spec = kl.KernelSpec("gaussian", sigma=0.5, dim=2)
    curve = kl.rff_error_curve(spec, [64, 256, 1024, 4096], 500, rng, reps=20)
    unb = kl.unbiasedness(spec, [0.1, 0.2], [0.3, -0.1], rng)
    elapsed = time.perf_counter() - start
    ok = curve.strictly_decreasing and curve.sqrt_ratio <= 4 and unb.passed and elapsed < 120
    medians = ", ".join(f"{m:.4f}" for m in curve.median)
    acceptance_report(
        7, ok, f"medians {medians}; err*sqrt(L) ratio {curve.sqrt_ratio:.2f}; z {unb.z:+.2f}; {elapsed:.0f}s"
    )
    assert curve.strictly_decreasing
    assert curve.sqrt_ratio <= 4
    assert unb.passed
    assert elapsed < 120


# ----------------------------------------------------------------------
# 8 and 9. end-to-end runs on the desk benchmark
# ----------------------------------------------------------------------


def _run_arm(cfg, data):
    (tx, ty), (vx, vy) = data
    model = build_model(cfg.backbone, cfg.model, cfg.train_seed)
    train(model, tx, ty, cfg)
    return evaluate(model, vx, vy, cfg.train)


@pytest.fixture(scope="session")
def desk_runs():
    """Baseline (no SMoE, no refinement) and full-model runs for every seed."""
    base = load_config(DESK)
    runs = {}
    start = time.perf_counter()
    for seed in SEEDS:
        cfg = base.with_updates(seed=seed)
        data = make_benchmark(cfg.scene, cfg.scene_seed)
        runs[seed] = {
            "baseline": _run_arm(cfg.with_updates(model={"use_smoe": False, "use_iar": False}), data),
            "morse": _run_arm(cfg, data),
        }
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_08_refinement_effect(acceptance_report, desk_runs):
    runs, elapsed = desk_runs
    dsc_wins = hd_wins = 0
    parts = []
    for seed, r in runs.items():
        base, ours = r["baseline"].coarse, r["morse"].refined
        dsc_wins += ours["dsc"] >= base["dsc"]
        hd_wins += ours["hd95"] <= base["hd95"]
        parts.append(f"s{seed} dsc {base['dsc']:.4f}->{ours['dsc']:.4f} hd95 {base['hd95']:.3f}->{ours['hd95']:.3f}")
    ok = dsc_wins == 3 and hd_wins >= 2 and elapsed <= 900
    acceptance_report(8, ok, f"DSC {dsc_wins}/3, HD95 {hd_wins}/3, {elapsed:.0f}s; " + "; ".join(parts))
    assert dsc_wins == 3
    assert hd_wins >= 2
    assert elapsed <= 900


@pytest.mark.slow
def test_criterion_09_awa_beats_constant_weight(acceptance_report, desk_runs):
    runs, _ = desk_runs
    base = load_config(DESK)
    awa, const = [], []
    for seed in SEEDS:
        cfg = base.with_updates(seed=seed, train={"rend_schedule": "constant"})
        result = _run_arm(cfg, make_benchmark(cfg.scene, cfg.scene_seed))
        const.append(result.refined["dsc"])
        awa.append(runs[seed]["morse"].refined["dsc"])
    ok = np.mean(awa) > np.mean(const)
    per_seed = ", ".join(f"{a:.4f} vs {c:.4f}" for a, c in zip(awa, const))
    acceptance_report(9, ok, f"mean refined DSC AWA {np.mean(awa):.4f} vs constant {np.mean(const):.4f} ({per_seed})")
    assert np.mean(awa) > np.mean(const)


# ----------------------------------------------------------------------
# 10. NTK
# ----------------------------------------------------------------------


def test_criterion_10_ntk(acceptance_report):
    rng = np.random.default_rng(10)
    pe = PositionalEncoder(16, 1.0, 10)
    X = kl.normalized_encoding(pe, rng.uniform(-1, 1, (2, 2)))
    diag = np.concatenate([kl.ntk_samples(64, 2, x, x, 8, np.random.default_rng(i)) for i, x in enumerate(X)])
    fwd = kl.ntk_samples(64, 2, X[0], X[1], 8, np.random.default_rng(99))
    bwd = kl.ntk_samples(64, 2, X[1], X[0], 8, np.random.default_rng(99))
    report = kl.shift_invariance_deviation(pe, [64, 256, 1024], rng, n_pairs=50, n_inits=32)
    ok = bool((diag >= 0).all()) and np.array_equal(fwd, bwd) and report.monotone
    spread = ", ".join(f"{w}:{s:.4f}" for w, s in zip(report.widths, report.spread))
    acceptance_report(
        10, ok, f"min diagonal {diag.min():.3f}, symmetric {np.array_equal(fwd, bwd)}, spread {spread}"
    )
    assert (diag >= 0).all()
    assert np.array_equal(fwd, bwd)
    assert report.monotone
