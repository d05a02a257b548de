"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line through the ``report`` fixture; the
lines are repeated in the pytest terminal summary.
"""
import time

import numpy as np
import pytest

from tokenmix.augment import gen_token_mask, token_exchange, token_swap_back, tokenmix_star_mask
from tokenmix.data import SplitSpec, confusion_matrix, evaluate, make_splits, miou
from tokenmix.experiment import ExperimentConfig, loads_config, run_ablation_grid, run_experiment
from tokenmix.gradsuite import TOLERANCE, run_suite
from tokenmix.model import ModelConfig, SegmenterModel, forward
from tokenmix.tensor import cross_entropy
from tokenmix.trainer import (AugConfig, BranchFlags, SSLTrainer, TrainConfig, pseudo_label,
                              supervised_loss, unsupervised_branch_loss)

SMALL = ModelConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=1, num_heads=2, num_classes=3)

TINY_RUN = """\
model.image_size=16
model.patch_size=4
model.embed_dim=16
model.num_layers=1
model.num_heads=2
model.num_classes=3
data.n_labeled=2
data.n_unlabeled=8
data.n_val=4
data.seed=0
train.seed=0
train.epochs=2
train.burn_in_epochs=0
train.batch_labeled=2
train.batch_unlabeled=4
train.rho=0.3
"""


def _param_bytes(model) -> bytes:
    return b"".join(model.params[k].data.tobytes() for k in sorted(model.params))


# 1 ----------------------------------------------------------------------

def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    results = run_suite(range(20))
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = worst.max_rel_error <= TOLERANCE and elapsed <= 120.0
    report(1, ok, f"{len(results)} checks over 20 seeds, worst {worst.name}/seed {worst.seed} "
                  f"rel err {worst.max_rel_error:.2e} (<= {TOLERANCE:.0e}), {elapsed:.1f}s (<= 120s)")
    assert ok


# 2 ----------------------------------------------------------------------

def test_criterion_2_tokenmix_algebra(report):
    rng = np.random.default_rng(2024)
    failures = []
    for case in range(1000):
        side = int(rng.choice([2, 3, 4, 6, 8]))
        n, d, b = side * side, int(rng.integers(1, 17)), int(rng.integers(1, 4))
        ratio = float(rng.uniform(0, 1))
        if case % 4 == 3 and side % 2 == 0:
            mask = tokenmix_star_mask(side, 2, ratio, rng)
            expected = 4 * int(round(ratio * (side // 2) ** 2))
        else:
            mask = gen_token_mask(n, ratio, rng)
            expected = int(round(ratio * n))
        g_u = rng.standard_normal((b, n, d))
        g_l = rng.standard_normal((b, n, d))
        x_u, x_l = token_exchange(g_u, g_l, mask)
        back_u, back_l = token_exchange(x_u, x_l, mask)
        sel = mask.m.astype(bool)
        checks = {
            "involution": np.array_equal(back_u.data, g_u) and np.array_equal(back_l.data, g_l),
            "ratio": mask.popcount == expected,
            "rows": (np.array_equal(x_u.data[:, sel], g_l[:, sel])
                     and np.array_equal(x_u.data[:, ~sel], g_u[:, ~sel])),
            "sum": np.array_equal(x_u.data + x_l.data, g_u + g_l),
            "swap_back": np.array_equal(token_swap_back(x_u, x_l, mask).data, g_u),
        }
        failures += [(case, name) for name, ok in checks.items() if not ok]
    report(2, not failures, f"1000 randomized (shape, mask) cases, {len(failures)} failures")
    assert not failures, failures[:10]


# 3 ----------------------------------------------------------------------

def test_criterion_3a_rho_one_equals_supervised_only(report):
    lab, unl, _ = make_splits(SplitSpec(4, 16, 4, seed=3))
    steps = 100
    base = dict(epochs=25, burn_in_epochs=0, seed=5)
    full = SSLTrainer(ModelConfig(), TrainConfig(rho=1.0, **base), AugConfig(), total_iters=steps)
    sup = SSLTrainer(ModelConfig(), TrainConfig(sup_only=True, **base), AugConfig(), total_iters=steps)
    mismatches = []
    while full.step < steps:
        for (lf, uf), (ls, us) in zip(full.epoch_batches(lab, unl), sup.epoch_batches(lab, unl)):
            a, b = full.train_step(lf, uf), sup.train_step(ls, us)
            if a.l_sup != b.l_sup or _param_bytes(full.student) != _param_bytes(sup.student):
                mismatches.append(a.step)
    ok = not mismatches and full.step == steps
    report(3, ok, f"(a) rho=1 vs sup_only over {steps} steps: {len(mismatches)} non-identical steps")
    assert ok


def test_criterion_3b_unsupervised_loss_reduces_to_cross_entropy(report):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        student = SegmenterModel.init(ModelConfig(), rng)
        teacher = SegmenterModel.init(ModelConfig(), rng)
        weak = rng.random((4, 32, 32, 3))
        y, conf = pseudo_label(teacher, weak)
        aug = AugConfig(strong=False, dropout_rate=0.0)
        loss = unsupervised_branch_loss(student, weak, (y, conf), 0.0, BranchFlags(False, True),
                                        np.random.default_rng(seed), None, aug)
        plain = cross_entropy(forward(weak, student).reshape(-1, 4), y.reshape(-1))
        worst = max(worst, abs(loss.item() - plain.item()))
    ok = worst <= 1e-9
    report(3, ok, f"(b) unsupervised loss vs plain cross-entropy, max |diff| {worst:.1e} (<= 1e-9)")
    assert ok


# 4 ----------------------------------------------------------------------

def test_criterion_4_ema_replay(report):
    lab, unl, _ = make_splits(SplitSpec(2, 8, 2, seed=4), size=16, num_classes=3)
    steps = 200
    tr = SSLTrainer(SMALL, TrainConfig(epochs=100, burn_in_epochs=0, batch_labeled=2, batch_unlabeled=4,
                                       rho=0.5, seed=4),
                    AugConfig(), total_iters=steps, burn_in_steps=20)
    initial = {k: v.data.copy() for k, v in tr.teacher.params.items()}
    snapshots = []
    tr.on_pre_update = lambda t: snapshots.append({k: v.data.copy() for k, v in t.student.params.items()})
    while tr.step < steps:
        tr.fit_epoch(lab, unl)
    replay = initial
    for snap, m in zip(snapshots, tr.history):
        replay = {k: m.theta * replay[k] + (1.0 - m.theta) * snap[k] for k in replay}
    identical = all(np.array_equal(replay[k], tr.teacher[k].data) for k in replay)
    moved = not all(np.array_equal(initial[k], replay[k]) for k in replay)
    ok = identical and moved and len(snapshots) == steps
    report(4, ok, f"EMA replay over {len(snapshots)} steps bitwise identical: {identical}")
    assert ok


# 5 ----------------------------------------------------------------------

def test_criterion_5_overfit_probe(report):
    lab, _, _ = make_splits(SplitSpec(4, 1, 1, seed=0))
    steps = 500
    tr = SSLTrainer(ModelConfig(), TrainConfig(lr0=0.5, epochs=steps, burn_in_epochs=0, sup_only=True),
                    AugConfig(weak=False), total_iters=steps)
    start = time.perf_counter()
    for _ in range(steps):
        tr.train_step(lab, lab)
    elapsed = time.perf_counter() - start
    images = np.stack([s.image for s in lab])
    labels = np.stack([s.label for s in lab])
    loss = supervised_loss(tr.student, images, labels).item()
    score, _ = evaluate(tr.student, lab)
    ok = loss < 0.05 and score > 0.95 and elapsed <= 300.0
    report(5, ok, f"sup_only on 4 scenes, {steps} steps: loss {loss:.4f} (< 0.05), "
                  f"train mIoU {score:.4f} (> 0.95), {elapsed:.1f}s (<= 300s)")
    assert ok


# 6 ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_directional_gain(report):
    seeds = range(5)
    start = time.perf_counter()
    sup, full = [], []
    for s in seeds:
        cfg = ExperimentConfig().replace("train.seed", s).replace("data.seed", s)
        assert (cfg.data.n_labeled, cfg.data.n_unlabeled, cfg.data.n_val) == (4, 128, 64)
        full.append(run_experiment(cfg, write=False).final_miou)
        sup.append(run_experiment(cfg.replace("train.sup_only", True), write=False).final_miou)
        print(f"seed {s}: sup_only {sup[-1]:.4f} full {full[-1]:.4f}", flush=True)
    elapsed = time.perf_counter() - start
    sup, full = np.array(sup), np.array(full)
    gain = full - sup
    ok = full.mean() >= sup.mean() and gain.mean() > 0 and elapsed <= 1800.0
    report(6, ok, f"sup_only {100 * sup.mean():.2f}±{100 * sup.std():.2f}, "
                  f"full {100 * full.mean():.2f}±{100 * full.std():.2f}, "
                  f"gain {100 * gain.mean():+.2f}±{100 * gain.std():.2f} mIoU over 5 seeds, {elapsed:.0f}s (<= 1800s)")
    assert ok


# 7 ----------------------------------------------------------------------

GRIDS = {
    "augmentation": ["none", "cutmix", "classmix", "tokenmix_star", "tokenmix"],
    "branch_design": ["D1", "D2", "D3", "D4"],
    "rho": [0.0, 0.5, 0.9, 0.95, 0.99],
    "theta": [0.0, 0.5, 0.9, 0.99, 0.999],
}


def test_criterion_7_grid_completeness(report, tmp_path):
    base = loads_config(TINY_RUN).replace("output_dir", str(tmp_path))
    problems = []
    for axis, values in GRIDS.items():
        table = run_ablation_grid(base, axis, values, [0, 1])
        text = table.render()
        header = [c.strip() for c in text.splitlines()[0].split("|")]
        if table.missing() or table.failed() or len(header) != len(values) + 1 or "nan" in text:
            problems.append(axis)
        if not all(np.isfinite(table.mean_std(v)).all() for v in values):
            problems.append(axis)
    report(7, not problems, f"grids {', '.join(f'{a}[{len(v)}]' for a, v in GRIDS.items())} x 2 seeds, "
                            f"incomplete: {problems or 'none'}")
    assert not problems


# 8 ----------------------------------------------------------------------

def _brute_miou(pred, truth, c):
    ious = []
    for k in range(c):
        inter = sum(1 for p, t in zip(pred.ravel(), truth.ravel()) if p == k and t == k)
        union = sum(1 for p, t in zip(pred.ravel(), truth.ravel()) if p == k or t == k)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def test_criterion_8_metric_correctness(report):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(100):
        c = int(rng.integers(2, 6))
        shape = tuple(rng.integers(2, 9, size=2))
        pred, truth = rng.integers(0, c, shape), rng.integers(0, c, shape)
        if miou(confusion_matrix(pred, truth, c)) != _brute_miou(pred, truth, c):
            mismatches += 1
    truth = np.zeros((4, 4), dtype=int)
    truth[:, 2:] = 1
    hand = miou(confusion_matrix(np.zeros_like(truth), truth, 2))
    ok = mismatches == 0 and hand == 0.25
    report(8, ok, f"100 random maps vs brute force: {mismatches} mismatches; all-one-class hand case {hand}")
    assert ok


# 9 ----------------------------------------------------------------------

def test_criterion_9_determinism(report, tmp_path):
    differing = []
    for mix in ("tokenmix", "cutmix"):
        files = []
        for rep in range(2):
            cfg = loads_config(TINY_RUN).replace("aug.mix", mix).replace("output_dir", str(tmp_path / f"{mix}{rep}"))
            run_experiment(cfg)
            files.append([(tmp_path / f"{mix}{rep}" / n).read_bytes()
                          for n in ("metrics.txt", "eval.txt", "student.ckpt", "teacher.ckpt")])
        if files[0] != files[1]:
            differing.append(mix)
    report(9, not differing, f"repeated runs give identical metric files: differing configs {differing or 'none'}")
    assert not differing
