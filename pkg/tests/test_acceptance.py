"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (shown even when pytest
captures output) and then asserts.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import central_difference, refine_direct, simplex_grid, three_class_partitions
from unissda import cli
from unissda import model as M
from unissda.datagen import SyntheticConfig, make_benchmark
from unissda.metrics import MetricsReport, evaluate
from unissda.pgpr import group_reweight, refine_batch
from unissda.train import TrainConfig, Trainer, TrainingData, unlabeled_loss_and_grad, warmup_weight


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail

    return emit


def test_criterion_1_oracle_equivalence(verdict):
    start = time.perf_counter()
    grid = np.array(simplex_grid(0.05))
    n = len(grid)
    P, Q = np.repeat(grid, n, axis=0), np.tile(grid, (n, 1))
    worst, label_mismatch = 0.0, 0
    for parts in three_class_partitions().values():
        rew, refined, labels, _, _ = refine_batch(P, Q, parts)
        oracle = [refine_direct(p, q, parts) for p, q in zip(P.tolist(), Q.tolist())]
        r_ref = np.array([o[0] for o in oracle])
        f_ref = np.array([o[1] for o in oracle])
        l_ref = np.array([o[2] for o in oracle])
        worst = max(worst, np.abs(refined - f_ref).max(), np.abs(rew - r_ref).max())
        # labels may legitimately differ only on ties within rounding
        top2 = np.sort(f_ref, axis=1)[:, -2:]
        clear = top2[:, 1] - top2[:, 0] > 1e-12
        label_mismatch += int(np.sum((labels != l_ref) & clear))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and label_mismatch == 0 and elapsed < 5.0
    verdict(1, ok, f"{len(P)} grid pairs x 5 partitions, max abs err {worst:.2e}, "
                   f"label mismatches off ties {label_mismatch}, {elapsed:.2f}s")


def test_criterion_2_mass_alignment_and_argmax(verdict):
    rng = np.random.default_rng(2024)
    worst, argmax_bad = 0.0, 0
    for _ in range(10_000):
        C = int(rng.integers(2, 11))
        assign = rng.integers(0, int(rng.integers(1, C + 1)), C)
        groups = [set(np.flatnonzero(assign == g).tolist()) for g in np.unique(assign)]
        p_u = rng.dirichlet(np.full(C, rng.uniform(0.1, 2.0)))
        prior = rng.dirichlet(np.full(C, rng.uniform(0.1, 2.0)))
        rew = group_reweight(p_u, prior, groups)
        for g in groups:
            idx = np.array(sorted(g))
            if p_u[idx].sum() > 0:
                worst = max(worst, abs(rew[idx].sum() - prior[idx].sum()))
                argmax_bad += int(idx[np.argmax(rew[idx])] != idx[np.argmax(p_u[idx])])
    ok = worst < 1e-9 and argmax_bad == 0
    verdict(2, ok, f"10000 instances, max group-mass gap {worst:.2e}, argmax violations {argmax_bad}")


def test_criterion_3_closed_set_identity(verdict):
    rng = np.random.default_rng(3)
    exact = 0
    for _ in range(1000):
        C = int(rng.integers(2, 20))
        p_u, prior = rng.dirichlet(np.ones(C)), rng.dirichlet(np.ones(C))
        exact += int(np.array_equal(group_reweight(p_u, prior, [set(range(C))]), p_u))
    verdict(3, exact == 1000, f"{exact}/1000 inputs returned bit-identical")


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_criterion_4_gradients(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        C, d, N = int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(1, 9))
        masked = i % 2 == 1
        mask = None
        if masked:
            mask = rng.random((N, C)) < 0.6
            mask[np.arange(N), rng.integers(0, C, N)] = True
        allowed = np.ones((N, C), bool) if mask is None else mask
        y = np.array([rng.choice(np.flatnonzero(r)) for r in allowed])
        X = rng.standard_normal((N, d))
        temp = float(rng.uniform(0.5, 2.0))
        # semi-supervised head: confidence-weighted pseudo-label loss
        h = M.ClassifierParams(rng.standard_normal((C, d)), rng.standard_normal(C), temp)
        conf, c_tau = rng.random(N), 0.5

        def loss_h(W, b=h.bias):
            return unlabeled_loss_and_grad(M.ClassifierParams(W, b, temp), X, y, conf, c_tau, mask)[0]

        _, g_h, _ = unlabeled_loss_and_grad(h, X, y, conf, c_tau, mask)
        worst = max(worst, _rel(g_h["weights"], central_difference(loss_h, h.weights)),
                    _rel(g_h["bias"], central_difference(lambda b: loss_h(h.weights, b), h.bias)))
        # supervised prior head: plain labeled cross-entropy
        pr = M.ClassifierParams(rng.standard_normal((C, d)), rng.standard_normal(C), temp)

        def loss_p(W, b=pr.bias):
            return M.ce_loss_and_grad(M.ClassifierParams(W, b, temp), X, y, mask)[0]

        _, g_p = M.ce_loss_and_grad(pr, X, y, mask)
        worst = max(worst, _rel(g_p["weights"], central_difference(loss_p, pr.weights)),
                    _rel(g_p["bias"], central_difference(lambda b: loss_p(pr.weights, b), pr.bias)))
    verdict(4, worst < 1e-5, f"100 instances x 2 heads (half masked), max relative error {worst:.2e}")


def test_criterion_5_warmup(verdict):
    T = 500
    exact = (warmup_weight(0, T) == 0.0 and abs(warmup_weight(T / 2, T) - 0.5) < 1e-15
             and abs(warmup_weight(T, T) - 1.0) < 1e-15 and abs(warmup_weight(2 * T, T) - 1.0) < 1e-15)
    ts = np.linspace(0, 2 * T, 1000)
    mu = np.array([warmup_weight(t, T) for t in ts])
    monotone = bool(np.all(np.diff(mu) >= 0))
    verdict(5, exact and monotone, f"endpoint values exact: {exact}, monotone over 1000 points: {monotone}")


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """The shipped default experiment: open-partial 6/3/3, k=3, 1500 iterations, 5 seeds."""
    out = tmp_path_factory.mktemp("bench")
    cfg = cli.ExperimentConfig(output_dir=str(out))
    start = time.perf_counter()
    cli.cmd_run(cfg)
    elapsed = time.perf_counter() - start
    reports = {}
    for method in cfg.methods:
        rs = []
        for seed in cfg.seeds:
            path = cli.run_dir(cfg, method, seed) / "reports.jsonl"
            recs = [MetricsReport.from_dict(json.loads(x)) for x in path.read_text().splitlines()]
            rs.append(next(r for r in recs if r.split_kind == "inductive_test"))
        reports[method] = rs
    return cfg, reports, elapsed


def _mean(reports, field):
    return float(np.mean([getattr(r, field) for r in reports]))


def test_criterion_6_bias_reduction(verdict, benchmark):
    cfg, reports, elapsed = benchmark
    assert cfg.train.iterations == 1500 and cfg.k_shot == 3 and cfg.synthetic.shift_magnitude == 3.0
    assert cfg.counts == {"common": 6, "source_private": 3, "target_private": 3}
    rate_p = _mean(reports["pgpr"], "private_as_common_rate")
    rate_n = _mean(reports["naive_pseudo_label"], "private_as_common_rate")
    acc_p = _mean(reports["pgpr"], "target_private_accuracy")
    acc_n = _mean(reports["naive_pseudo_label"], "target_private_accuracy")
    ok = rate_p < rate_n and acc_p - acc_n >= 0.05 and elapsed < 120
    verdict(6, ok, f"private-as-common rate pgpr {rate_p:.3f} vs naive {rate_n:.3f}; "
                   f"target-private accuracy pgpr {acc_p:.3f} vs naive {acc_n:.3f} "
                   f"(+{100 * (acc_p - acc_n):.1f} pp); 15 runs in {elapsed:.1f}s")


def test_criterion_7_overall_accuracy_margin(verdict, benchmark):
    _, reports, _ = benchmark
    acc_p = _mean(reports["pgpr"], "overall_accuracy")
    acc_s = _mean(reports["s_plus_t"], "overall_accuracy")
    per_seed = [round(p.overall_accuracy - s.overall_accuracy, 3)
                for p, s in zip(reports["pgpr"], reports["s_plus_t"])]
    verdict(7, acc_p - acc_s >= 0.02,
            f"overall accuracy pgpr {acc_p:.4f} vs s_plus_t {acc_s:.4f} "
            f"(+{100 * (acc_p - acc_s):.2f} points; per seed {per_seed})")


def test_criterion_8_determinism(verdict, benchmark, tmp_path):
    cfg, _, _ = benchmark
    rerun = replace(cfg, output_dir=str(tmp_path), seeds=[cfg.seeds[0]])
    cli.cmd_run(rerun)
    same = []
    for method in cfg.methods:
        for name in ("reports.jsonl", "history.jsonl", "model.bin"):
            a = (cli.run_dir(cfg, method, cfg.seeds[0]) / name).read_bytes()
            b = (cli.run_dir(rerun, method, cfg.seeds[0]) / name).read_bytes()
            same.append(a == b)
    verdict(8, all(same), f"{sum(same)}/{len(same)} report, history and checkpoint files bitwise identical")


def _ablation(setting, counts, seed, reweight):
    src, trg, ls = make_benchmark(SyntheticConfig(seed=seed), setting, counts, k=3)
    data = TrainingData.from_datasets(src, trg, ls)
    cfg = TrainConfig(seed=seed, group_reweight=reweight, classifier_aggregate=False)
    tr = Trainer(cfg, data)
    losses = []
    for _ in range(cfg.iterations):
        tr.train_step()
        losses.append((tr.last["labeled_loss"], tr.last["unlabeled_loss"], tr.last["prior_loss"]))
    acc = evaluate(tr.inference_model(), data.test, data.groups).overall_accuracy
    return losses, acc


def test_criterion_9_ablation_structure(verdict):
    closed_same, closed_acc, open_diff = True, [], []
    for seed in (0, 1, 2):
        l_on, a_on = _ablation("closed", None, seed, True)
        l_off, a_off = _ablation("closed", None, seed, False)
        closed_same &= l_on == l_off and a_on == a_off
        closed_acc.append(a_on)
        _, o_on = _ablation("open_partial", cli.ExperimentConfig().counts, seed, True)
        _, o_off = _ablation("open_partial", cli.ExperimentConfig().counts, seed, False)
        open_diff.append(round(o_on - o_off, 4))
    ok = closed_same and all(d != 0 for d in open_diff)
    verdict(9, ok, f"closed-set losses and accuracy identical over 1500 steps x 3 seeds: {closed_same}; "
                   f"open-partial accuracy change from reweighting per seed {open_diff}")
