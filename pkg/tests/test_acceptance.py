"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines go
straight to the terminal (stdout capture is bypassed for them).
"""
import time
import warnings

import numpy as np
import pytest
from click.testing import CliRunner

import oracles
from ridl.cli import cli
from ridl.experiment import planted_table, sweep_dir_name
from ridl.features import (
    DNUN, IDN, LDE, LRE, SELECTED_KEYS, TEXTURE_KEYS, build_gldm, build_glcm, build_glrlm, extract_table,
    texture_feature,
)
from ridl.folds import rolling_folds
from ridl.localmap import local_feature_map, local_stack, naive_local_oracle
from ridl.losses import FeatureBank, LossWeights, alpha_schedule, bank_stats, decorr_grad, decorr_loss, total_loss
from ridl.metrics import METRIC_NAMES, MetricReport, average_precision, roc_auc
from ridl.quantize import QuantizedVolume, discretize
from ridl.selection import predict_table, select_lambda_cv
from ridl.toynet import ToyConfig, ToyInput, grad_check, init_model, make_input, toy_train
from ridl.volume import RoiMask, synth_dataset


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def _random_levels(rng, shape, density_low):
    ng = int(rng.integers(1, 9))
    levels = rng.integers(1, ng + 1, shape).astype(np.int32)
    levels[rng.random(shape) > rng.uniform(density_low, 1.0)] = 0
    if not levels.any():
        levels[0, 0, 0] = 1
    return QuantizedVolume(levels, int(levels.max()), 25.0, 0.0)


def test_texture_oracle(verdict):
    checked, bad = 0, []
    for seed in range(50):
        q = _random_levels(np.random.default_rng(seed), (8, 8, 8), 0.3)
        counts = oracles.brute_glcm(q.levels, q.num_levels)
        runs = oracles.brute_runs(q.levels)
        dep = oracles.brute_dependence(q.levels)
        exact = float(oracles.exact_idn(counts, q.num_levels))
        ok = (abs(texture_feature(build_glcm(q), IDN) - exact) <= 1e-12 * abs(exact)
              and texture_feature(build_glrlm(q), LRE) == float(oracles.exact_lre(runs))
              and texture_feature(build_gldm(q), DNUN) == float(oracles.exact_dnun(dep))
              and texture_feature(build_gldm(q), LDE) == float(oracles.exact_lde(dep)))
        checked += 1
        if not ok:
            bad.append(seed)
    verdict("texture oracle equivalence", not bad,
            f"{checked} random 8^3 ROIs, mismatching seeds {bad or 'none'}")


def test_local_map_oracle(verdict):
    t0 = time.perf_counter()
    bad = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        q = _random_levels(rng, (16, 16, 16), 0.2)
        mask = RoiMask((q.levels > 0).astype(np.uint8))
        for key in TEXTURE_KEYS:
            for p in (1, 2):
                ref = naive_local_oracle(q, mask, key, p)
                for workers in (1, 2, 8):
                    got = local_feature_map(q, mask, key, p, workers=workers)
                    if not (np.array_equal(got.values, ref.values) and np.array_equal(got.validity, ref.validity)):
                        bad.append((seed, key, p, workers))
    elapsed = time.perf_counter() - t0
    verdict("local map oracle equivalence", not bad and elapsed < 120,
            f"50 volumes x 4 keys x p in {{1,2}} x workers {{1,2,8}}, {len(bad)} mismatches, {elapsed:.1f} s")


def _random_bank(seed):
    rng = np.random.default_rng(seed)
    n, dz, dr = int(rng.integers(2, 26)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
    bank = FeatureBank(25, float(rng.uniform(0.5, 0.99)), min(1 + seed % 3, n), 0)
    for _ in range(n):
        bank.push(rng.standard_normal(dz) * rng.uniform(0.1, 5, dz), rng.standard_normal(dr) + rng.uniform(-3, 3, dr))
    return bank


def test_decorr_brute_force(verdict):
    worst = 0.0
    for seed in range(100):
        bank = _random_bank(seed)
        Z, R = bank.arrays()
        ref = np.abs(oracles.brute_correlation(Z, R, bank.decay)).sum()
        worst = max(worst, abs(decorr_loss(bank) - ref))
    verdict("decorr_loss brute force", worst <= 1e-10, f"100 banks, max abs difference {worst:.2e}")


def test_gradient_checks(verdict):
    t0 = time.perf_counter()
    worst_bank = 0.0
    for seed in range(100):
        bank = _random_bank(seed)
        stats = bank_stats(bank)
        grad = decorr_grad(bank, stats)
        Z = bank.arrays()[0][: grad.shape[0]]
        num = np.zeros_like(grad)
        for idx in np.ndindex(grad.shape):
            up, down = Z.copy(), Z.copy()
            up[idx] += 1e-5
            down[idx] -= 1e-5
            num[idx] = (decorr_loss(bank.with_newest(up), stats) - decorr_loss(bank.with_newest(down), stats)) / 2e-5
        scale = max(np.abs(grad).max(), np.abs(num).max(), 1e-8)
        worst_bank = max(worst_bank, np.abs(grad - num).max() / scale)

    worst_net = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = init_model(4, 4, 4, 8, 2, seed=seed)
        for k in m.params:
            m.params[k] += 0.3 * rng.standard_normal(m.params[k].shape)
        m.rg_mean, m.rg_std = rng.normal(size=4), rng.uniform(0.5, 2, 4)
        raw = np.stack([rng.uniform(-1, 1, 512), (rng.random(512) < 0.5).astype(float)])
        x = ToyInput("a", raw, rng.random((4, 512)), rng.normal(size=4), int(rng.integers(2)), (8, 8, 8))
        worst_net = max(worst_net, grad_check(m, x, 0.0), grad_check(m, x, 2.0, seed=seed))
    elapsed = time.perf_counter() - t0
    verdict("gradient checks", worst_bank < 1e-4 and worst_net < 1e-4 and elapsed < 60,
            f"decorr_grad max rel err {worst_bank:.2e}, toynet max rel err {worst_net:.2e} "
            f"(100 instances each, w_corr 0 and 2), {elapsed:.1f} s")


def test_schedule_values(verdict):
    alphas = (alpha_schedule(0), alpha_schedule(10), alpha_schedule(25))
    total = total_loss(1.0, 0.1, 0.5, LossWeights(w_corr=2.0))
    verdict("schedule values", alphas == (0.33, 0.264, 0.2112) and total == 1.7,
            f"alpha(0, 10, 25) = {alphas}, total_loss = {total!r}")


def test_metric_identities(verdict):
    perfect = roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    auc, ap = roc_auc(s, y), average_precision(s, y)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 50))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = rng.standard_normal(n)
        base = roc_auc(scores, labels)
        for f in (np.exp, np.tanh, lambda v: v ** 3 + 2 * v):
            worst = max(worst, abs(roc_auc(f(scores), labels) - base))
    ok = perfect == 1.0 and auc == 0.75 and abs(ap - 5 / 6) <= 1e-9 and worst == 0.0
    verdict("metric identities", ok,
            f"perfect AUC {perfect}, 4-sample AUC {auc} AP {ap:.10f}, max monotone change {worst:.1e}")


def test_lasso_recovery(verdict):
    t0 = time.perf_counter()
    lines, good = [], 0
    for seed in range(10):
        base = extract_table(synth_dataset(100, seed), SELECTED_KEYS)
        table = planted_table(base, 16, seed + 1000)
        plan = rolling_folds(table.ids, 5, seed)
        tr, va, te = plan.indices(0)
        inner = table.subset(np.sort(np.r_[tr, va]))
        _, model, selected = select_lambda_cv(inner, rolling_folds(inner.ids, 5, seed))
        test = table.subset(te)
        auc = roc_auc(predict_table(model, test), test.labels)
        informative = sum(k in SELECTED_KEYS for k in selected)
        noise = len(selected) - informative
        ok = informative >= 3 and noise <= 2 and auc > 0.9
        good += ok
        lines.append(f"seed {seed}: {informative} informative, {noise} noise, AUC {auc:.3f}")
    elapsed = time.perf_counter() - t0
    verdict("LASSO recovery", good >= 9 and elapsed < 120,
            f"{good}/10 seeds succeed, {elapsed:.1f} s [" + "; ".join(lines) + "]")


def test_decorrelation_effect(verdict):
    t0 = time.perf_counter()
    good, lines = 0, []
    for seed in range(10):
        samples = synth_dataset(50, seed)
        table = extract_table(samples, SELECTED_KEYS)
        data = [make_input(s, local_stack(discretize(s.volume, s.mask), s.mask, radii=(1, 2, 3, 4)),
                           table.values[i]) for i, s in enumerate(samples)]
        final = {}
        for w in (0.0, 2.0):
            _, log = toy_train(ToyConfig(w_corr=w, seed=seed), data)
            final[w] = log[-1]["max_abs_s"]
        ok = final[2.0] < 0.2 and final[0.0] > 0.5
        good += ok
        lines.append(f"seed {seed}: w0 {final[0.0]:.3f} w2 {final[2.0]:.3f}")
    elapsed = time.perf_counter() - t0
    verdict("de-correlation effect", good >= 8 and elapsed < 300,
            f"{good}/10 seeds with max|S| < 0.2 at w_corr 2 and > 0.5 at w_corr 0, {elapsed:.1f} s ["
            + "; ".join(lines) + "]")


def test_sweep_stability(verdict, tmp_path):
    cfg = tmp_path / "sweep.toml"
    cfg.write_text('pipeline = "toy-ridl"\nout = "runs"\nstratify = true\n'
                   "[data.phantoms]\nn_per_class = 15\nseed = 1\n"
                   "[toy]\nepochs = 3\n[sweep]\nw_corr = [1.5, 2.0, 2.5, 3.0]\n")
    result = CliRunner().invoke(cli, ["sweep", "--config", str(cfg)])
    valid = 0
    for i, w in enumerate((1.5, 2.0, 2.5, 3.0)):
        path = tmp_path / "runs" / sweep_dir_name(i, w) / "report.json"
        if path.exists():
            r = MetricReport.load(path)
            if r.n_folds == 5 and all(0.0 <= v <= 1.0 for m in METRIC_NAMES for v in r.per_fold[m]):
                valid += 1
    verdict("sweep stability harness", result.exit_code == 0 and valid == 4,
            f"exit code {result.exit_code}, {valid}/4 valid reports")


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def test_performance(verdict):
    rng = np.random.default_rng(0)
    levels = rng.integers(1, 9, (64, 64, 64)).astype(np.int32)
    q, mask = QuantizedVolume(levels, 8, 25.0, 0.0), RoiMask(np.ones(levels.shape, dtype=np.uint8))
    speedups = {}
    for key in TEXTURE_KEYS:
        local_feature_map(q, mask, key, 1, workers=8)  # compile
        naive_local_oracle(q, mask, key, 1)
        fast = _best_time(lambda: local_feature_map(q, mask, key, 2, workers=8), 3)
        slow = _best_time(lambda: naive_local_oracle(q, mask, key, 2), 2)
        speedups[key.split("_")[-1]] = slow / fast

    sample = synth_dataset(1, 0, (96, 128, 128))[0]
    big = discretize(sample.volume, sample.mask)
    t = time.perf_counter()
    local_stack(big, sample.mask, IDN, (1, 2), workers=8)
    elapsed = time.perf_counter() - t
    if elapsed >= 60:
        warnings.warn(f"96x128x128 local maps at p in {{1,2}} took {elapsed:.1f} s (soft target 60 s)")
    detail = ", ".join(f"{k} {v:.1f}x" for k, v in speedups.items())
    verdict("performance", min(speedups.values()) >= 5,
            f"speedup over oracle at p=2 on 64^3 (8 workers): {detail}; 96x128x128 p in {{1,2}}: "
            f"{elapsed:.1f} s (soft target < 60 s)")
