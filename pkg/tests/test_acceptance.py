"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every criterion also has a runtime budget; exceeding it is a failure. The
collected lines are repeated in the pytest terminal summary (see conftest).
Run standalone with ``python tests/test_acceptance.py``.
"""

import itertools
import math
import time

import numpy as np
import pytest

from survseg.features import apply_normalizer, fit_normalizer
from survseg.milnet import POOL_MODES, Architecture, Batch, PatientBag, gradient_check, init_params, loss_cox, pool
from survseg.pipeline import Cohort, PipelineConfig, cv_runner, run_cv
from survseg.propagation import ObjectSeeds, OracleSegmenter, PropagationConfig, propagate_object
from survseg.stats import (
    c_index,
    cox_fit,
    cox_partial_loglik,
    detection_metrics,
    dice,
    kaplan_meier,
    log_rank,
    randomization_test,
    wilcoxon_rank_sum,
)
from survseg.synthetic import cube_phantom, multifocal_cohort, planted_cohort, shuffle_labels, sphere_phantom
from survseg.volume import View

RESULTS: dict[int, str] = {}


def _record(n: int, name: str, checks: dict[str, bool], detail: str, elapsed: float, budget: float) -> bool:
    checks = {**checks, f"runtime<{budget:g}s": elapsed < budget}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}; {elapsed:.2f}s"
    if failed:
        line += f"; failed: {', '.join(failed)}"
    RESULTS[n] = line
    print(line)
    return ok


class _Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def test_c01_f1_anchor():
    with _Clock() as clk:
        rep = detection_metrics(36, 14, 5)
    checks = {
        "precision": abs(rep.precision - 0.720) <= 1e-3,
        "recall": abs(rep.recall - 0.878) <= 1e-3,
        "f1": abs(rep.f1 - 0.791) <= 1e-3,
    }
    detail = f"precision {rep.precision:.4f}, recall {rep.recall:.4f}, F1 {rep.f1:.4f}"
    assert _record(1, "F1 arithmetic anchor", checks, detail, clk.elapsed, 1)


def test_c02_gradient_suite():
    rng = np.random.default_rng(0)
    bags = []
    for i in range(12):
        k = int(rng.integers(1, 4))
        bags.append(PatientBag(f"p{i}", rng.normal(size=(k, 10)), float(rng.uniform(1, 60)), i % 3 != 0, int(rng.integers(k))))
    batch = Batch.from_bags(bags)
    params = init_params(Architecture(10), rng)
    errors = {}
    with _Clock() as clk:
        for mode in POOL_MODES:
            for alpha in (0.0, 0.5, 1.0):
                errors[(mode, alpha)] = gradient_check(params, batch, mode, alpha, h=1e-5, per_array=8, seed=1)
    worst = max(errors.values())
    checks = {f"{m}@{a}": e < 1e-4 for (m, a), e in errors.items()}
    assert _record(2, "gradient suite", checks, f"12 combinations, max relative error {worst:.2e}", clk.elapsed, 30)


def _brute_cindex(T, E, H):
    num = den = 0
    for j, i in itertools.permutations(range(len(T)), 2):
        if E[j] and T[j] < T[i]:
            den += 1
            num += H[j] > H[i]
    return num / den


def test_c03_cindex_oracle():
    rng = np.random.default_rng(3)
    mismatches = done = 0
    with _Clock() as clk:
        while done < 500:
            n = int(rng.integers(2, 13))
            T = rng.integers(1, 10, n).astype(float)
            E = (rng.random(n) < rng.uniform(0.2, 1.0)).astype(int)
            H = rng.integers(0, 6, n).astype(float) if done % 2 else rng.normal(size=n)
            if not any(E[j] and T[j] < T[i] for j in range(n) for i in range(n)):
                continue
            mismatches += c_index(T, E, H) != _brute_cindex(T, E, H)
            done += 1
    assert _record(3, "C-index oracle", {"exact": mismatches == 0}, f"{done} instances, {mismatches} mismatches", clk.elapsed, 5)


def test_c04_lse_bound():
    rng = np.random.default_rng(4)
    violations = 0
    with _Clock() as clk:
        for _ in range(10_000):
            n = int(rng.integers(1, 21))
            eta = rng.normal(0, 2, n)
            p = pool(eta, "lse")
            m = eta.max()
            if n == 1:
                violations += p != eta[0]
            else:
                violations += not (m < p <= m + math.log(n))
        eq_ok = all(
            abs(pool(np.full(n, v), "lse") - (v + math.log(n))) < 1e-12
            for n in (2, 3, 7, 50) for v in (-3.0, 0.0, 1000.0)
        )
        strict_ok = all(
            pool(v, "lse") < max(v) + math.log(len(v))
            for v in ([0.0, 1e-3], [1.0, 1.0, 1.1], [-5.0, 5.0], [0.0] * 9 + [0.01])
        )
    checks = {"bounds": violations == 0, "equality when all equal": eq_ok, "strict otherwise": strict_ok}
    assert _record(4, "LSE bound", checks, f"10000 vectors, {violations} violations", clk.elapsed, 1)


def test_c05_cox_oracle():
    Z = np.array([[1.0], [0.0], [1.0], [0.0]])
    T = np.array([1.0, 2.0, 3.0, 4.0])
    E = np.array([1, 1, 0, 1])
    with _Clock() as clk:
        fit = cox_fit(Z, T, E)
        # independent oracle: partial likelihood written out per event over a fine grid
        grid = np.linspace(-5, 5, 200_001)
        z = Z[:, 0]
        ll = np.zeros_like(grid)
        for i in np.flatnonzero(E):
            at_risk = T >= T[i]
            ll += grid * z[i] - np.log(np.exp(np.outer(grid, z[at_risk])).sum(axis=1))
        b_star = grid[int(np.argmax(ll))]
        ll_ok = abs(cox_partial_loglik([b_star], Z, T, E) - ll.max()) < 1e-12
        rng = np.random.default_rng(5)
        worst_shift = 0.0
        for _ in range(200):
            n = int(rng.integers(1, 30))
            eta, t = rng.normal(size=n) * 3, rng.integers(1, 8, n).astype(float)
            ev = rng.integers(0, 2, n)
            ev[0] = 1
            c = rng.uniform(-10, 10)
            worst_shift = max(worst_shift, abs(loss_cox(eta + c, t, ev) - loss_cox(eta, t, ev)))
    checks = {"grid": abs(fit.beta[0] - b_star) < 1e-4, "loglik": ll_ok, "shift": worst_shift < 1e-10}
    detail = f"beta {fit.beta[0]:.6f} vs grid {b_star:.6f}, max shift change {worst_shift:.1e}"
    assert _record(5, "Cox fit oracle", checks, detail, clk.elapsed, 5)


def test_c06_samonai_phantoms():
    checks, parts = {}, []
    with _Clock() as clk:
        for name, (vol, truth), need in (("cube", cube_phantom(), 0.99), ("sphere", sphere_phantom(), 0.90)):
            centre = tuple(s // 2 for s in vol.dims)
            for view in View:
                res = propagate_object(vol, ObjectSeeds(2, (centre,), view), OracleSegmenter(), PropagationConfig(workers=1))
                d = dice(res.mask, truth)
                checks[f"{name}-{view.name.lower()}"] = bool(res.ok and d >= need)
                parts.append(f"{name}/{view.name.lower()} {d:.4f}")
            one = propagate_object(vol, ObjectSeeds(2, (centre,)), OracleSegmenter(), PropagationConfig(workers=1))
            many = propagate_object(vol, ObjectSeeds(2, (centre,)), OracleSegmenter(), PropagationConfig(workers=4))
            checks[f"{name}-threads"] = one.logits.logits.tobytes() == many.logits.logits.tobytes()
    same = all(v for k, v in checks.items() if k.endswith("threads"))
    detail = "dice " + ", ".join(parts) + f"; 1 vs 4 threads {'bit-identical' if same else 'DIFFER'}"
    assert _record(6, "SAMONAI phantoms", checks, detail, clk.elapsed, 60)


def test_c07_planted_signal():
    feats, surv = planted_cohort(n_patients=200, censor_frac=0.4, seed=0)
    cohort = Cohort.build(feats, surv)
    cfg = PipelineConfig(seed=0, folds=3, repeats=3)
    with _Clock() as clk:
        planted = run_cv(cfg, cohort).mean_cindex
        shuffled = run_cv(cfg, Cohort.build(feats, shuffle_labels(surv, seed=1))).mean_cindex
        # one 3-fold repeat per randomisation replicate keeps R = 200 inside the budget
        runner = cv_runner(PipelineConfig(seed=0, folds=3, repeats=1), cohort)
        rt = randomization_test(runner, cohort.times, cohort.events, R=200, seed=0)
    checks = {"planted>=0.75": planted >= 0.75, "shuffled in [0.4,0.6]": 0.4 <= shuffled <= 0.6, "p<=1/200": rt.p <= 1 / 200}
    detail = (f"planted C {planted:.4f}, shuffled C {shuffled:.4f}, randomisation observed {rt.observed:.4f} "
              f"null mean {rt.null.mean():.4f} max {rt.null.max():.4f} p {rt.p:.4f}")
    assert _record(7, "planted-signal survival run", checks, detail, clk.elapsed, 600)


def test_c08_pooling_ordering():
    feats, surv = multifocal_cohort(seed=0)
    cohort = Cohort.build(feats, surv)
    scores = {}
    with _Clock() as clk:
        for mode in ("lse", "max", "mean"):
            scores[mode] = run_cv(PipelineConfig(seed=0, folds=3, repeats=3, pool=mode), cohort).mean_cindex
    checks = {"lse>=max": scores["lse"] >= scores["max"], "max>=mean": scores["max"] >= scores["mean"]}
    detail = ", ".join(f"{k} {v:.4f}" for k, v in scores.items())
    assert _record(8, "pooling ordering", checks, detail, clk.elapsed, 300)


def test_c09_normalisation():
    rng = np.random.default_rng(9)
    worst_mean = worst_std = 0.0
    const_ok = mono_ok = finite_ok = True
    with _Clock() as clk:
        for _ in range(1000):
            n, d = int(rng.integers(2, 40)), int(rng.integers(1, 6))
            X = rng.lognormal(0, 1.5, (n, d)) * rng.choice([1.0, -1.0, 100.0], d)
            if rng.random() < 0.2:
                X[:, 0] = X[0, 0]
            state = fit_normalizer(X)
            Y = apply_normalizer(X, state)
            finite_ok &= bool(np.isfinite(Y).all())
            for j in range(d):
                if state.sigma[j] == 0:
                    const_ok &= bool(np.all(Y[:, j] == 0))
                    continue
                worst_mean = max(worst_mean, abs(Y[:, j].mean()))
                worst_std = max(worst_std, abs(Y[:, j].std() - 1))
                order = np.argsort(X[:, j], kind="stable")
                mono_ok &= bool(np.all(np.diff(Y[order, j]) >= 0))
    checks = {"mean": worst_mean < 1e-9, "std": worst_std < 1e-9, "constant->0": const_ok, "monotone": mono_ok, "finite": finite_ok}
    detail = f"1000 matrices, max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}"
    assert _record(9, "normalisation properties", checks, detail, clk.elapsed, 5)


def test_c10_statistics_golden():
    with _Clock() as clk:
        s1, s2 = kaplan_meier([1, 2], [1, 1]).at([1, 2])
        lr = log_rank([1, 2, 3], [1, 0, 1], [1, 2, 3], [1, 0, 1])
        w = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6])
    checks = {"S(1)": abs(s1 - 0.5) < 1e-6, "S(2)": abs(s2) < 1e-6, "log-rank": abs(lr.chi2) < 1e-6, "wilcoxon": abs(w - 0.1) < 1e-6}
    detail = f"S(1) {s1}, S(2) {s2}, chi2 {lr.chi2}, Wilcoxon p {w}"
    assert _record(10, "statistics golden values", checks, detail, clk.elapsed, 1)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
