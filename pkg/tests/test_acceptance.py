"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Runtime budgets are part of each criterion and are checked alongside the
numeric tolerances.
"""

import subprocess
import sys
import time
from dataclasses import replace

import numpy as np

from oilbench import harness, metrics, suites
from oilbench.core import Domain, RoundLoss
from oilbench.solvers import Objective, SolverConfig, solve


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_reformulation_equivalence(criterion):
    with Timer() as clock:
        cases = [suites.reformulation_case(seed) for seed in range(50)]
    worst = max(c["max_deviation"] for c in cases)
    dims = {c["d"] for c in cases}
    ok = worst <= 1e-8 and max(dims) <= 5 and all(c["T"] == 20 for c in cases) and clock.elapsed < 5.0
    assert criterion(1, "FTRL / Alt-FTRL / naive FTRL iterates agree",
                     ok, f"50 streams, d in {sorted(dims)}, max deviation {worst:.2e} (tol 1e-8), "
                         f"{clock.elapsed:.2f}s (budget 5s)")


def test_ogd_recovery(criterion):
    with Timer() as clock:
        cases = [suites.ogd_recovery_case(seed, T=50) for seed in range(20)]
    worst = max(c["max_deviation"] for c in cases)
    ok = worst <= 1e-10 and clock.elapsed < 1.0
    assert criterion(2, "FTRL on linearized losses equals OGD",
                     ok, f"20 seeds x T=50, max deviation {worst:.2e} (tol 1e-10), "
                         f"{clock.elapsed:.2f}s (budget 1s)")


def test_gridworld_adversarial_ordering(criterion):
    seeds = (1, 2, 3)
    final = {}
    with Timer() as clock:
        for algo in ("OGD", "FTRL"):
            base = replace(harness.preset("gridworld_adversarial", algo=algo), seeds=seeds)
            tuned = harness.tune(base).config
            final[algo] = [harness.run(tuned, s).rows[-1]["cumulative_regret"] for s in seeds]
        ftl = harness.preset("gridworld_adversarial", algo="FTL")
        final["FTL"] = [harness.run(ftl, s).rows[-1]["cumulative_regret"] for s in seeds]
    ratios = [min(final["FTL"][i] / final["OGD"][i], final["FTL"][i] / final["FTRL"][i]) for i in range(3)]
    ok = all(r >= 2.0 for r in ratios) and clock.elapsed < 120.0
    detail = ", ".join(f"seed {s}: FTL {final['FTL'][i]:.2f} / OGD {final['OGD'][i]:.2f} / "
                       f"FTRL {final['FTRL'][i]:.2f}" for i, s in enumerate(seeds))
    assert criterion(3, "FTL regret at round 100 at least 2x OGD and FTRL",
                     ok, f"{detail}; min ratio {min(ratios):.2f}; {clock.elapsed:.1f}s (budget 120s)")


def test_stationary_constant_regret(criterion):
    with Timer() as clock:
        rec = harness.run(harness.preset("gridworld_stationary", algo="FTL"), 0)
    R = rec.column("cumulative_regret")
    report = rec.bound_reports[0]
    growth = R[99] - R[1]
    ok = (rec.rounds == 100 and growth <= 1e-6 and R[99] <= report["rhs"] * (1 + 1e-9)
          and clock.elapsed < 60.0)
    assert criterion(4, "FTL regret stays constant with a realizable expert",
                     ok, f"R(2)={R[1]:.6g}, R(100)={R[99]:.6g}, growth {growth:.2e} (tol 1e-6), "
                         f"C/(1-gamma)={report['rhs']:.6g}; {clock.elapsed:.1f}s (budget 60s)")


def test_bound_conformance(criterion):
    with Timer() as clock:
        cases = [suites.bound_case(th, s) for th in suites.BOUND_RUNS for s in range(20)]
    failed = [(c["theorem"], c["seed"]) for c in cases if not c["passed"]]
    worst = {}
    for c in cases:
        if c.get("rhs"):
            worst[c["theorem"]] = max(worst.get(c["theorem"], 0.0), c["lhs"] / c["rhs"])
    ok = not failed and len(cases) == 140 and clock.elapsed < 180.0
    ratios = ", ".join(f"{k} {v:.3f}" for k, v in worst.items())
    assert criterion(5, "measured regret below every bound",
                     ok, f"{len(cases) - len(failed)}/{len(cases)} runs hold, failures {failed}; "
                         f"max lhs/rhs: {ratios}; {clock.elapsed:.1f}s (budget 180s)")


def test_interpolation(criterion):
    with Timer() as clock:
        base = harness.preset("toy_simple", loss_kind="squared")
        recs = {algo: harness.run(replace(base, algo=algo), 0) for algo in ("FTL", "FTRL", "AdaFTRL")}
        losses = harness._toy_losses(base, 0)
        w_star, _ = metrics.hindsight(losses, base.domain)
        eps = max(metrics.interpolation_error(l, w_star, base.domain) for l in losses)
    avg = {a: r.rows[-1]["avg_cumulative_loss"] for a, r in recs.items()}
    iters = recs["FTL"].column("inner_iters")
    iters_ok = iters.max() <= 2 * iters[0]
    ok = eps <= 1e-10 and all(v <= 1e-6 for v in avg.values()) and iters_ok and clock.elapsed < 30.0
    detail = (f"max eps^2 {eps:.2e} (tol 1e-10); avg loss at 250: "
              + ", ".join(f"{a} {v:.3g}" for a, v in avg.items())
              + f" (tol 1e-6); FTL inner iterations t=1 {iters[0]}, max {iters.max()} at t={int(iters.argmax()) + 1}"
              + f" (limit {2 * iters[0]}); {clock.elapsed:.1f}s (budget 30s)")
    assert criterion(6, "interpolating stream", ok, detail)


def test_inequality_probes(criterion):
    with Timer() as clock:
        quad = suites.quadratic_probe_case(0, draws=10_000)
        ada = suites.adagrad_probe_case(0, draws=10_000)
    ok = quad["passed"] and ada["passed"] and clock.elapsed < 5.0
    assert criterion(7, "quadratic-root and AdaGrad inequalities",
                     ok, f"quadratic: {quad['violations']} violations in {quad['premise_held']} draws; "
                         f"adagrad: max ratio {ada['max_ratio']:.3f} (limit 2); {clock.elapsed:.2f}s (budget 5s)")


def _random_smooth_loss(rng, kind):
    n, d, k = rng.integers(1, 6), rng.integers(1, 5), rng.integers(2, 5)
    x = rng.standard_normal((n, d))
    y = np.eye(k)[rng.integers(k, size=n)] if kind == "logistic" else rng.standard_normal((n, k))
    return RoundLoss(x, y, kind=kind, delta=float(rng.uniform(0.2, 2.0)))


def test_numerics(criterion):
    rng = np.random.default_rng(2024)
    worst = {}
    h = 1e-5
    for kind in ("squared", "logistic", "huber"):
        err = 0.0
        for _ in range(100):
            l = _random_smooth_loss(rng, kind)
            w = rng.standard_normal(l.dim)
            num = np.array([(l.value(w + h * e) - l.value(w - h * e)) / (2 * h) for e in np.eye(l.dim)])
            err = max(err, np.linalg.norm(l.gradient(w) - num) / max(np.linalg.norm(num), 1.0))
        worst[kind] = err
    armijo = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        q, _ = np.linalg.qr(r.standard_normal((2, 2)))
        x = np.sqrt(2 * np.array([100.0, 1.0]))[:, None] * q.T  # 1/2 w^T (Q diag(100, 1) Q^T) w
        l = RoundLoss(x, np.zeros((2, 1)))
        rep = solve(Objective([l]), Domain.unconstrained(), r.standard_normal(2),
                    SolverConfig(grad_tol=1e-8, max_iters=1000))
        armijo.append((rep.converged, rep.iters_used))
    ok = all(v <= 1e-5 for v in worst.values()) and all(c for c, _ in armijo)
    assert criterion(8, "finite-difference gradients and Armijo on kappa=100",
                     ok, "max relative FD error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                         + f" (tol 1e-5); Armijo iterations {max(i for _, i in armijo)} max, "
                           f"all converged to 1e-8: {all(c for c, _ in armijo)}")


def _cli_bundle(tmp, name):
    out = tmp / name
    proc = subprocess.run([sys.executable, "-m", "oilbench", "run", "--preset", name.split("-")[0],
                           "--seeds", "1,2", "--out", str(out)], capture_output=True, text=True)
    files = {p.name: p.read_bytes() for p in sorted(out.iterdir()) if not p.name.endswith(".timings.json")}
    return proc.returncode, files


def test_determinism(criterion, tmp_path):
    results = {}
    for name in harness.PRESETS:
        code_a, a = _cli_bundle(tmp_path, f"{name}-a")
        code_b, b = _cli_bundle(tmp_path, f"{name}-b")
        results[name] = (code_a == code_b == 0, a == b and len(a) > 0)
    ok = all(c and same for c, same in results.values())
    assert criterion(9, "byte-identical CSV bundles across invocations",
                     ok, ", ".join(f"{n}: {'identical' if s else 'DIFFERENT'}{'' if c else ' (nonzero exit)'}"
                                   for n, (c, s) in results.items()))
