"""End-to-end acceptance gate; each test prints one pass/fail line in the summary."""

import itertools
import math
import random
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from supdirect import direct
from supdirect.harness import Scenario, load_scenario, read_events, run_scenario, static_cost
from supdirect.integrate import FunctionField, rk4_step, simulate
from supdirect.neural_mass import NeuralMassModel, output
from supdirect.supervisor import monitor_update

from .helpers import random_partition

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def integer_tiling_ok(part):
    """Volume sum and pairwise disjointness on a common integer base-3 grid."""
    rects = list(part.rects.values())
    n_p = part.n_p
    J = max(max(r.side_exponents) for r in rects)
    boxes = []
    cells = 0
    for r in rects:
        box = []
        vol = 1
        for a, j in zip(r.lo, r.side_exponents):
            s = 3 ** (J - j)
            box.append((a * s, (a + 1) * s))
            vol *= s
        boxes.append(box)
        cells += vol
    if cells != 3 ** (n_p * J):
        return False
    for b1, b2 in itertools.combinations(boxes, 2):
        if all(lo1 < hi2 and lo2 < hi1 for (lo1, hi1), (lo2, hi2) in zip(b1, b2)):
            return False
    return True


def test_criterion_1_tiling(criterion):
    rng = random.Random(20240601)
    start = time.perf_counter()
    bad = 0
    for _ in range(1000):
        part = random_partition(rng, rng.choice([1, 2, 3]), rng.randint(1, 10), 1e-5)
        bad += not integer_tiling_ok(part)
        bad += sum((r.volume for r in part.rects.values()), Fraction(0)) != 1
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 10
    criterion(ok, f"1000 sequences, failures={bad}, {elapsed:.2f}s (< 10s)")
    assert ok


def test_criterion_2_oracle_equivalence(criterion):
    rng = random.Random(7)
    mismatches = 0
    for eps in (0.0, 1e-5, 1e-3):
        for _ in range(100):
            part = random_partition(rng, rng.choice([1, 2, 3]), rng.randint(1, 12), eps, max_rects=50)
            assert len(part.rects) <= 50
            mismatches += direct.identify_potentially_optimal(part) != direct.potentially_optimal_oracle(part)
    criterion(mismatches == 0, f"300 partitions, mismatches={mismatches}")
    assert mismatches == 0


# 5x5 product grid whose axes avoid the symmetry lines p1 = p2, p1 + p2 = 1 and p_d = 1/2
GRID_2D = list(itertools.product((0.07, 0.29, 0.51, 0.73, 0.95), (0.12, 0.34, 0.56, 0.78, 0.99)))
GRID_1D = [(float(v),) for v in np.linspace(0.03, 0.97, 25)]


def test_criterion_3_coverage(criterion):
    start = time.perf_counter()
    worst = {}
    for n_p, grid in ((1, GRID_1D), (2, GRID_2D)):
        for d_star in (0.5, 0.1):
            k = direct.termination_iterations(n_p, d_star)
            for p in grid:
                part = direct.run_static(static_cost("sphere", p), n_p, k)
                d = direct.min_distance_to_samples(p, part.sample_points())
                worst[(n_p, d_star)] = max(worst.get((n_p, d_star), 0.0), d / d_star)
    elapsed = time.perf_counter() - start
    ok = all(v <= 1.0 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"n_p={n} d*={d}: max dist/d*={v:.3g}" for (n, d), v in sorted(worst.items()))
    criterion(ok, f"{detail}; {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_4_density(criterion):
    budgets = {}
    ok = True
    for name in ("constant", "opposite-corner"):
        for p in ((0.3, 0.7), (0.37, 0.71), (0.83, 0.12)):
            part = direct.init_partition(2)
            cost = static_cost(name, p)
            prev = math.inf
            for k in range(1, 2001):
                direct.direct_iteration(part, direct.evaluate_pending(part, cost))
                d = direct.min_distance_to_samples(p, part.sample_points())
                ok &= d <= prev
                prev = d
                if d < 0.05:
                    break
            ok &= prev < 0.05
            budgets[(name, p)] = k
    worst = {name: max(v for (n, _), v in budgets.items() if n == name) for name in ("constant", "opposite-corner")}
    ok &= max(worst.values()) <= 2000
    criterion(ok, f"iterations to reach 0.05: constant={worst['constant']}, "
                  f"opposite-corner={worst['opposite-corner']} (budget 2000)")
    assert ok


def test_criterion_5_integrator_order(criterion):
    decay = FunctionField(lambda x, t, u: -x, 1)

    def err(dt):
        return abs(simulate(decay, [1.0], 0.0, 1.0, dt).signals["x"][-1, 0] - math.exp(-1.0))

    ratio = err(0.1) / err(0.05)
    ok = 12 <= ratio <= 20
    criterion(ok, f"error ratio {ratio:.3f} in [12, 20]")
    assert ok


def test_criterion_6_monitor_exactness(criterion):
    lam, dt = 0.05, 1e-3
    decay = math.exp(-lam * dt)
    mu = 1.0
    worst_ulps = 0.0
    for _ in range(10000):
        new = monitor_update(mu, 0.0, lam, dt)
        worst_ulps = max(worst_ulps, abs(new - mu * decay) / math.ulp(mu * decay))
        mu = new
    c = 0.3
    acc = 0.0
    for _ in range(round(5 / lam / dt)):
        acc = monitor_update(acc, math.sqrt(c), lam, dt)
    rel = abs(acc - c / lam) / (c / lam)
    ok = worst_ulps <= 1 and rel <= 0.01
    criterion(ok, f"zero-error decay within {worst_ulps:g} ulp; mu(5/lam)=c/lam*(1-{rel:.4f})")
    assert ok


def matched_error_trace(scenario: Scenario, horizon: float):
    model = NeuralMassModel(gains=scenario.make_gains())
    p = np.asarray(scenario.p_star, dtype=float)

    def stacked(Z, t, u):
        y = output(Z[0])
        return np.vstack([model.plant(Z[0], p, u), model.observer(Z[1], p, u, y)])

    fld = FunctionField(stacked, 6)
    u = scenario.make_input()
    Z = np.vstack([scenario.x0, scenario.xhat0]).astype(float)
    n = round(horizon / scenario.dt)
    errs = np.empty(n + 1)
    peak = np.empty(n + 1)
    errs[0] = np.max(np.abs(Z[1] - Z[0]))
    peak[0] = np.max(np.abs(Z[0]))
    for i in range(n):
        Z = rk4_step(fld, Z, i * scenario.dt, scenario.dt, u)
        errs[i + 1] = np.max(np.abs(Z[1] - Z[0]))
        peak[i + 1] = np.max(np.abs(Z[0]))
    return errs, peak


def test_criterion_7_matched_contraction(criterion):
    parts = []
    ok = True
    for cfg in ("flagship.toml", "offgrid.toml"):
        sc = load_scenario(CONFIGS / cfg)
        errs, peak = matched_error_trace(sc, sc.t_f)
        n_settle = round(sc.settle_time / sc.dt)
        ratio = errs[n_settle] / errs[0]
        flagged = bool(np.any(peak > sc.state_bound))
        ok &= ratio < 1e-3 and not flagged
        parts.append(f"{cfg}: |e(T_settle)|/|e(0)|={ratio:.2e}, max|x|={peak.max():.0f} <= {sc.state_bound:g}")
    criterion(ok, "; ".join(parts))
    assert ok


@pytest.fixture(scope="module")
def flagship(tmp_path_factory):
    sc = load_scenario(CONFIGS / "flagship.toml")
    start = time.perf_counter()
    res = run_scenario(sc, tmp_path_factory.mktemp("flagship_a"))
    return res, time.perf_counter() - start


@pytest.fixture(scope="module")
def offgrid(tmp_path_factory):
    sc = load_scenario(CONFIGS / "offgrid.toml")
    start = time.perf_counter()
    res = run_scenario(sc, tmp_path_factory.mktemp("offgrid"))
    return res, time.perf_counter() - start


def test_criterion_8_end_to_end(criterion, flagship, offgrid):
    parts = []
    ok = True
    for label, (res, elapsed) in (("flagship", flagship), ("offgrid", offgrid)):
        m = res.metrics
        n0 = res.supervisor.window_history[0]
        ok &= (m.final_param_error <= 0.5 and m.normalized_state_error <= 0.05
               and n0 == 5 and elapsed < 300 and res.supervisor.bound_exceeded_at is None)
        parts.append(f"{label}: |p_err|={m.final_param_error:.3g}, state={m.normalized_state_error:.3g}, "
                     f"T*={m.convergence_time}, avg N={m.average_observers:.3g}, "
                     f"N trace={res.supervisor.window_history}, {elapsed:.0f}s")
    criterion(ok, "; ".join(parts))
    assert ok


def test_criterion_9_termination(criterion, flagship):
    res, _ = flagship
    sup = res.supervisor
    t = res.stream["t"]
    after = t >= sup.cfg.k_star * sup.cfg.T_d - 1e-9
    n_obs = res.stream["n_obs"][after]
    p_hat = res.stream["p_hat"][after]
    _, events = read_events(res.output_dir / "events.log")
    switch = [e for e in events if e.get("transition") == "multi->single"]
    ok = (bool(np.all(n_obs == 1)) and bool(np.all(p_hat == p_hat[0])) and sup.n_obs == 1
          and len(switch) == 1 and switch[0]["k"] == sup.cfg.k_star)
    criterion(ok, f"k*={sup.cfg.k_star}: {after.sum()} steps after k*T_d with N=1 and constant p_hat={p_hat[0].tolist()}")
    assert ok


def test_criterion_10_determinism(criterion, flagship, tmp_path):
    res, _ = flagship
    run_scenario(load_scenario(CONFIGS / "flagship.toml"), tmp_path)
    same = {name: (tmp_path / name).read_bytes() == (res.output_dir / name).read_bytes()
            for name in ("trajectory.csv", "events.log")}
    ok = all(same.values())
    criterion(ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
