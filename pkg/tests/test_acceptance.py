"""End-to-end acceptance checks, one test and one PASS/FAIL line per criterion."""

import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BS_CALL_ATM, INV_BESSEL3_DEFECT, combined, record, rough_table_knots
from stochsol.analysis import Verdict, classify_martingality, ds02_partial, feller_v1_partial
from stochsol.approx import CONDITIONS, build_ladder, certify_ladder
from stochsol.export import write_csv
from stochsol.model import (
    Call,
    Identity,
    LogCorrectedPower,
    PiecewiseLinearTable,
    PowerLaw,
    VolatilityModel,
)
from stochsol.montecarlo import (
    PathBatchResult,
    SimConfig,
    boundary_continuity_probe,
    defect,
    distribution_compare,
    ks_critical_value,
    price,
    simulate_samples,
    simulate_terminal,
)
from stochsol.pde import TruncatedProblem, comparison_check, limit_ladder, solve_truncated, truncate_payoff

GBM = VolatilityModel(PowerLaw(1.0))
CEV2 = VolatilityModel(PowerLaw(2.0))
SQRT = VolatilityModel(PowerLaw(0.5))
LADDER_LEVELS = [8, 16, 32, 64, 128, 256, 512, 1024]
LADDER_CAPS = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0]

# The coarse runs draw each step's increment from two stream normals, so the
# halved-step runs of the robustness check follow the same Brownian paths.
MC_PATHS, MC_DT, MC_SEED = 1_000_000, 1e-3, 2024
DEFECT_PATHS, DEFECT_DT, DEFECT_SEED = 400_000, 2.5e-4, 77
BETAS = [4.0, 8.0, 16.0, 32.0]


def timed(fn, *a, **kw):
    t = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t


@pytest.fixture(scope="module")
def call_runs():
    runs = {}
    for scheme in ("time_change", "euler"):
        cfg = SimConfig(0.0, 1.0, 1.0, MC_DT, MC_PATHS, MC_SEED, scheme=scheme, substeps=2)
        runs[scheme] = timed(price, GBM, Call(1.0), cfg)
    return runs


@pytest.fixture(scope="module")
def defect_run():
    cfg = SimConfig(0.0, 1.0, 1.0, DEFECT_DT, DEFECT_PATHS, DEFECT_SEED, substeps=2)
    return timed(defect, CEV2, cfg, BETAS)


def test_criterion_01_classifier():
    expected = {0.5: Verdict.MARTINGALE, 0.8: Verdict.MARTINGALE, 1.0: Verdict.MARTINGALE,
                1.2: Verdict.STRICT_LOCAL, 1.5: Verdict.STRICT_LOCAL, 2.0: Verdict.STRICT_LOCAL}
    wrong, slowest = [], 0.0
    for alpha, want in expected.items():
        rep, dt = timed(classify_martingality, VolatilityModel(PowerLaw(alpha)), cache=False)
        slowest = max(slowest, dt)
        if rep.verdict is not want:
            wrong.append((alpha, rep.verdict.value))
    ok = not wrong and slowest < 1.0
    assert record(1, "martingality classifier", ok, f"misclassified={wrong} slowest={slowest:.3f}s")


def test_criterion_02_feller_sandwich():
    worst = math.inf
    t = time.perf_counter()
    for alpha in (1.5, 2.0):
        m = VolatilityModel(PowerLaw(alpha))
        for b in (2.0, 10.0, 100.0, 1e3, 1e4, 1e6):
            d = ds02_partial(m, b)
            h = 0.5 * feller_v1_partial(m, b / (1 + b))
            worst = min(worst, h * (1 + 1e-6) - d, 2 * d * (1 + 1e-6) - h)
    elapsed = time.perf_counter() - t
    ok = worst >= 0 and elapsed < 1.0
    assert record(2, "Feller sandwich", ok, f"min slack={worst:.3g} runtime={elapsed:.3f}s")


def test_criterion_03_feynman_kac(call_runs):
    t = time.perf_counter()
    lad = limit_ladder(GBM, Call(1.0), 0.0, 1.0, LADDER_LEVELS, LADDER_CAPS, nx=800, nt=800)
    pde_time = time.perf_counter() - t
    pde_err = abs(lad.converged_value - BS_CALL_ATM)
    parts = [f"pde err={pde_err:.2e}"]
    ok = pde_err < 2e-3
    total = pde_time
    for scheme, ((est, se), dt) in call_runs.items():
        total += dt
        ok &= abs(est - BS_CALL_ATM) <= 3 * se
        parts.append(f"{scheme} z={(est - BS_CALL_ATM) / se:+.2f}")
    ok &= total < 120
    assert record(3, "Feynman-Kac cross-validation", ok, " ".join(parts) + f" runtime={total:.0f}s")


def test_criterion_04_defect(defect_run):
    d, elapsed = defect_run
    z = (d.defect - INV_BESSEL3_DEFECT) / d.std_err
    ok = abs(z) <= 3 and elapsed < 300
    # distances to the estimated defect shrink with beta, up to two error bars
    dist = [(abs(v - d.defect), combined(se, d.std_err)) for _, v, se in d.beta_curve]
    monotone = all(e2 <= e1 + 2 * combined(s1, s2) for (e1, s1), (e2, s2) in zip(dist, dist[1:]))
    ok &= monotone and dist[-1][0] < dist[0][0]
    curve = " ".join(f"{v:.4f}" for _, v, _ in d.beta_curve)
    assert record(4, "strict-local defect", ok,
                  f"defect={d.defect:.5f} z={z:+.2f} curve=[{curve}] runtime={elapsed:.0f}s")


def test_criterion_05_identity_dichotomy():
    cfg = SimConfig(0.0, 1.0, 1.0, 1e-3, 100_000, 5)
    m1, s1 = price(GBM, Identity(), cfg)
    m2, s2 = price(CEV2, Identity(), cfg)
    ok = abs(m1 - 1.0) <= 3 * s1 and (1.0 - m2) > 3 * s2
    assert record(5, "identity dichotomy", ok,
                  f"x: {m1:.4f}+-{s1:.4f}  x^2: {m2:.4f}+-{s2:.4f}")


def test_criterion_06_boundary_continuity():
    g = Call(1.0)
    probes = [(1.0 - 2.0**-k, 1.0) for k in range(1, 7)]
    res = boundary_continuity_probe(SQRT, g, 1.0, probes, dt=1e-3, n_paths=100_000, seed=6)
    gaps = [(r.gap, r.std_err) for r in res]
    ok = all(g2 <= g1 + 2 * combined(s1, s2) for (g1, s1), (g2, s2) in zip(gaps, gaps[1:]))
    exact = boundary_continuity_probe(SQRT, g, 1.0, [(1.0, 1.7), (1.0, 0.0), (0.5, 0.0, "lateral")])
    ok &= [r.estimate for r in exact] == [0.7, 0.0, 0.0] and all(r.gap == 0.0 for r in exact)
    assert record(6, "boundary continuity", ok, "gaps=[" + " ".join(f"{g:.4f}" for g, _ in gaps) + "]")


def test_criterion_07_approximation_ladder():
    t = time.perf_counter()
    rep = certify_ladder(build_ladder(GBM, 10), [(0.5, 2.0), (0.25, 4.0)], raise_on_failure=False)
    rough = VolatilityModel(PiecewiseLinearTable(tuple(map(tuple, rough_table_knots()))))
    env = build_ladder(rough, 10)
    lad = limit_ladder(rough, Call(1.0), 0.0, 1.0, LADDER_LEVELS, LADDER_CAPS, tol=1e-3, nx=800, nt=400,
                       sigma_for_level=env.sigma_for_pde_level)
    elapsed = time.perf_counter() - t
    err = abs(lad.converged_value - BS_CALL_ATM)
    ok = rep.passed and all(rep.worst[c] > 0 for c in CONDITIONS) and err < 5e-3 and elapsed < 300
    margins = " ".join(f"{c}={rep.worst[c]:.2g}" for c in CONDITIONS)
    assert record(7, "approximation ladder", ok, f"{margins} rough err={err:.2e} runtime={elapsed:.1f}s")


def test_criterion_08_comparison():
    ok = True
    worst_pass = worst_cn = -math.inf
    for m in (GBM, VolatilityModel(LogCorrectedPower(1.0, 0.5))):
        for n in (4, 8, 16):
            # fully implicit steps keep the scheme monotone at any mesh ratio
            sub = solve_truncated(TruncatedProblem(n + 1, truncate_payoff(Call(1.0), n), m), 400, 400, theta=1.0)
            sup = solve_truncated(TruncatedProblem(n + 1, truncate_payoff(Call(1.0), n + 1), m), 400, 400,
                                  theta=1.0)
            r = comparison_check(sub, sup, m, 1e-6)
            ok &= r.passed
            worst_pass = max(worst_pass, r.worst_violation)
            cn = [solve_truncated(TruncatedProblem(n + 1, truncate_payoff(Call(1.0), k), m), 400, 400)
                  for k in (n, n + 1)]
            worst_cn = max(worst_cn, comparison_check(*cn, m, 1e-6).worst_violation)
    sub = solve_truncated(TruncatedProblem(8, Call(1.0), GBM), 400, 400)
    sup = solve_truncated(TruncatedProblem(8, lambda x: Call(1.0)(x) - 1.0, GBM), 400, 400)
    neg = comparison_check(sub, sup, GBM, 1e-6)
    ok &= (not neg.passed) and abs(neg.worst_violation - 1.0) < 1e-3 and neg.worst_node[0] == 1.0
    assert record(8, "comparison principle", ok,
                  f"nested worst={worst_pass:.2e} (crank-nicolson {worst_cn:.2e}) control worst={neg.worst_violation:.4f} at t={neg.worst_node[0]}")


def test_criterion_09_engine_consistency():
    n, dt = 100_000, 1e-4
    crit = ks_critical_value(n, n, 0.01)
    parts, ok = [], True
    for name, m in (("x", GBM), ("sqrt", SQRT)):
        a = SimConfig(0.0, 1.0, 1.0, dt, n, 91, scheme="time_change")
        b = SimConfig(0.0, 1.0, 1.0, dt, n, 92, scheme="euler")
        d = distribution_compare(m, a, b)
        ok &= d < crit
        parts.append(f"{name} D={d:.4f}")
    assert record(9, "engine consistency", ok, " ".join(parts) + f" critical={crit:.4f}")


def test_criterion_10_determinism_and_merge():
    cfg = SimConfig(0.0, 1.0, 1.0, 1e-2, 20_000, 123)
    outs = []
    for _ in range(2):
        s = simulate_samples(SQRT, cfg)
        outs.append(s.x.tobytes() + s.absorbed.tobytes() + s.sup.tobytes())
    same = outs[0] == outs[1]
    a = simulate_terminal(SQRT, cfg, Call(1.0), betas=(2.0,))
    b = simulate_terminal(SQRT, cfg, Call(1.0), betas=(2.0,), chunk=999)
    same &= a == b

    count = [0]

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.lists(st.floats(0, 1e4), min_size=2, max_size=40), st.data())
    def merge_laws(xs, data):
        count[0] += 1
        x = np.array(xs)
        k = data.draw(st.integers(1, len(xs) - 1))
        j = data.draw(st.integers(0, k))
        parts = [x[:j], x[j:k], x[k:]]
        res = [PathBatchResult.from_samples(p, p == 0, np.sqrt(p), p, (1.0,)) for p in parts]
        whole = PathBatchResult.from_samples(x, x == 0, np.sqrt(x), x, (1.0,))
        p, q, r = res
        assert (p + q) + r == p + (q + r) == whole
        assert q + p == p + q and r + (q + p) == whole

    merge_laws()
    ok = same and count[0] >= 1000
    assert record(10, "determinism and merge laws", ok, f"byte-identical={same} merge cases={count[0]}")


def test_criterion_10_csv_bytes(tmp_path):
    cfg = SimConfig(0.0, 1.0, 1.0, 1e-2, 5000, 9)
    files = []
    for i in range(2):
        s = simulate_samples(GBM, cfg)
        files.append(write_csv(tmp_path / f"run{i}.csv", ("x", "absorbed", "sup"), zip(s.x, s.absorbed, s.sup)))
    assert files[0].read_bytes() == files[1].read_bytes()


def test_criterion_11_robustness(call_runs, defect_run):
    parts, ok = [], True
    for scheme, ((est, se), _) in call_runs.items():
        fine = SimConfig(0.0, 1.0, 1.0, MC_DT / 2, MC_PATHS, MC_SEED, scheme=scheme, absorb_eps=5e-9)
        e2, s2 = price(GBM, Call(1.0), fine)
        r = abs(e2 - est) / combined(se, s2)
        ok &= r < 1
        parts.append(f"{scheme} {r:.2f}")
    d, _ = defect_run
    fine = SimConfig(0.0, 1.0, 1.0, DEFECT_DT / 2, DEFECT_PATHS, DEFECT_SEED, absorb_eps=5e-9)
    d2 = defect(CEV2, fine, [4.0])
    r = abs(d2.defect - d.defect) / combined(d.std_err, d2.std_err)
    ok &= r < 1
    parts.append(f"defect {r:.2f}")
    assert record(11, "discretization robustness", ok, "shift/bar: " + " ".join(parts))
