import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from conftest import BS_CALL_ATM, INV_BESSEL3_DEFECT, INV_BESSEL3_MEAN, combined, within
from stochsol.errors import ClockOverflow, ValidationError
from stochsol.model import Call, Capped, Constant, Identity, PowerLaw, VolatilityModel
from stochsol.montecarlo import (
    PathBatchResult,
    SimConfig,
    boundary_continuity_probe,
    defect,
    distribution_compare,
    exact_sum,
    ks_critical_value,
    merge_all,
    price,
    simulate_samples,
    simulate_terminal,
)
from stochsol.montecarlo import rng


def cfg(x0=1.0, dt=1e-3, n=20_000, seed=1, **kw):
    return SimConfig(0.0, x0, 1.0, dt, n, seed, **kw)


class TestPhilox:
    @pytest.mark.parametrize("seed, path", [(0, 0), (5, 9), (2**64 - 1, 123456789)])
    def test_matches_numpy_philox(self, seed, path):
        key = np.array([seed, path], dtype=np.uint64)
        ref = np.random.Philox(key=key).random_raw(40)
        # numpy increments the counter before its first block
        assert_array_equal(rng.philox_blocks(key[0], key[1], 1, 10).ravel(), ref)

    def test_normals_prefix_stable(self):
        a = rng.normals(3, 7, 1000)
        b = rng.normals(3, 7, 5000)
        assert_array_equal(a, b[:1000])

    def test_streams_differ(self):
        assert not np.array_equal(rng.normals(3, 7, 16), rng.normals(3, 8, 16))

    def test_normal_distribution(self):
        z = rng.normals(11, 0, 200_000)
        assert stats.kstest(z, "norm").pvalue > 1e-3
        assert abs(z.mean()) < 4 / math.sqrt(z.size)
        assert abs(z.var() - 1) < 0.02

    def test_uniforms_open_interval(self):
        u = rng.uniforms(1, 2, 100_000)
        assert u.min() > 0 and u.max() < 1
        assert stats.kstest(u, "uniform").pvalue > 1e-3


class TestSimConfig:
    def test_default_absorb_eps(self):
        assert cfg(x0=4.0).absorb_eps == 4e-8
        assert cfg(x0=0.5).absorb_eps == 1e-8

    @pytest.mark.parametrize(
        "kw",
        [dict(dt=0.2), dict(dt=0.0), dict(n=0), dict(x0=-1.0), dict(seed=-1),
         dict(absorb_eps=2.0), dict(substeps=0), dict(step_control=-0.1)],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValidationError):
            cfg(**kw)

    def test_rejects_bad_horizon(self):
        with pytest.raises(ValidationError):
            SimConfig(1.0, 1.0, 1.0, 1e-3, 10, 0)

    def test_scheme_from_string(self):
        assert cfg(scheme="time_change").scheme.value == "time_change"


class TestEngine:
    @pytest.mark.parametrize("scheme", ["euler", "time_change"])
    def test_zero_start_stays_absorbed(self, gbm, scheme):
        s = simulate_samples(gbm, SimConfig(0, 0.0, 1, 1e-2, 500, 0, scheme=scheme))
        assert np.all(s.x == 0) and np.all(s.absorbed)

    @pytest.mark.parametrize("scheme", ["euler", "time_change"])
    def test_nonnegative(self, sqrt_model, scheme):
        s = simulate_samples(sqrt_model, cfg(n=5000, scheme=scheme))
        assert np.all(s.x >= 0)
        assert np.all(s.x[s.absorbed] == 0)
        assert np.all(s.sup >= 1.0)

    @pytest.mark.parametrize("scheme", ["euler", "time_change"])
    def test_gbm_mean_one(self, gbm, scheme):
        r = simulate_terminal(gbm, cfg(n=100_000, seed=3, scheme=scheme))
        assert within(r.mean_XT, 1.0, r.std_err_XT)

    def test_sqrt_absorption_probability(self, sqrt_model):
        # P(X_T = 0) = exp(-2 x0 / T) for dX = sqrt(X) dW
        r = simulate_terminal(sqrt_model, cfg(n=100_000, seed=3))
        p = math.exp(-2)
        assert within(r.absorption_frequency, p, math.sqrt(p * (1 - p) / r.n))

    def test_time_change_absorption_bias_shrinks(self, sqrt_model):
        p = math.exp(-2)
        errs = [abs(simulate_terminal(sqrt_model, cfg(dt=dt, n=50_000, seed=4, scheme="time_change"))
                    .absorption_frequency - p) for dt in (1e-2, 1e-3)]
        assert errs[1] < errs[0]

    def test_constant_payoff_exact(self, gbm):
        est, se = price(gbm, Constant(2.5), cfg(n=3000))
        assert est == 2.5 and se == 0.0

    def test_gbm_call(self, gbm):
        est, se = price(gbm, Call(1.0), cfg(n=100_000, seed=5))
        assert within(est, BS_CALL_ATM, se)

    def test_cev_identity_below_start(self, cev2):
        est, se = price(cev2, Identity(), cfg(n=100_000, seed=6))
        assert within(est, INV_BESSEL3_MEAN, se, k=4)
        assert est < 1 - 3 * se

    def test_cap_consistency(self, gbm):
        c = cfg(n=20_000, seed=8)
        vals = [price(gbm, Capped(Identity(), M), c)[0] for M in (0.5, 1.0, 2.0, 4.0, 1e6)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == simulate_terminal(gbm, c).mean_XT

    def test_monotone_in_start_under_common_numbers(self, gbm):
        p = [price(gbm, Call(1.0), cfg(x0=x0, n=20_000, seed=9))[0] for x0 in (0.8, 0.9, 1.0, 1.1)]
        assert all(a < b for a, b in zip(p, p[1:]))

    def test_clock_overflow(self, gbm):
        with pytest.raises(ClockOverflow):
            simulate_terminal(gbm, cfg(n=10, max_clock_steps=50))
        with pytest.raises(ClockOverflow):
            simulate_terminal(gbm, cfg(n=10, max_clock_steps=50, scheme="time_change"))

    @pytest.mark.parametrize("scheme", ["euler", "time_change"])
    def test_substeps_follow_finer_path(self, gbm, scheme):
        a = simulate_samples(gbm, cfg(dt=2e-3, n=20_000, seed=12, substeps=2, scheme=scheme))
        b = simulate_samples(gbm, cfg(dt=1e-3, n=20_000, seed=12, scheme=scheme))
        assert np.corrcoef(a.x, b.x)[0, 1] > 0.95
        se = b.x.std() / math.sqrt(b.x.size)
        assert abs(a.x.mean() - b.x.mean()) < combined(se, se)

    def test_step_control_off_matches_on_for_gbm(self, gbm):
        # sqrt(dt) is below the control level, so no step is split
        a = simulate_samples(gbm, cfg(n=2000, step_control=0.0))
        b = simulate_samples(gbm, cfg(n=2000))
        assert_array_equal(a.x, b.x)


class TestDeterminism:
    def test_identical_seeds(self, gbm):
        a = simulate_terminal(gbm, cfg(n=5000, seed=42), Call(1.0))
        b = simulate_terminal(gbm, cfg(n=5000, seed=42), Call(1.0))
        assert a == b

    def test_seed_changes_result(self, gbm):
        assert simulate_terminal(gbm, cfg(n=5000, seed=1)) != simulate_terminal(gbm, cfg(n=5000, seed=2))

    @pytest.mark.parametrize("scheme", ["euler", "time_change"])
    def test_chunking_invariant(self, sqrt_model, scheme):
        c = cfg(n=5000, seed=7, scheme=scheme)
        a = simulate_terminal(sqrt_model, c, Call(1.0), betas=(2.0, 3.0))
        b = simulate_terminal(sqrt_model, c, Call(1.0), betas=(2.0, 3.0), chunk=777)
        assert a == b

    def test_workers_invariant(self, gbm):
        c = cfg(n=6000, seed=7)
        assert simulate_terminal(gbm, c, chunk=1024, workers=2) == simulate_terminal(gbm, c, chunk=1024)

    def test_path_prefix(self, gbm):
        a = simulate_samples(gbm, cfg(n=3000, seed=5))
        b = simulate_samples(gbm, cfg(n=1000, seed=5))
        assert_array_equal(a.x[:1000], b.x)


class TestMerge:
    def test_exact_sum_cancellation(self):
        v = np.array([1e300, 1.0, -1e300, 1e-300])
        assert exact_sum(v) == exact_sum(np.array([1.0, 1e-300]))

    def test_empty_is_identity(self):
        r = PathBatchResult.from_samples([1.0, 2.0], [False, False])
        assert PathBatchResult().merge(r) == r == r.merge(PathBatchResult())

    def test_mismatched_barriers(self):
        a = PathBatchResult.from_samples([1.0], [False], sup=np.array([1.0]), betas=(2.0,))
        b = PathBatchResult.from_samples([1.0], [False], sup=np.array([1.0]), betas=(3.0,))
        with pytest.raises(ValidationError):
            a.merge(b)

    def test_statistics(self):
        x = np.random.default_rng(0).exponential(size=1001)
        r = PathBatchResult.from_samples(x, x < 0.1)
        assert_allclose(r.mean, x.mean(), rtol=1e-14)
        assert_allclose(r.std_err, x.std(ddof=1) / math.sqrt(x.size), rtol=1e-12)
        assert r.n_absorbed == np.count_nonzero(x < 0.1)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(0, 1e6, allow_subnormal=True), min_size=3, max_size=60),
        st.randoms(use_true_random=False),
    )
    def test_split_invariance(self, xs, rnd):
        x = np.array(xs)
        betas = (1.0, 100.0)
        whole = PathBatchResult.from_samples(x, x == 0, np.sqrt(x), x, betas)
        cuts = sorted(rnd.sample(range(1, len(xs)), k=2))
        parts = [PathBatchResult.from_samples(x[a:b], x[a:b] == 0, np.sqrt(x[a:b]), x[a:b], betas)
                 for a, b in zip([0] + cuts, cuts + [len(xs)])]
        p, q, r = parts
        assert (p + q) + r == p + (q + r) == whole
        assert merge_all([r, p, q]) == whole


class TestDefect:
    def test_martingale_defect_zero(self, gbm):
        d = defect(gbm, cfg(n=100_000, seed=13), [4.0, 8.0, 16.0])
        assert within(d.defect, 0.0, d.std_err)
        assert d.beta_curve[-1][1] < d.beta_curve[0][1]

    @pytest.mark.parametrize("beta", [1.01, 2.0, 4.0])
    def test_maximal_inequality(self, cev2, beta):
        d = defect(cev2, cfg(n=50_000, seed=14), [beta])
        b, v, se = d.beta_curve[0]
        assert v <= 1.0 + 3 * se

    def test_supermartingale(self, cev2, sqrt_model):
        for m in (cev2, sqrt_model):
            d = defect(m, cfg(n=50_000, seed=15), [2.0])
            assert d.defect >= -3 * d.std_err

    @pytest.mark.slow
    def test_fine_euler_matches_inverse_bessel(self, cev2):
        d = defect(cev2, cfg(dt=1e-5, n=100_000, seed=5, scheme="euler"), [4.0])
        assert within(d.defect, INV_BESSEL3_DEFECT, d.std_err)

    def test_barrier_validation(self, gbm):
        with pytest.raises(ValidationError):
            defect(gbm, cfg(n=10), [0.5])
        with pytest.raises(ValidationError):
            defect(gbm, cfg(n=10), [4.0, 2.0])


class TestProbesAndKS:
    def test_exact_probes(self, sqrt_model):
        g = Call(1.0)
        res = boundary_continuity_probe(sqrt_model, g, 1.0, [(1.0, 1.7), (0.3, 0.0, "lateral")])
        assert res[0].estimate == 0.7 and res[0].gap == 0.0
        assert res[1].estimate == 0.0 and res[1].gap == 0.0

    def test_near_terminal_gap_small(self, sqrt_model):
        (r,) = boundary_continuity_probe(sqrt_model, Call(1.0), 1.0, [(1.0 - 1e-3, 2.0)], n_paths=20_000)
        assert r.gap < 5 * r.std_err + 1e-3

    def test_bad_probe_kind(self, gbm):
        with pytest.raises(ValidationError):
            boundary_continuity_probe(gbm, Call(1.0), 1.0, [(0.5, 1.0, "side")])

    def test_identical_runs_zero_distance(self, gbm):
        c = cfg(n=2000, seed=3)
        assert distribution_compare(gbm, c, c) == 0.0

    def test_critical_value(self):
        assert_allclose(ks_critical_value(100_000, 100_000), 1.6276 * math.sqrt(2e-5), rtol=1e-3)

    def test_mismatched_runs(self, gbm):
        with pytest.raises(ValidationError):
            distribution_compare(gbm, cfg(n=10), cfg(x0=2.0, n=10))

    def test_independent_seeds_pass(self, gbm):
        d = distribution_compare(gbm, cfg(n=20_000, seed=1), cfg(n=20_000, seed=2))
        assert d < ks_critical_value(20_000, 20_000)


def test_combined_helper():
    assert combined(3.0, 4.0) == 5.0
