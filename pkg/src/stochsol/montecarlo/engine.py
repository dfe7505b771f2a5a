"""Monte Carlo estimators built on the compiled kernels.

Two schemes sample the absorbed diffusion: a time-changed Brownian motion
and a projected Euler scheme.  Paths are simulated in fixed-size chunks; each
chunk is folded into a ``PathBatchResult`` whose sums are exact, so merging
chunks in any order or grouping gives bit-identical estimators.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import stats

from ..errors import ClockOverflow, NonFiniteState, ValidationError
from ..model import Payoff, VolatilityModel, evaluate_payoff
from . import kernels as K

CHUNK = 1 << 16
DEFAULT_MAX_CLOCK_STEPS = 50_000_000

# Exact sums are integers in units of 2**-1074, the smallest subnormal.
_UNIT_BITS = 1074


class Scheme(str, Enum):
    TIME_CHANGE = "time_change"
    EULER = "euler"


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``substeps`` draws each step's increment as the normalised sum of that
    many stream normals; a run at ``dt`` with ``substeps=2`` then follows the
    same Brownian path as a run at ``dt/2`` with ``substeps=1``.

    ``step_control`` (Euler only) caps the diffusion move of one step at
    ``step_control * max(x, 1, x0)`` by splitting the step; 0 turns it off.
    ``max_clock_steps`` bounds the steps per path of either scheme.
    """

    t0: float
    x0: float
    T: float
    dt: float
    n_paths: int
    seed: int
    absorb_eps: float | None = None
    scheme: Scheme = Scheme.EULER
    substeps: int = 1
    max_clock_steps: int = DEFAULT_MAX_CLOCK_STEPS
    step_control: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.absorb_eps is None:
            object.__setattr__(self, "absorb_eps", 1e-8 * max(1.0, self.x0))
        h = self.T - self.t0
        if not (self.t0 >= 0 and math.isfinite(self.T) and h > 0):
            raise ValidationError("need 0 <= t0 < T")
        if not (self.x0 >= 0 and math.isfinite(self.x0)):
            raise ValidationError("x0 must be a finite nonnegative real")
        if not (self.dt > 0 and self.dt <= h / 10 * (1 + 1e-12)):
            raise ValidationError("dt must satisfy 0 < dt <= (T - t0)/10")
        if not (isinstance(self.n_paths, (int, np.integer)) and self.n_paths > 0):
            raise ValidationError("n_paths must be a positive integer")
        if not (0 <= int(self.seed) < 2**64):
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if not self.absorb_eps > 0:
            raise ValidationError("absorb_eps must be positive")
        if self.x0 > 0 and not self.absorb_eps < self.x0:
            raise ValidationError("absorb_eps must be below x0")
        if not (isinstance(self.substeps, (int, np.integer)) and self.substeps >= 1):
            raise ValidationError("substeps must be a positive integer")
        if not (self.step_control >= 0 and math.isfinite(self.step_control)):
            raise ValidationError("step_control must be a finite nonnegative real")

    @property
    def horizon(self) -> float:
        return self.T - self.t0

    @property
    def nsteps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed)


# ---------------------------------------------------------------------------
# exact accumulation
# ---------------------------------------------------------------------------


def exact_sum(values: np.ndarray) -> int:
    """Exact sum of a float64 array, as an integer in units of 2**-1074."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteState("non-finite value in an accumulated sample")
    hi = np.zeros(K.EXP_SLOTS, dtype=np.int64)
    lo = np.zeros(K.EXP_SLOTS, dtype=np.int64)
    K.exact_accumulate(v, hi, lo)
    total = 0
    for k in np.flatnonzero(hi | lo):
        mant = (int(hi[k]) << 26) + int(lo[k])
        sh = int(k) - K.EXP_OFFSET - 53 + _UNIT_BITS
        # subnormal mantissas carry at least -sh trailing zero bits
        total += mant << sh if sh >= 0 else mant >> -sh
    return total


def _to_float(acc: int) -> float:
    return acc / (1 << _UNIT_BITS)


def _std_err(n: int, acc1: int, acc2: int) -> float:
    if n < 2:
        return 0.0
    num = n * acc2 * (1 << _UNIT_BITS) - acc1 * acc1
    var = num / ((1 << (2 * _UNIT_BITS)) * n * (n - 1))
    return math.sqrt(max(var, 0.0) / n)


@dataclass(frozen=True)
class PathBatchResult:
    """Mergeable accumulator of a batch of paths.

    Sums are held exactly (``acc_*``, integers in units of 2**-1074) and
    exposed as floats through ``sum_g``, ``sum_g_sq``, ``sum_XT`` and
    ``sum_XT_sq``.  ``hits[i]`` counts paths whose running supremum reached
    ``betas[i]``.
    """

    n: int = 0
    n_absorbed: int = 0
    acc_g: int = 0
    acc_g_sq: int = 0
    acc_x: int = 0
    acc_x_sq: int = 0
    betas: tuple = ()
    hits: tuple = ()

    @classmethod
    def from_samples(cls, x, absorbed, g=None, sup=None, betas: Sequence[float] = ()):
        x = np.asarray(x, dtype=float)
        g = x if g is None else np.asarray(g, dtype=float)
        betas = tuple(float(b) for b in betas)
        hits = tuple(int(np.count_nonzero(sup >= b)) for b in betas) if betas else ()
        return cls(
            n=int(x.size),
            n_absorbed=int(np.count_nonzero(absorbed)),
            acc_g=exact_sum(g),
            acc_g_sq=exact_sum(g * g),
            acc_x=exact_sum(x),
            acc_x_sq=exact_sum(x * x),
            betas=betas,
            hits=hits,
        )

    def merge(self, other: "PathBatchResult") -> "PathBatchResult":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        if self.betas != other.betas:
            raise ValidationError("cannot merge batches with different barrier levels")
        return PathBatchResult(
            self.n + other.n,
            self.n_absorbed + other.n_absorbed,
            self.acc_g + other.acc_g,
            self.acc_g_sq + other.acc_g_sq,
            self.acc_x + other.acc_x,
            self.acc_x_sq + other.acc_x_sq,
            self.betas,
            tuple(a + b for a, b in zip(self.hits, other.hits)),
        )

    __add__ = merge

    @property
    def sum_g(self) -> float:
        return _to_float(self.acc_g)

    @property
    def sum_g_sq(self) -> float:
        return _to_float(self.acc_g_sq)

    @property
    def sum_XT(self) -> float:
        return _to_float(self.acc_x)

    @property
    def sum_XT_sq(self) -> float:
        return _to_float(self.acc_x_sq)

    @property
    def mean(self) -> float:
        return self.acc_g / ((1 << _UNIT_BITS) * self.n)

    @property
    def std_err(self) -> float:
        return _std_err(self.n, self.acc_g, self.acc_g_sq)

    @property
    def mean_XT(self) -> float:
        return self.acc_x / ((1 << _UNIT_BITS) * self.n)

    @property
    def std_err_XT(self) -> float:
        return _std_err(self.n, self.acc_x, self.acc_x_sq)

    @property
    def absorption_frequency(self) -> float:
        return self.n_absorbed / self.n


def merge_all(results) -> PathBatchResult:
    out = PathBatchResult()
    for r in results:
        out = out.merge(r)
    return out


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass
class TerminalSamples:
    x: np.ndarray
    absorbed: np.ndarray
    sup: np.ndarray


def _run_chunk(spec, cfg: SimConfig, first: int, count: int) -> TerminalSamples:
    code, prm, xs, ys = spec
    sig = K.sigma_function(code, prm)
    out_x = np.empty(count)
    out_abs = np.zeros(count, dtype=np.bool_)
    out_sup = np.empty(count)
    seed = np.uint64(int(cfg.seed))
    first_u = np.uint64(first)
    if cfg.scheme is Scheme.EULER:
        n = cfg.nsteps
        status, off = K.euler_paths(
            sig, prm, xs, ys, float(cfg.x0), n, cfg.horizon / n, int(cfg.substeps),
            float(cfg.absorb_eps), float(cfg.step_control), max(1.0, float(cfg.x0)),
            int(cfg.max_clock_steps), seed, first_u, out_x, out_abs, out_sup,
        )
    else:
        status, off = K.timechange_paths(
            sig, prm, xs, ys, float(cfg.x0), cfg.horizon, float(cfg.dt), int(cfg.substeps),
            float(cfg.absorb_eps), int(cfg.max_clock_steps), seed, first_u, out_x, out_abs, out_sup,
        )
    if status == K.ST_NONFINITE:
        raise NonFiniteState(f"path {first + off} left the finite range")
    if status == K.ST_CLOCK:
        raise ClockOverflow(
            f"path {first + off}: horizon not reached within {cfg.max_clock_steps} steps"
        )
    return TerminalSamples(out_x, out_abs, out_sup)


def _fold_chunk(spec, cfg, first, count, payoff, betas) -> PathBatchResult:
    s = _run_chunk(spec, cfg, first, count)
    g = None if payoff is None else _payoff_values(payoff, s.x)
    return PathBatchResult.from_samples(s.x, s.absorbed, g, s.sup, betas)


def _payoff_values(payoff: Payoff, x: np.ndarray) -> np.ndarray:
    g = np.asarray(evaluate_payoff(payoff, x), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteState("payoff is not finite on a terminal sample")
    return g


def _chunks(n_paths: int, chunk: int):
    return [(a, min(chunk, n_paths - a)) for a in range(0, n_paths, chunk)]


def simulate_samples(model: VolatilityModel, cfg: SimConfig, chunk: int = CHUNK, workers: int = 1) -> TerminalSamples:
    """Per-path terminal state, absorption flag and running supremum."""
    spec = model.kernel_spec()
    parts = _map(_run_chunk, [(spec, cfg, a, c) for a, c in _chunks(cfg.n_paths, chunk)], workers)
    return TerminalSamples(
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.absorbed for p in parts]),
        np.concatenate([p.sup for p in parts]),
    )


def simulate_terminal(
    model: VolatilityModel,
    cfg: SimConfig,
    payoff: Payoff | None = None,
    betas: Sequence[float] = (),
    chunk: int = CHUNK,
    workers: int = 1,
) -> PathBatchResult:
    """Fold ``n_paths`` paths into a ``PathBatchResult``.

    Without a payoff the g-sums equal the X_T sums.  The result does not
    depend on ``chunk`` or ``workers``.
    """
    spec = model.kernel_spec()
    betas = tuple(float(b) for b in betas)
    jobs = [(spec, cfg, a, c, payoff, betas) for a, c in _chunks(cfg.n_paths, chunk)]
    return merge_all(_map(_fold_chunk, jobs, workers))


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(fn, *j) for j in jobs]
        return [f.result() for f in futs]


def price(model: VolatilityModel, payoff: Payoff, cfg: SimConfig, workers: int = 1) -> tuple[float, float]:
    """Estimate of E[g(X_T)] and its standard error."""
    r = simulate_terminal(model, cfg, payoff, workers=workers)
    return r.mean, r.std_err


@dataclass
class DefectEstimate:
    defect: float
    std_err: float
    beta_curve: list = field(default_factory=list)
    batch: PathBatchResult | None = field(default=None, repr=False)


def defect(model: VolatilityModel, cfg: SimConfig, betas: Sequence[float], workers: int = 1) -> DefectEstimate:
    """x0 - E[X_T] together with beta * P(sup X >= beta before T)."""
    betas = [float(b) for b in betas]
    if any(b <= cfg.x0 for b in betas):
        raise ValidationError("every barrier level must exceed x0")
    if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValidationError("barrier levels must be increasing")
    r = simulate_terminal(model, cfg, None, betas, workers=workers)
    curve = []
    for b, h in zip(betas, r.hits):
        p = h / r.n
        curve.append((b, b * p, b * math.sqrt(p * (1 - p) / r.n)))
    return DefectEstimate(cfg.x0 - r.mean_XT, r.std_err_XT, curve, r)


@dataclass
class ProbeResult:
    t: float
    x: float
    kind: str
    estimate: float
    std_err: float
    reference: float
    gap: float


def boundary_continuity_probe(
    model: VolatilityModel,
    payoff: Payoff,
    T: float,
    probes: Sequence,
    dt: float = 1e-3,
    n_paths: int = 100_000,
    seed: int = 0,
    scheme: Scheme | str = Scheme.EULER,
) -> list[ProbeResult]:
    """Estimates of U near the parabolic boundary against the boundary data.

    Each probe is ``(t, x)`` or ``(t, x, kind)`` with kind ``"terminal"``
    (reference g(x)) or ``"lateral"`` (reference g(0)).  The step used at a
    probe is ``min(dt, (T - t)/10)``; all probes share one seed, so nearby
    probes use common random numbers.
    """
    out = []
    g0 = float(evaluate_payoff(payoff, 0.0))
    for pr in probes:
        t, x = float(pr[0]), float(pr[1])
        kind = pr[2] if len(pr) > 2 else "terminal"
        if kind not in ("terminal", "lateral"):
            raise ValidationError(f"unknown probe kind {kind!r}")
        if not (0 <= t <= T and x >= 0):
            raise ValidationError("probes must lie in [0, T] x [0, inf)")
        ref = float(evaluate_payoff(payoff, x)) if kind == "terminal" else g0
        if t >= T:
            est, se = float(evaluate_payoff(payoff, x)), 0.0
        elif x == 0.0:
            est, se = g0, 0.0
        else:
            cfg = SimConfig(t, x, T, min(dt, (T - t) / 10), n_paths, seed, scheme=scheme)
            est, se = price(model, payoff, cfg)
        out.append(ProbeResult(t, x, kind, est, se, ref, abs(est - ref)))
    return out


def ks_critical_value(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample Kolmogorov-Smirnov critical distance."""
    c = math.sqrt(-0.5 * math.log(alpha / 2))
    return c * math.sqrt((n + m) / (n * m))


def distribution_compare(model: VolatilityModel, cfgA: SimConfig, cfgB: SimConfig, workers: int = 1) -> float:
    """Two-sample KS distance between the terminal laws of two runs."""
    if (cfgA.t0, cfgA.x0, cfgA.T) != (cfgB.t0, cfgB.x0, cfgB.T):
        raise ValidationError("compared runs must share t0, x0 and T")
    a = simulate_samples(model, cfgA, workers=workers).x
    b = simulate_samples(model, cfgB, workers=workers).x
    return float(stats.ks_2samp(a, b).statistic)


def exit_price(
    model: VolatilityModel,
    payoff: Payoff,
    t: float,
    x: float,
    T: float,
    lo: float,
    hi: float,
    dt: float,
    n_paths: int,
    seed: int,
) -> tuple[float, float]:
    """E[g(X_{T ^ exit})] for Euler paths stopped on leaving (lo, hi)."""
    if not (0 < lo < hi):
        raise ValidationError("need 0 < lo < hi")
    code, prm, xs, ys = model.kernel_spec()
    sig = K.sigma_function(code, prm)
    nsteps = max(1, int(round((T - t) / dt)))
    total = PathBatchResult()
    for first, count in _chunks(n_paths, CHUNK):
        out_x = np.empty(count)
        out_e = np.zeros(count, dtype=np.int8)
        status, off = K.exit_paths(
            sig, prm, xs, ys, float(x), float(lo), float(hi), nsteps, (T - t) / nsteps,
            np.uint64(seed), np.uint64(first), out_x, out_e,
        )
        if status != K.ST_OK:
            raise NonFiniteState(f"path {first + off} left the finite range")
        g = _payoff_values(payoff, out_x)
        total = total.merge(PathBatchResult.from_samples(out_x, out_e != 0, g))
    return total.mean, total.std_err
