"""Volatility models, payoffs and validation of the standing assumptions.

A model is a diffusion coefficient sigma that vanishes on (-inf, 0] and is
strictly positive on (0, inf).  Payoffs are continuous, nonnegative functions
of at most linear growth on [0, inf).
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np
from scipy import integrate

from .errors import GrowthViolation, NonFiniteEvaluation, ValidationError

ArrayLike = Union[float, Sequence[float], np.ndarray]

# Kernel codes understood by montecarlo.kernels.sigma_at.
CODE_POWER = 0
CODE_LOGPOWER = 1
CODE_TABLE = 2
CODE_ENVELOPE = 3


def _knot_arrays(knots, min_x_inclusive: bool = False) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(knots, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValidationError("a table needs at least two (x, value) knots")
    xs, ys = arr[:, 0].copy(), arr[:, 1].copy()
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValidationError("table knots must be finite")
    if np.any(np.diff(xs) <= 0):
        raise ValidationError("table knots must be strictly increasing in x")
    if xs[0] < 0 or (xs[0] == 0 and not min_x_inclusive):
        raise ValidationError("table knots must have x > 0" if not min_x_inclusive else "table knots must have x >= 0")
    if np.any(ys < 0):
        raise ValidationError("table values must be nonnegative")
    return xs, ys


def _pl_extend(xs: np.ndarray, ys: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation continued by the end slopes, clipped at 0."""
    out = np.interp(x, xs, ys)
    left = x < xs[0]
    if np.any(left):
        slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        out[left] = ys[0] + slope * (x[left] - xs[0])
    right = x > xs[-1]
    if np.any(right):
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        out[right] = ys[-1] + slope * (x[right] - xs[-1])
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# sigma kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerLaw:
    """sigma(x) = x**alpha."""

    alpha: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValidationError("PowerLaw.alpha must be a positive real")

    def _eval_pos(self, x):
        return x**self.alpha

    def to_dict(self):
        return {"kind": "power_law", "alpha": self.alpha}


@dataclass(frozen=True)
class LogCorrectedPower:
    """sigma(x) = x**alpha * log(e + x)**beta."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValidationError("LogCorrectedPower needs alpha > 0 and finite beta")

    def _eval_pos(self, x):
        return x**self.alpha * np.log(math.e + x) ** self.beta

    def to_dict(self):
        return {"kind": "log_corrected_power", "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class PiecewiseLinearTable:
    """Linear interpolation of (x, sigma) knots, extended by the end slopes."""

    knots: tuple

    def __post_init__(self):
        xs, ys = _knot_arrays(self.knots)
        object.__setattr__(self, "knots", tuple((float(a), float(b)) for a, b in zip(xs, ys)))
        object.__setattr__(self, "_xs", xs)
        object.__setattr__(self, "_ys", ys)

    def _eval_pos(self, x):
        return _pl_extend(self._xs, self._ys, x)

    def to_dict(self):
        return {"kind": "table", "knots": [list(k) for k in self.knots]}


@dataclass(frozen=True)
class Composite:
    """sigma(x) = scale * inner(x)."""

    scale: float
    inner: Any

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValidationError("Composite.scale must be a positive real")
        if isinstance(self.inner, VolatilityModel):
            object.__setattr__(self, "inner", self.inner.kind)

    def _eval_pos(self, x):
        return self.scale * self.inner._eval_pos(x)

    def to_dict(self):
        return {"kind": "composite", "scale": self.scale, "inner": self.inner.to_dict()}


@dataclass(frozen=True)
class EnvelopeSigma:
    """sigma_n = f_n**-1/2 for a piecewise-linear envelope f_n on [xs[0], xs[-1]].

    Left of the window sigma_n descends linearly to 0 at x = 0; right of it,
    sigma_n stays at its value at the right window edge.
    """

    xs: np.ndarray = field(repr=False)
    fs: np.ndarray = field(repr=False)

    def __post_init__(self):
        xs = np.ascontiguousarray(self.xs, dtype=float)
        fs = np.ascontiguousarray(self.fs, dtype=float)
        if xs.ndim != 1 or xs.shape != fs.shape or xs.size < 2 or xs[0] <= 0:
            raise ValidationError("envelope needs matching knot/value arrays on x > 0")
        if np.any(fs <= 0) or not np.all(np.isfinite(fs)):
            raise ValidationError("envelope values must be positive and finite")
        xs.setflags(write=False)
        fs.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "fs", fs)

    def __hash__(self):
        return hash((self.xs.tobytes(), self.fs.tobytes()))

    def __eq__(self, other):
        return (
            isinstance(other, EnvelopeSigma)
            and np.array_equal(self.xs, other.xs)
            and np.array_equal(self.fs, other.fs)
        )

    def _eval_pos(self, x):
        a, b = self.xs[0], self.xs[-1]
        out = 1.0 / np.sqrt(np.interp(x, self.xs, self.fs))
        left = x < a
        out[left] = x[left] / (a * math.sqrt(self.fs[0]))
        return out

    def to_dict(self):
        return {"kind": "envelope", "xs": self.xs.tolist(), "fs": self.fs.tolist()}


SigmaKind = Union[PowerLaw, LogCorrectedPower, PiecewiseLinearTable, Composite, EnvelopeSigma]


@dataclass
class VolatilityModel:
    """A diffusion coefficient with optional metadata.

    ``verdict_cache`` holds the martingality report once it has been computed;
    it is written once, before any concurrent use of the model.
    """

    kind: SigmaKind
    holder_exponent_hint: float | None = None
    verdict_cache: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        h = self.holder_exponent_hint
        if h is not None and not (0 < h <= 1):
            raise ValidationError("holder_exponent_hint must lie in (0, 1]")

    def __call__(self, x: ArrayLike):
        return evaluate_sigma(self, x)

    def sigma(self, x: ArrayLike):
        return evaluate_sigma(self, x)

    def inv_sigma2(self, x: ArrayLike):
        """1/sigma(x)**2, +inf where sigma vanishes."""
        s = np.asarray(evaluate_sigma(self, x), dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            out = 1.0 / (s * s)
        return out if out.ndim else float(out)

    def kernel_spec(self) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
        """Flatten the model into (code, params, xs, ys) for the compiled kernels.

        params = [alpha, beta, scale, 0]; xs/ys carry table or envelope knots.
        """
        scale = 1.0
        kind = self.kind
        while isinstance(kind, Composite):
            scale *= kind.scale
            kind = kind.inner
        empty = np.zeros(2)
        if isinstance(kind, PowerLaw):
            return CODE_POWER, np.array([kind.alpha, 0.0, scale, 0.0]), empty, empty
        if isinstance(kind, LogCorrectedPower):
            return CODE_LOGPOWER, np.array([kind.alpha, kind.beta, scale, 0.0]), empty, empty
        if isinstance(kind, PiecewiseLinearTable):
            return CODE_TABLE, np.array([0.0, 0.0, scale, 0.0]), kind._xs.copy(), kind._ys.copy()
        if isinstance(kind, EnvelopeSigma):
            return CODE_ENVELOPE, np.array([0.0, 0.0, scale, 0.0]), kind.xs.copy(), kind.fs.copy()
        raise ValidationError(f"unsupported sigma kind {type(kind).__name__}")

    def to_dict(self) -> dict:
        d = self.kind.to_dict()
        if self.holder_exponent_hint is not None:
            d["holder_exponent_hint"] = self.holder_exponent_hint
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def label(self) -> str:
        return _kind_label(self.kind)


def _kind_label(kind) -> str:
    if isinstance(kind, PowerLaw):
        return f"x^{kind.alpha:g}"
    if isinstance(kind, LogCorrectedPower):
        return f"x^{kind.alpha:g}*log(e+x)^{kind.beta:g}"
    if isinstance(kind, PiecewiseLinearTable):
        return f"table[{len(kind.knots)}]"
    if isinstance(kind, Composite):
        return f"{kind.scale:g}*({_kind_label(kind.inner)})"
    return f"envelope[{kind.xs.size}]"


def evaluate_sigma(model: VolatilityModel, x: ArrayLike):
    """sigma(x); 0 for x <= 0.  Scalars in, float out; arrays in, arrays out."""
    xa = np.asarray(x, dtype=float)
    scalar = xa.ndim == 0
    xa = np.atleast_1d(xa)
    out = np.zeros_like(xa)
    pos = xa > 0
    if np.any(pos):
        with np.errstate(over="ignore", invalid="ignore"):
            out[pos] = model.kind._eval_pos(xa[pos])
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# payoffs
# ---------------------------------------------------------------------------


class Payoff:
    """Terminal function g on [0, inf) with |g(x)| <= K (1 + x)."""

    kind = "payoff"

    @property
    def growth_constant(self) -> float:
        raise NotImplementedError

    def _eval(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: ArrayLike):
        return evaluate_payoff(self, x)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Call(Payoff):
    strike: float
    kind = "call"

    def __post_init__(self):
        if not self.strike > 0:
            raise ValidationError("Call.strike must be positive")

    @property
    def growth_constant(self):
        return 1.0

    def _eval(self, x):
        return np.maximum(x - self.strike, 0.0)

    def to_dict(self):
        return {"kind": "call", "strike": self.strike}


@dataclass(frozen=True)
class Put(Payoff):
    strike: float
    kind = "put"

    def __post_init__(self):
        if not self.strike > 0:
            raise ValidationError("Put.strike must be positive")

    @property
    def growth_constant(self):
        return float(self.strike)

    def _eval(self, x):
        return np.maximum(self.strike - x, 0.0)

    def to_dict(self):
        return {"kind": "put", "strike": self.strike}


@dataclass(frozen=True)
class Identity(Payoff):
    kind = "identity"

    @property
    def growth_constant(self):
        return 1.0

    def _eval(self, x):
        return x.copy()

    def to_dict(self):
        return {"kind": "identity"}


@dataclass(frozen=True)
class Constant(Payoff):
    c: float
    kind = "constant"

    def __post_init__(self):
        if not (self.c >= 0 and math.isfinite(self.c)):
            raise ValidationError("Constant.c must be a nonnegative real")

    @property
    def growth_constant(self):
        # K must be positive; any K works for g = 0.
        return float(self.c) if self.c > 0 else 1.0

    def _eval(self, x):
        return np.full_like(x, self.c)

    def to_dict(self):
        return {"kind": "constant", "c": self.c}


@dataclass(frozen=True)
class TablePayoff(Payoff):
    """Piecewise-linear payoff through nonnegative knots, with a declared K."""

    knots: tuple
    declared_growth: float
    kind = "table"

    def __post_init__(self):
        xs, ys = _knot_arrays(self.knots, min_x_inclusive=True)
        if not self.declared_growth > 0:
            raise ValidationError("table payoff needs a positive growth_constant")
        object.__setattr__(self, "knots", tuple((float(a), float(b)) for a, b in zip(xs, ys)))
        object.__setattr__(self, "_xs", xs)
        object.__setattr__(self, "_ys", ys)
        K = self.declared_growth
        tail_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        check_x = np.concatenate([[0.0], xs])
        if np.any(self._eval(check_x) > K * (1 + check_x) * (1 + 1e-12)) or tail_slope > K:
            raise GrowthViolation("table payoff exceeds its declared growth bound K(1+x)")

    @property
    def growth_constant(self):
        return float(self.declared_growth)

    def _eval(self, x):
        return _pl_extend(self._xs, self._ys, x)

    def to_dict(self):
        return {"kind": "table", "knots": [list(k) for k in self.knots], "growth_constant": self.declared_growth}


@dataclass(frozen=True)
class Capped(Payoff):
    """min(inner(x), cap)."""

    inner: Payoff
    cap: float
    kind = "capped"

    def __post_init__(self):
        if not self.cap > 0:
            raise ValidationError("Capped.cap must be positive")

    @property
    def growth_constant(self):
        return self.inner.growth_constant

    def _eval(self, x):
        return np.minimum(self.inner._eval(x), self.cap)

    def to_dict(self):
        return {"kind": "capped", "cap": self.cap, "inner": self.inner.to_dict()}


@dataclass(frozen=True)
class Truncated(Payoff):
    """The level-n truncation g_n of an inner payoff g.

    g_n = (1 - 1/n) g on [0, n - 1/n], a linear ramp down to 0 on
    (n - 1/n, n), and 0 beyond n, then maximised with g_{n-1} so that
    the sequence is nondecreasing in n.  Built by ``pde.truncate_payoff``.
    """

    inner: Payoff
    n: int
    kind = "truncated"

    @property
    def growth_constant(self):
        return self.inner.growth_constant

    def _base(self, m: int, x: np.ndarray) -> np.ndarray:
        start = m - 1.0 / m
        g_start = (1 - 1.0 / m) * float(self.inner._eval(np.array([start]))[0])
        out = (1 - 1.0 / m) * self.inner._eval(x)
        ramp = (x > start) & (x < m)
        out[ramp] = g_start * (m - x[ramp]) * m
        out[x >= m] = 0.0
        return out

    def _eval(self, x):
        out = self._base(self.n, x)
        # Only the ramp of level ceil(x) can exceed the level-n base: lower
        # levels are (1 - 1/m) g <= (1 - 1/n) g there, or zero.
        m = np.ceil(x)
        cand = (m >= 2) & (m < self.n) & (x > m - 1.0 / np.maximum(m, 1.0))
        if np.any(cand):
            for level in np.unique(m[cand]).astype(int):
                sel = cand & (m == level)
                out[sel] = np.maximum(out[sel], self._base(level, x[sel]))
        return out

    def to_dict(self):
        return {"kind": "truncated", "n": self.n, "inner": self.inner.to_dict()}


def evaluate_payoff(payoff: Payoff, x: ArrayLike):
    """g(x) for x >= 0; scalar in, float out."""
    xa = np.asarray(x, dtype=float)
    scalar = xa.ndim == 0
    out = payoff._eval(np.atleast_1d(xa).astype(float))
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    h_prime_ok: bool
    standing_ok: bool
    sampled_points: list
    notes: str = ""


def validate_standing(model: VolatilityModel, probes: Sequence[float]) -> ValidationReport:
    """Check sigma > 0 on (0, inf), sigma = 0 on (-inf, 0], and local integrability of sigma^-2.

    The integrability probe integrates sigma^-2 over [p - r, p + r] with
    r = min(p/2, 0.1) at every positive probe p.  Integrability at a point
    cannot be decided from finitely many evaluations; this is a best-effort
    check on the supplied probes only.
    """
    probes = [float(p) for p in probes]
    if not probes:
        raise ValidationError("probes must be nonempty")
    if not all(math.isfinite(p) for p in probes):
        raise ValidationError("probe points must be finite")

    values = np.atleast_1d(evaluate_sigma(model, np.array(probes)))
    sampled = list(zip(probes, values.tolist()))
    bad = [p for p, s in sampled if not math.isfinite(s)]
    if bad:
        raise NonFiniteEvaluation(f"sigma is not finite at {bad}")

    notes = []
    standing_ok = True
    for p, s in sampled:
        if p > 0 and not s > 0:
            standing_ok = False
            notes.append(f"sigma({p:g}) = {s:g} but must be > 0")
        elif p <= 0 and s != 0:
            standing_ok = False
            notes.append(f"sigma({p:g}) = {s:g} but must vanish on x <= 0")

    h_prime_ok = True
    for p in probes:
        if p <= 0:
            continue
        r = min(p / 2, 0.1)
        if not _locally_integrable(model, p - r, p + r):
            h_prime_ok = False
            notes.append(f"sigma^-2 not integrable near {p:g}")

    return ValidationReport(h_prime_ok, standing_ok, sampled, "; ".join(notes))


def _locally_integrable(model: VolatilityModel, a: float, b: float) -> bool:
    def f(u):
        s = evaluate_sigma(model, u)
        return math.inf if s <= 0 else 1.0 / (s * s)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with np.errstate(all="ignore"):
            out = integrate.quad(f, a, b, epsabs=1e-10, epsrel=1e-8, limit=200, full_output=1)
    val, err = out[0], out[1]
    ier_ok = len(out) == 3  # a fourth element carries the failure message
    return ier_ok and math.isfinite(val) and math.isfinite(err)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------


def sigma_kind_from_dict(d: dict) -> SigmaKind:
    kind = d.get("kind")
    if kind == "power_law":
        return PowerLaw(float(d["alpha"]))
    if kind == "log_corrected_power":
        return LogCorrectedPower(float(d["alpha"]), float(d["beta"]))
    if kind == "table":
        return PiecewiseLinearTable(tuple(tuple(k) for k in d["knots"]))
    if kind == "composite":
        return Composite(float(d["scale"]), sigma_kind_from_dict(d["inner"]))
    if kind == "envelope":
        return EnvelopeSigma(np.asarray(d["xs"]), np.asarray(d["fs"]))
    raise ValidationError(f"unknown sigma kind {kind!r}")


def model_from_dict(d: dict) -> VolatilityModel:
    return VolatilityModel(sigma_kind_from_dict(d), holder_exponent_hint=d.get("holder_exponent_hint"))


def payoff_from_dict(d: dict, growth_constant: float | None = None) -> Payoff:
    kind = d.get("kind")
    if kind == "call":
        return Call(float(d["strike"]))
    if kind == "put":
        return Put(float(d["strike"]))
    if kind == "identity":
        return Identity()
    if kind == "constant":
        return Constant(float(d["c"]))
    if kind == "table":
        K = d.get("growth_constant", growth_constant)
        if K is None:
            raise ValidationError("table payoff needs a growth_constant")
        return TablePayoff(tuple(tuple(k) for k in d["knots"]), float(K))
    if kind == "capped":
        return Capped(payoff_from_dict(d["inner"], growth_constant), float(d["cap"]))
    if kind == "truncated":
        return Truncated(payoff_from_dict(d["inner"], growth_constant), int(d["n"]))
    raise ValidationError(f"unknown payoff kind {kind!r}")
