"""Martingality diagnostics and the special functions psi and Psi.

X is a true martingale exactly when the integral of x/sigma^2 over [1, inf)
diverges.  Divergence is not decidable from finitely many evaluations, so the
classifier is three-valued and driven by integrals over dyadic windows
[2^k, 2^(k+1)].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import InvariantViolation, QuadratureFailure, ValidationError
from .model import Composite, EnvelopeSigma, PiecewiseLinearTable, VolatilityModel, evaluate_sigma

EPSABS = 1e-10
EPSREL = 1e-8
QUAD_LIMIT = 200


_GL10 = np.polynomial.legendre.leggauss(10)
_GL5 = np.polynomial.legendre.leggauss(5)


def _gauss(f, lo: np.ndarray, hi: np.ndarray, rule) -> np.ndarray:
    t, w = rule
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    vals = np.asarray(f((mid[:, None] + half[:, None] * t[None, :]).ravel()), dtype=float)
    return half * (vals.reshape(lo.size, t.size) @ w)


def quad(f: Callable[[float], float], a: float, b: float, epsabs: float = EPSABS, epsrel: float = EPSREL,
         limit: int = QUAD_LIMIT, breaks=None) -> float:
    """Adaptive Gauss-Kronrod quadrature; raises QuadratureFailure instead of warning.

    With ``breaks`` (kinks of the integrand) inside (a, b), ``f`` must accept
    arrays: each smooth piece gets a 10-point Gauss rule, checked against a
    5-point rule, and pieces failing the check fall back to adaptive quadrature.
    """
    if a == b:
        return 0.0
    if breaks is not None:
        inner = np.asarray(breaks, dtype=float)
        inner = inner[(inner > min(a, b)) & (inner < max(a, b))]
        if inner.size:
            pts = np.concatenate([[a], np.sort(inner) if b > a else -np.sort(-inner), [b]])
            lo, hi = pts[:-1], pts[1:]
            with np.errstate(all="ignore"):
                g10 = _gauss(f, lo, hi, _GL10)
                g5 = _gauss(f, lo, hi, _GL5)
            bad = ~(np.abs(g10 - g5) <= np.maximum(epsabs / len(lo), epsrel * np.abs(g10)))
            total = float(np.sum(g10[~bad]))
            for i in np.flatnonzero(bad):
                total += quad(f, float(lo[i]), float(hi[i]), epsabs, epsrel, limit)
            return total
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with np.errstate(all="ignore"):
            out = integrate.quad(f, a, b, epsabs=epsabs, epsrel=epsrel, limit=limit, full_output=1)
    val, err = out[0], out[1]
    if not (math.isfinite(val) and math.isfinite(err)):
        raise QuadratureFailure(f"non-finite quadrature on [{a:g}, {b:g}]")
    if len(out) > 3 and err > 10 * max(epsabs, epsrel * abs(val)):
        raise QuadratureFailure(f"quadrature on [{a:g}, {b:g}] did not converge: {out[3].splitlines()[0]}")
    return val


def _dyadic_breaks(a: float, b: float) -> list[float]:
    """a, the powers of two strictly inside (a, b), then b."""
    pts = [a]
    k = math.floor(math.log2(a)) + 1
    while 2.0**k < b:
        pts.append(2.0**k)
        k += 1
    pts.append(b)
    return pts


def quad_dyadic(f, a: float, b: float, breaks=None) -> float:
    pts = _dyadic_breaks(a, b)
    return sum(quad(f, lo, hi, breaks=breaks) for lo, hi in zip(pts, pts[1:]))


def _kinks(model: VolatilityModel):
    """Knots of a piecewise-defined sigma, where 1/sigma^2 is not smooth; None otherwise."""
    kind = model.kind
    while isinstance(kind, Composite):
        kind = kind.inner
    if isinstance(kind, PiecewiseLinearTable):
        return kind._xs
    if isinstance(kind, EnvelopeSigma):
        return np.asarray(kind.xs, dtype=float)
    return None


def _inv_s2(model: VolatilityModel) -> Callable[[float], float]:
    """1/sigma^2 (inf where sigma vanishes) on scalars or arrays."""
    def g(u):
        s = np.asarray(evaluate_sigma(model, u), dtype=float)
        with np.errstate(divide="ignore"):
            r = np.where(s > 0, 1.0 / (s * s), math.inf)
        return float(r) if r.ndim == 0 else r

    return g


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


class Verdict(str, Enum):
    MARTINGALE = "martingale"
    STRICT_LOCAL = "strict_local_martingale"
    INCONCLUSIVE = "inconclusive"


@dataclass
class MartingalityReport:
    verdict: Verdict
    tail_partial_sums: list
    window_integrals: list = field(default_factory=list)
    feller_v1: float | str | None = None
    method_notes: str = ""

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "tail_partial_sums": [[b, v] for b, v in self.tail_partial_sums],
            "window_integrals": list(self.window_integrals),
            "feller_v1": self.feller_v1,
            "method_notes": self.method_notes,
        }


def window_integral(model: VolatilityModel, k: int) -> float:
    """Integral of x/sigma^2 over [2^k, 2^(k+1)], computed as 2^k * int_0^1 f(2^k (1+u)) du."""
    lo = 2.0**k
    inv = _inv_s2(model)

    def f(u):
        x = lo * (1.0 + u)
        return x * inv(x)

    k = _kinks(model)
    br = None if k is None else k / lo - 1.0
    return lo * quad(f, 0.0, 1.0, epsabs=0.0 if lo > 1 else EPSABS, epsrel=EPSREL, breaks=br)


def _ratio(a: float, b: float) -> float:
    # b / a with underflowed windows counted as converged
    if b == 0.0:
        return 0.0
    if a == 0.0:
        return math.inf
    return b / a


def _decay_test(seq: list[float], ratio: float, tol: float):
    """(passes ratio test, extrapolated tail, worst ratio) over the last half of seq."""
    h = len(seq) // 2
    tail = seq[len(seq) - h - 1:]
    rho = max(_ratio(a, b) for a, b in zip(tail, tail[1:]))
    if rho > ratio:
        return False, math.inf, rho
    return True, seq[-1] * rho / (1.0 - rho), rho


def _divergence_test(seq: list[float], keep: float = 0.9) -> bool:
    """(k+1) I_k stays above ``keep`` times its value at the start of the last half.

    This covers windows bounded below or growing, and also the harmonic
    decay I_k ~ c/k whose partial sums still diverge.
    """
    h = len(seq) // 2
    start = len(seq) - h
    ref = (start + 1) * seq[start]
    if not ref > 0:
        return False
    return min((k + 1) * seq[k] for k in range(start, len(seq))) >= keep * ref


def _confirm_divergence(model, I: list, max_windows: int) -> bool:
    # slow geometric decay mimics 1/k over a short range; the test must
    # survive doubling the number of windows
    target = min(2 * len(I), max_windows)
    while len(I) < target:
        I.append(window_integral(model, len(I)))
    return _divergence_test(I)


def classify_martingality(
    model: VolatilityModel,
    windows: int = 40,
    tol: float = 1e-8,
    ratio: float = 0.9,
    max_windows: int = 400,
    cache: bool = True,
) -> MartingalityReport:
    """Three-valued martingality verdict from dyadic window integrals.

    StrictLocalMartingale: the window ratio I_(k+1)/I_k stays <= ``ratio`` over
    the last half of windows and the geometric tail bound falls below ``tol``
    (windows are appended up to ``max_windows`` until it does).
    Martingale: (k+1) I_k does not decay over the last half (so the partial
    sums grow at least like a harmonic series), both at ``windows`` and at
    twice as many.  Otherwise Inconclusive.
    """
    if windows < 4:
        raise ValidationError("windows must be at least 4")
    if not (0 < ratio < 1 and tol > 0):
        raise ValidationError("need 0 < ratio < 1 and tol > 0")
    I = [window_integral(model, k) for k in range(windows)]
    if any(v < 0 for v in I):
        raise InvariantViolation("negative window integral")

    verdict = Verdict.INCONCLUSIVE
    notes = ""
    ok, tail, rho = _decay_test(I, ratio, tol)
    while ok and tail >= tol and len(I) < max_windows:
        I.append(window_integral(model, len(I)))
        ok, tail, rho = _decay_test(I, ratio, tol)
    if ok and tail < tol:
        verdict = Verdict.STRICT_LOCAL
        notes = f"window ratio <= {rho:.4g} over the last half of {len(I)} windows; tail bound {tail:.3g}"
    elif _divergence_test(I) and _confirm_divergence(model, I, max_windows):
        verdict = Verdict.MARTINGALE
        notes = f"(k+1) I_k does not decay over the last half of {len(I)} windows"
    else:
        notes = f"neither test passed over {len(I)} windows (worst ratio {rho:.4g})"

    partial = np.cumsum(I)
    tps = [(2.0 ** (k + 1), float(v)) for k, v in enumerate(partial)]
    report = MartingalityReport(verdict, tps, [float(v) for v in I], None, notes)
    if cache and model.verdict_cache is None:
        model.verdict_cache = report
    return report


def ds02_partial(model: VolatilityModel, b: float) -> float:
    """Integral of x/sigma^2 over [1, b]."""
    if b <= 1:
        return 0.0
    inv = _inv_s2(model)
    return quad_dyadic(lambda x: x * inv(x), 1.0, b, _kinks(model))


# ---------------------------------------------------------------------------
# Feller barrier v(1)
# ---------------------------------------------------------------------------


@dataclass
class FellerResult:
    """v(1) truncated at ``truncation`` (``partial``), the extrapolated full
    value (``value``, inf when divergent), the divergence flag, and the pieces
    over z = 1 - y in [2^-(j+1), 2^-j]."""

    partial: float
    value: float
    divergent: bool | None
    pieces: list
    truncation: float


def _v1_integrand(model: VolatilityModel):
    # After z = 1 - y the integrand of v(1) is 2 / (sigma^2((1 - z)/z) z^3).
    inv = _inv_s2(model)

    def f(z):
        return 2.0 * inv((1.0 - z) / z) / (z * z * z)

    return f


def _v1_breaks(model):
    k = _kinks(model)
    return None if k is None else 1.0 / (1.0 + k)


def feller_v1_partial(model: VolatilityModel, y_max: float) -> float:
    """v(1) with the integral over y truncated to [1/2, y_max]."""
    if not 0.5 <= y_max < 1:
        raise ValidationError("truncation must lie in [1/2, 1)")
    if y_max == 0.5:
        return 0.0
    f = _v1_integrand(model)
    z_lo = 1.0 - y_max
    pts = _dyadic_breaks(z_lo, 0.5)
    br = _v1_breaks(model)
    return sum(quad(f, a, b, breaks=br) for a, b in zip(pts, pts[1:]))


def feller_v1(
    model: VolatilityModel,
    truncation: float = 1 - 2.0**-20,
    tol: float = 1e-8,
    ratio: float = 0.9,
    max_pieces: int = 300,
) -> FellerResult:
    """Truncated v(1) plus a divergence flag from the dyadic pieces toward y = 1."""
    if not 0.5 < truncation < 1:
        raise ValidationError("truncation must lie in (1/2, 1)")
    f = _v1_integrand(model)
    br = _v1_breaks(model)
    partial = feller_v1_partial(model, truncation)
    pieces = []
    divergent = None
    value = math.nan
    for j in range(1, max_pieces + 1):
        lo, hi = 2.0 ** -(j + 1), 2.0**-j
        pieces.append(quad(f, lo, hi, breaks=br))
        if len(pieces) >= 8:
            ok, tail, _ = _decay_test(pieces, ratio, tol)
            if ok and tail < tol:
                divergent = False
                value = float(np.sum(pieces)) + tail
                break
            if len(pieces) >= 40 and _divergence_test(pieces):
                divergent = True
                value = math.inf
                break
    return FellerResult(partial, value, divergent, pieces, truncation)


# ---------------------------------------------------------------------------
# psi and Psi
# ---------------------------------------------------------------------------


@dataclass
class SpecialFunctionSample:
    x: float
    psi: float
    psi_second: float
    capital_psi: float


def eval_psi(model: VolatilityModel, x: float) -> tuple[float, float]:
    """psi(x) and its closed-form second derivative (x - 1)/sigma^2(x) above 1."""
    if not x > 0:
        raise ValidationError("psi is evaluated at x > 0")
    if x <= 1:
        return float(x), 0.0
    inv = _inv_s2(model)
    val = x + quad_dyadic(lambda u: (u - 1.0) * (x - u) * inv(u), 1.0, x, _kinks(model))
    return float(val), float((x - 1.0) * inv(x))


def eval_capital_psi(model: VolatilityModel, x: float) -> float:
    if not x > 0:
        raise ValidationError("Psi is evaluated at x > 0")
    if x <= 1:
        return float(x)
    inv = _inv_s2(model)
    return float(1.0 + quad_dyadic(lambda u: u * (x - u) * inv(u), 1.0, x, _kinks(model)))


def sample_special(model: VolatilityModel, x: float) -> SpecialFunctionSample:
    p, p2 = eval_psi(model, x)
    return SpecialFunctionSample(float(x), p, p2, eval_capital_psi(model, x))


def psi_on_grid(model: VolatilityModel, xs: Sequence[float]) -> np.ndarray:
    """psi at many points through cumulative moments.

    psi(x) = x + x A(x) - B(x) with A = int_1^x (u-1)/sigma^2 and
    B = int_1^x u (u-1)/sigma^2, accumulated over the sorted grid.
    """
    xs = np.asarray(xs, dtype=float)
    if np.any(xs <= 0):
        raise ValidationError("psi is evaluated at x > 0")
    out = xs.copy()
    above = np.flatnonzero(xs > 1)
    if above.size == 0:
        return out
    inv = _inv_s2(model)
    kinks = _kinks(model)
    order = above[np.argsort(xs[above])]
    A = B = 0.0
    prev = 1.0
    for i in order:
        x = xs[i]
        if x > prev:
            A += quad_dyadic(lambda u: (u - 1.0) * inv(u), prev, x, kinks)
            B += quad_dyadic(lambda u: u * (u - 1.0) * inv(u), prev, x, kinks)
            prev = x
        out[i] = x + x * A - B
    return out


def psi_superlinearity_probe(model: VolatilityModel, xs: Sequence[float], rtol: float = 1e-10) -> list[float]:
    """psi(x)/x on an increasing grid above 1.

    Uses the cached verdict, computing it first if absent.  When the verdict
    is Martingale the ratios must be nondecreasing; a decrease raises
    InvariantViolation.
    """
    xs = [float(x) for x in xs]
    if not xs or any(x <= 1 for x in xs) or any(b <= a for a, b in zip(xs, xs[1:])):
        raise ValidationError("xs must be an increasing list of reals > 1")
    report = model.verdict_cache or classify_martingality(model)
    ratios = [eval_psi(model, x)[0] / x for x in xs]
    if report.verdict is Verdict.MARTINGALE:
        for a, b in zip(ratios, ratios[1:]):
            if b < a * (1 - rtol):
                raise InvariantViolation(f"psi(x)/x decreased from {a!r} to {b!r}")
    return ratios
