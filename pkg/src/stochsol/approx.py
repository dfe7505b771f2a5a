"""Lipschitz approximations sigma_n increasing to sigma.

Level n covers the window [2^-n, 2^n] with a dyadic grid of m cells per
octave (m a power of two, nondecreasing in n, so grids are nested).  f_n is the
piecewise-linear interpolant of node values that bound 1/sigma^2 from above
on the adjacent cells, then clipped by the previous level, and
sigma_n = f_n^(-1/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CertificationFailure, EnvelopeFailure, ValidationError
from .model import EnvelopeSigma, VolatilityModel, evaluate_sigma


def _inv_sigma2(model: VolatilityModel, x: np.ndarray) -> np.ndarray:
    s = np.asarray(evaluate_sigma(model, x), dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        return 1.0 / (s * s)


@dataclass
class EnvelopeLevel:
    n: int
    window: tuple
    knots: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    cells_per_octave: int = 0
    samples_per_cell: int = 0
    core: tuple = ()
    gap: float = math.nan
    rebuilds: int = 0

    def f(self, x) -> np.ndarray:
        """The envelope f_n, linear inside the window (clamped outside)."""
        return np.interp(np.asarray(x, dtype=float), self.knots, self.values)

    def as_model(self) -> VolatilityModel:
        return VolatilityModel(EnvelopeSigma(self.knots, self.values), holder_exponent_hint=1.0)

    def lipschitz_bound(self) -> float:
        """Global Lipschitz constant of sigma_n on (0, inf).

        On a knot interval |d sigma_n / dx| = |f'| f^(-3/2) / 2, bounded with
        the smaller end value of f; left of the window the slope is
        sigma_n(a)/a; right of it sigma_n is constant.
        """
        f0, f1 = self.values[:-1], self.values[1:]
        slope = np.abs(np.diff(self.values) / np.diff(self.knots))
        inner = 0.5 * slope * np.minimum(f0, f1) ** -1.5
        left = self.values[0] ** -0.5 / self.knots[0]
        return float(max(inner.max(initial=0.0), left))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "window": list(self.window),
            "cells_per_octave": self.cells_per_octave,
            "samples_per_cell": self.samples_per_cell,
            "core": list(self.core),
            "gap": self.gap,
            "knots": self.knots.tolist(),
            "values": self.values.tolist(),
        }


def eval_sigma_n(level: EnvelopeLevel, x):
    """sigma_n(x): f_n^(-1/2) in the window, linear to 0 on the left, constant on the right, 0 for x <= 0."""
    return evaluate_sigma(level.as_model(), x)


def _octave_cells(cells_per_decade: int) -> int:
    need = max(1.0, cells_per_decade * math.log10(2.0))
    return 1 << math.ceil(math.log2(need) - 1e-12)


def core_compact(n: int) -> tuple[float, float]:
    """The compact on which level n's gap is certified: [1/(n+1), n+1] within the window."""
    return max(2.0**-n, 1.0 / (n + 1)), min(2.0**n, n + 1.0)


def _cell_sups(model, knots, n, max_samples):
    """Sampled sup of 1/sigma^2 on every cell, refined until stable within 1/(4n)."""
    xl, xr = knots[:-1, None], knots[1:, None]
    s = 4
    sup = None
    while True:
        frac = np.linspace(0.0, 1.0, s + 1)[None, :]
        pts = xl * (xr / xl) ** frac
        new = _inv_sigma2(model, pts).max(axis=1)
        if not np.all(np.isfinite(new)):
            bad = pts.ravel()[~np.isfinite(_inv_sigma2(model, pts.ravel()))][0]
            raise EnvelopeFailure(f"1/sigma^2 is not finite at x={bad!r}")
        if sup is not None and np.max(new - sup) < 1.0 / (4 * n):
            return new, s
        if s >= max_samples:
            return new, s
        sup = new
        s *= 2


def build_level(
    model: VolatilityModel,
    n: int,
    cells_per_decade: int = 64,
    prev: EnvelopeLevel | None = None,
    rebuild_budget: int = 10,
    max_samples: int = 256,
    verify_per_cell: int = 4,
) -> EnvelopeLevel:
    """Envelope level n, refined by doubling the cell count until the gap holds.

    The gap f_n - 1/sigma^2 < 1/n and the envelope property f_n >= 1/sigma^2
    are verified on ``verify_per_cell`` points per cell over ``core_compact(n)``.
    """
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ValidationError("level n must be a positive integer")
    m = _octave_cells(cells_per_decade)
    if prev is not None:
        if prev.n >= n:
            raise ValidationError("previous level must have a smaller n")
        m = max(m, prev.cells_per_octave)
    a, b = core_compact(n)
    for attempt in range(rebuild_budget + 1):
        i = np.arange(-n * m, n * m + 1)
        knots = np.exp2(i / m)
        sups, s = _cell_sups(model, knots, n, max_samples)
        vals = np.empty(knots.size)
        vals[0], vals[-1] = sups[0], sups[-1]
        vals[1:-1] = np.maximum(sups[:-1], sups[1:])
        if prev is not None:
            a_p, b_p = prev.window
            inside = (knots >= a_p) & (knots <= b_p)
            vals[inside] = np.minimum(vals[inside], prev.f(knots[inside]))

        # verification on the core compact
        frac = np.arange(verify_per_cell + 1) / verify_per_cell
        cells = (knots[:-1] < b) & (knots[1:] > a)
        xl, xr = knots[:-1][cells, None], knots[1:][cells, None]
        vx = (xl * (xr / xl) ** frac[None, :]).ravel()
        vx = vx[(vx >= a) & (vx <= b)]
        diff = np.interp(vx, knots, vals) - _inv_sigma2(model, vx)
        gap = float(diff.max())
        envelope_ok = diff.min() >= -1e-12 * np.abs(_inv_sigma2(model, vx)).max()
        if envelope_ok and gap < 1.0 / n:
            return EnvelopeLevel(n, (2.0**-n, 2.0**n), knots, vals, m, s, (a, b), gap, attempt)
        m *= 2
    raise EnvelopeFailure(
        f"level {n}: gap {gap:.3g} (need < {1.0 / n:.3g}) after {rebuild_budget} rebuilds at {m // 2} cells per octave"
    )


@dataclass
class ApproxLadder:
    levels: list
    source: VolatilityModel

    def __post_init__(self):
        ns = [lv.n for lv in self.levels]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValidationError("ladder levels must have strictly increasing n")

    def level(self, n: int) -> EnvelopeLevel:
        for lv in self.levels:
            if lv.n == n:
                return lv
        raise KeyError(n)

    def sigma_for_pde_level(self, n_pde: int) -> VolatilityModel:
        """sigma_k with k = ceil(log2 n_pde), whose window contains [1/n_pde, n_pde]."""
        k = max(1, math.ceil(math.log2(n_pde) - 1e-12))
        return self.level(k).as_model()


def build_ladder(model: VolatilityModel, n_max: int, cells_per_decade: int = 64, **kw) -> ApproxLadder:
    levels = []
    prev = None
    for n in range(1, n_max + 1):
        prev = build_level(model, n, cells_per_decade, prev, **kw)
        levels.append(prev)
    return ApproxLadder(levels, model)


@dataclass
class CertificateReport:
    """Worst margins per level; a condition holds when its margin is >= 0.

    positivity: min sigma_n on samples over (0, inf).
    lipschitz: min of L_n - |sigma_n(x) - sigma_n(y)| / |x - y| over random pairs.
    upper: min of sigma - sigma_n on compact samples inside the window.
    monotone: min of sigma_(n+1) - sigma_n on compact samples inside both windows.
    gap: 1/n - max(1/sigma_n^2 - 1/sigma^2), over compacts inside the level's core.
    """

    rows: list
    passed: bool
    worst: dict

    def to_dict(self) -> dict:
        return {"passed": self.passed, "worst": self.worst, "rows": self.rows}


CONDITIONS = ("positivity", "lipschitz", "upper", "monotone", "gap")


def certify_ladder(
    ladder: ApproxLadder,
    compacts: Sequence[tuple],
    n_samples: int = 4000,
    seed: int = 0,
    raise_on_failure: bool = True,
) -> CertificateReport:
    """Re-check the approximation conditions on fresh random points per compact and level."""
    if len(ladder.levels) < 2:
        raise ValidationError("certification needs at least two levels")
    compacts = [(float(lo), float(hi)) for lo, hi in compacts]
    if any(not 0 < lo < hi for lo, hi in compacts):
        raise ValidationError("compacts must be intervals [lo, hi] with 0 < lo < hi")
    rng = np.random.default_rng(seed)
    src = ladder.source
    rows = []
    first_failure = None

    for idx, lv in enumerate(ladder.levels):
        nxt = ladder.levels[idx + 1] if idx + 1 < len(ladder.levels) else None
        m = lv.as_model()
        a, b = lv.window
        cx = np.concatenate([np.exp(rng.uniform(math.log(lo), math.log(hi), n_samples)) for lo, hi in compacts])
        # positivity and Lipschitz samples cover (0, inf): compacts, the window and both extensions
        xs = np.concatenate([cx, np.exp(rng.uniform(math.log(a * 1e-3), math.log(b * 1e3), n_samples))])
        sn = m(xs)
        row = {"n": lv.n}
        wit = {}

        i = int(np.argmin(sn))
        row["positivity"], wit["positivity"] = float(sn[i]), float(xs[i])

        L = lv.lipschitz_bound()
        ys = xs * np.exp(rng.normal(0.0, 0.05, xs.size))
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.abs(m(ys) - sn) / np.abs(ys - xs)
        q[~np.isfinite(q)] = 0.0
        i = int(np.argmax(q))
        row["lipschitz"], wit["lipschitz"] = float(L * (1 + 1e-9) - q[i]), float(xs[i])
        row["lipschitz_bound"] = L

        # ordering conditions on the compact samples inside the window(s)
        ux = cx[(cx >= a) & (cx <= b)]
        row["upper"] = math.inf
        if ux.size:
            s = np.asarray(evaluate_sigma(src, ux), dtype=float)
            d = s - m(ux) + 1e-12 * s
            i = int(np.argmin(d))
            row["upper"], wit["upper"] = float(d[i]), float(ux[i])

        row["monotone"] = math.inf
        if nxt is not None:
            ox = ux[(ux >= nxt.window[0]) & (ux <= nxt.window[1])]
            if ox.size:
                sn_o = m(ox)
                d = nxt.as_model()(ox) - sn_o + 1e-12 * sn_o
                i = int(np.argmin(d))
                row["monotone"], wit["monotone"] = float(d[i]), float(ox[i])

        ca, cb = lv.core
        gaps = []
        for lo, hi in compacts:
            if lo < ca or hi > cb:
                continue
            z = np.exp(rng.uniform(math.log(lo), math.log(hi), n_samples))
            gz = 1.0 / m(z) ** 2 - _inv_sigma2(src, z)
            j = int(np.argmax(gz))
            gaps.append((1.0 / lv.n - float(gz[j]), float(z[j])))
        if gaps:
            row["gap"], wit["gap"] = min(gaps)
        else:
            row["gap"] = math.inf
        row["witness"] = wit
        rows.append(row)
        if first_failure is None:
            for c in CONDITIONS:
                if row[c] < 0 or (c == "positivity" and not row[c] > 0):
                    first_failure = (c, lv.n, wit[c], row[c])
                    break

    worst = {c: min(r[c] for r in rows) for c in CONDITIONS}
    report = CertificateReport(rows, first_failure is None, worst)
    if first_failure is not None and raise_on_failure:
        raise CertificationFailure(*first_failure)
    return report
