"""Finite-difference solution of the truncated Cauchy problems.

On Q_n = [0, T) x (1/n, n) the backward equation u_t + 1/2 sigma^2 u_xx = 0
is solved with Dirichlet data on the parabolic boundary by a theta-scheme on a
log-spaced grid.  The truncated payoffs g_n increase to g, and the doubly
indexed ladder U_n^M approximates the stochastic solution.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy import linalg

from .analysis import psi_on_grid
from .errors import GridMismatch, GrowthViolation, LadderExhausted, SingularSystem, ValidationError
from .model import Capped, Payoff, Truncated, VolatilityModel, evaluate_payoff, evaluate_sigma

BoundaryData = Union[Payoff, Callable[[np.ndarray], np.ndarray]]


def truncate_payoff(g: Payoff, n: int, verify: bool = True) -> Truncated:
    """The level-n truncation g_n, nondecreasing in n and below g."""
    if not (isinstance(n, (int, np.integer)) and n >= 2):
        raise ValidationError("truncation level n must be an integer >= 2")
    gn = Truncated(g, int(n))
    if verify:
        xs = verification_nodes(int(n))
        if np.any(gn(xs) > g(xs) * (1 + 1e-14) + 1e-300):
            bad = xs[np.argmax(gn(xs) - g(xs))]
            raise GrowthViolation(f"g_{n} exceeds g at x={bad!r}")
    return gn


def verification_nodes(n: int, per_unit: int = 64) -> np.ndarray:
    """Nodes on [0, n + 1] dense enough to resolve every ramp (m - 1/m, m), m <= n."""
    xs = [np.linspace(0.0, n + 1.0, per_unit * (n + 1) + 1)]
    for m in range(2, n + 1):
        xs.append(np.linspace(m - 1.0 / m, m, 9))
    return np.unique(np.concatenate(xs))


@dataclass
class TruncatedProblem:
    """PDE_n on (1/n, n) with data ``boundary_payoff`` on the parabolic boundary.

    The data is usually ``truncate_payoff(g, n)`` but may be any function;
    comparisons between levels solve g_n on the wider domain Q_(n+1).
    """

    n: int
    boundary_payoff: BoundaryData
    sigma: VolatilityModel
    T: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValidationError("level n must be >= 2")
        if not self.T > 0:
            raise ValidationError("T must be positive")

    @property
    def lo(self) -> float:
        return 1.0 / self.n

    @property
    def hi(self) -> float:
        return float(self.n)

    def data(self, x: np.ndarray) -> np.ndarray:
        g = self.boundary_payoff
        return np.asarray(evaluate_payoff(g, x) if isinstance(g, Payoff) else g(x), dtype=float)


@dataclass
class PdeSurface:
    """u(t_i, x_j) in ``values[i, j]``; t ascending, so the last row is t = T."""

    x_grid: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray
    scheme_meta: dict = field(default_factory=dict)

    def value_at(self, t: float, x: float) -> float:
        """Bilinear interpolation in (t, x)."""
        t_grid, x_grid = self.t_grid, self.x_grid
        if not (t_grid[0] - 1e-12 <= t <= t_grid[-1] + 1e-12 and x_grid[0] <= x <= x_grid[-1]):
            raise ValidationError("evaluation point outside the surface")
        i = int(np.clip(np.searchsorted(t_grid, t) - 1, 0, t_grid.size - 2))
        w = (t - t_grid[i]) / (t_grid[i + 1] - t_grid[i])
        w = min(max(w, 0.0), 1.0)
        row = (1 - w) * self.values[i] + w * self.values[i + 1]
        return float(np.interp(x, x_grid, row))

    def boundary_extrema(self) -> tuple[float, float]:
        b = np.concatenate([self.values[-1], self.values[:, 0], self.values[:, -1]])
        return float(b.min()), float(b.max())

    def max_principle_violation(self) -> float:
        bmin, bmax = self.boundary_extrema()
        inner = self.values[:-1, 1:-1]
        if inner.size == 0:
            return 0.0
        return float(max(0.0, bmin - inner.min(), inner.max() - bmax))

    def to_rows(self):
        """(t, x, u) triples."""
        for i, t in enumerate(self.t_grid):
            for j, x in enumerate(self.x_grid):
                yield float(t), float(x), float(self.values[i, j])


def log_grid(lo: float, hi: float, nx: int) -> np.ndarray:
    """nx + 1 log-spaced nodes on [lo, hi]; x = 1 is a node when lo*hi = 1 and nx is even."""
    g = np.exp(np.linspace(math.log(lo), math.log(hi), nx + 1))
    g[0], g[-1] = lo, hi
    if nx % 2 == 0 and abs(lo * hi - 1.0) < 1e-12:
        g[nx // 2] = 1.0
    return g


def operator_coefficients(sigma: VolatilityModel, x: np.ndarray):
    """Sub-, main- and super-diagonal of 1/2 sigma^2 d^2/dx^2 at the interior nodes."""
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    s = np.asarray(evaluate_sigma(sigma, x[1:-1]), dtype=float)
    d = s * s
    if not np.all(np.isfinite(d)):
        raise SingularSystem("sigma is not finite inside the domain")
    if np.any(d <= 0):
        j = int(np.argmax(d <= 0)) + 1
        raise SingularSystem(f"sigma vanishes inside the domain at x={x[j]!r}")
    c = d / (hm + hp)
    return c / hm, -c * (1 / hm + 1 / hp), c / hp


def apply_operator(sigma: VolatilityModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    a, b, c = operator_coefficients(sigma, x)
    return a * u[:-2] + b * u[1:-1] + c * u[2:]


def solve_truncated(
    problem: TruncatedProblem,
    nx: int = 800,
    nt: int = 800,
    theta: float = 0.5,
    rannacher: int = 2,
    t_start: float = 0.0,
    x_grid: np.ndarray | None = None,
) -> PdeSurface:
    """Backward theta-scheme for PDE_n.

    The first time step is replaced by ``rannacher`` implicit Euler substeps
    when theta < 1, which damps the Crank-Nicolson response to kinked data.
    Dirichlet values at both ends are the data at 1/n and n.
    """
    if nx < 16 or nt < 16:
        raise ValidationError("nx and nt must be at least 16")
    if not 0.5 <= theta <= 1.0:
        raise ValidationError("theta must lie in [1/2, 1]")
    T = problem.T
    if not 0 <= t_start < T:
        raise ValidationError("need 0 <= t_start < T")
    x = log_grid(problem.lo, problem.hi, nx) if x_grid is None else np.asarray(x_grid, dtype=float)
    t_grid = np.linspace(t_start, T, nt + 1)
    dtau = (T - t_start) / nt
    a, b, c = operator_coefficients(problem.sigma, x)

    data = problem.data(x)
    left, right = float(data[0]), float(data[-1])
    m = x.size - 2
    values = np.empty((nt + 1, x.size))
    values[-1] = data
    residuals = []

    def step(u, dt, th):
        ab = np.zeros((3, m))
        ab[0, 1:] = -th * dt * c[:-1]
        ab[1] = 1 - th * dt * b
        ab[2, :-1] = -th * dt * a[1:]
        ex = (1 - th) * dt
        rhs = u[1:-1] + ex * (a * u[:-2] + b * u[1:-1] + c * u[2:])
        rhs[0] += th * dt * a[0] * left
        rhs[-1] += th * dt * c[-1] * right
        try:
            inner = linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularSystem(f"tridiagonal solve failed: {exc}") from exc
        if not np.all(np.isfinite(inner)):
            raise SingularSystem("tridiagonal solve produced non-finite values")
        res = ab[1] * inner
        res[1:] += ab[2, :-1] * inner[:-1]
        res[:-1] += ab[0, 1:] * inner[1:]
        residuals.append(float(np.max(np.abs(res - rhs), initial=0.0)))
        out = np.empty_like(u)
        out[0], out[-1] = left, right
        out[1:-1] = inner
        return out

    u = data.copy()
    for k in range(nt):
        if k == 0 and theta < 1 and rannacher > 0:
            for _ in range(rannacher):
                u = step(u, dtau / rannacher, 1.0)
        else:
            u = step(u, dtau, theta)
        values[nt - 1 - k] = u

    surf = PdeSurface(x, t_grid, values, {
        "theta": theta,
        "nx": nx,
        "nt": nt,
        "rannacher": rannacher if theta < 1 else 0,
        "steps": len(residuals),
        "residual_norms": residuals,
        "n": problem.n,
    })
    surf.scheme_meta["max_principle_violation"] = surf.max_principle_violation()
    return surf


def richardson_estimate(problem: TruncatedProblem, t: float, x: float, nx: int = 200, nt: int = 200,
                        theta: float = 0.5) -> dict:
    """Values at (nx, nt) and (2nx, 2nt) with the second-order error estimate of the finer one."""
    coarse = solve_truncated(problem, nx, nt, theta, t_start=0.0).value_at(t, x)
    fine = solve_truncated(problem, 2 * nx, 2 * nt, theta, t_start=0.0).value_at(t, x)
    return {"coarse": coarse, "fine": fine, "estimate": abs(fine - coarse) / 3.0}


# ---------------------------------------------------------------------------
# comparison principle
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    passed: bool
    worst_violation: float
    worst_node: tuple
    min_margin: float
    epsilon: float
    lam: float = 0.25


def comparison_check(sub: PdeSurface, sup: PdeSurface, model: VolatilityModel, epsilon: float,
                     lam: float = 0.25, atol: float = 0.0) -> ComparisonReport:
    """Check sub <= sup + epsilon * exp(-lam t) psi(x) at every node."""
    if not (np.array_equal(sub.x_grid, sup.x_grid) and np.array_equal(sub.t_grid, sup.t_grid)):
        raise GridMismatch("surfaces are on different grids")
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    psi = psi_on_grid(model, sub.x_grid)
    phi = np.exp(-lam * sub.t_grid)[:, None] * psi[None, :]
    gap = sub.values - sup.values - epsilon * phi
    i, j = np.unravel_index(int(np.argmax(gap)), gap.shape)
    worst = float(gap[i, j])
    node = (float(sub.t_grid[i]), float(sub.x_grid[j]))
    return ComparisonReport(worst <= atol, worst, node, float(-worst), epsilon, lam)


# ---------------------------------------------------------------------------
# limit ladder
# ---------------------------------------------------------------------------


@dataclass
class LimitLadderResult:
    """``table`` rows are (n, M, U_n^M(t, x), |U_n^M - U_(prev n)^M|, U_n^M - U_n^(prev M))."""

    table: list
    inner_limits: dict
    converged_value: float | None
    stopping_reason: str
    monotone_in_M: bool = True


def _ladder_cell(model, sigma_n, g, M, n, t, x, T, nx, nt, theta):
    gnm = truncate_payoff(Capped(g, M), n, verify=False)
    prob = TruncatedProblem(n, gnm, sigma_n if sigma_n is not None else model, T)
    surf = solve_truncated(prob, nx, nt, theta, t_start=t)
    return surf.value_at(t, x)


def limit_ladder(
    model: VolatilityModel,
    g: Payoff,
    t: float,
    x: float,
    levels: Sequence[int],
    caps: Sequence[float],
    tol: float = 1e-3,
    T: float = 1.0,
    nx: int = 800,
    nt: int = 400,
    theta: float = 0.5,
    sigma_for_level: Callable[[int], VolatilityModel] | None = None,
    workers: int = 1,
) -> LimitLadderResult:
    """U_n^M(t, x) over levels n and caps M with the inner limit in n and the outer in M.

    ``sigma_for_level(n)`` supplies sigma_n (for example from
    ``approx.sigma_for_level``); without it sigma itself is used.  The inner
    limit for a cap converges once two consecutive level differences are below
    ``tol``; the outer limit once two consecutive inner limits differ by less
    than ``tol``.
    """
    levels = [int(n) for n in levels]
    caps = [float(M) for M in caps]
    if len(levels) < 3 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValidationError("levels must be increasing with at least three entries")
    if len(caps) < 2 or any(b <= a for a, b in zip(caps, caps[1:])):
        raise ValidationError("caps must be increasing with at least two entries")
    if not (0 < x and 0 <= t < T):
        raise ValidationError("need x > 0 and 0 <= t < T")
    if not all(1.0 / n < x < n for n in levels):
        raise ValidationError("x must lie inside every truncated domain")

    sig = {n: (sigma_for_level(n) if sigma_for_level else None) for n in levels}
    jobs = [(model, sig[n], g, M, n, t, x, T, nx, nt, theta) for M in caps for n in levels]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            vals = list(ex.map(_ladder_cell, *zip(*jobs)))
    else:
        vals = [_ladder_cell(*j) for j in jobs]
    grid = np.array(vals).reshape(len(caps), len(levels))

    table = []
    for i, M in enumerate(caps):
        for j, n in enumerate(levels):
            dn = abs(grid[i, j] - grid[i, j - 1]) if j else math.nan
            dM = grid[i, j] - grid[i - 1, j] if i else math.nan
            table.append((n, M, float(grid[i, j]), float(dn), float(dM)))
    monotone = bool(np.all(np.diff(grid, axis=0) >= -1e-9))

    inner = {}
    reasons = []
    for i, M in enumerate(caps):
        diffs = np.abs(np.diff(grid[i]))
        hit = [j for j in range(1, len(diffs)) if diffs[j - 1] < tol and diffs[j] < tol]
        if hit:
            inner[M] = float(grid[i, hit[0] + 1])
        else:
            reasons.append(f"inner limit for M={M:g} not reached by n={levels[-1]}")

    value = None
    conv_caps = [M for M in caps if M in inner]
    for M1, M2 in zip(caps, caps[1:]):
        if M1 in inner and M2 in inner and abs(inner[M2] - inner[M1]) < tol:
            value = inner[M2]
            reason = f"converged at M={M2:g}: |U^{M2:g} - U^{M1:g}| = {abs(inner[M2] - inner[M1]):.3g} < {tol:g}"
            break
    else:
        reason = "; ".join(reasons) or f"outer limit not reached by M={caps[-1]:g}"
    result = LimitLadderResult(table, inner, value, reason, monotone)
    if value is None:
        raise LadderExhausted(reason + f" (inner limits found for {len(conv_caps)} caps)", result)
    return result
