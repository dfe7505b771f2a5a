"""Compiled path kernels.

A model enters a kernel as a compiled sigma function (``sigma_function``)
plus ``params = [alpha, beta, scale, 0]`` and two knot arrays, built from
``VolatilityModel.kernel_spec``.
Each kernel simulates paths ``first .. first+count-1`` of a seed and writes
per-path outputs; the return value is ``(status, path_offset)`` where status
is one of the ``ST_*`` codes for the first failing path.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .rng import BUF, NBUF, STATE_SIZE, fill_normals, fill_uniforms, stream_init, stream_init_aux

ST_OK = 0
ST_NONFINITE = 1
ST_CLOCK = 2

E = math.e
# exp(-700) is below the smallest uniform the stream can produce
BRIDGE_CUTOFF = 700.0
DYADIC_DEPTH = 60
DYADIC_ONE = np.int64(1) << DYADIC_DEPTH
DYADIC_UNIT = 2.0**-DYADIC_DEPTH


@nb.njit(inline="always", cache=True)
def _interp_ext(xs, ys, x):
    # Linear interpolation continued by the end slopes.
    n = xs.shape[0]
    if x <= xs[0]:
        return ys[0] + (ys[1] - ys[0]) / (xs[1] - xs[0]) * (x - xs[0])
    if x >= xs[n - 1]:
        return ys[n - 1] + (ys[n - 1] - ys[n - 2]) / (xs[n - 1] - xs[n - 2]) * (x - xs[n - 1])
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    w = (x - xs[lo]) / (xs[hi] - xs[lo])
    return ys[lo] + w * (ys[hi] - ys[lo])


# One compiled sigma per kind.  Kernels take the sigma function as an
# argument and are specialised per kind; a single branching sigma would be
# if-converted by LLVM, putting pow/log of every kind on the critical path.


@nb.njit(cache=True)
def _s_linear(prm, xs, ys, x):
    return prm[2] * x if x > 0.0 else 0.0


@nb.njit(cache=True)
def _s_square(prm, xs, ys, x):
    return prm[2] * x * x if x > 0.0 else 0.0


@nb.njit(cache=True)
def _s_sqrt(prm, xs, ys, x):
    return prm[2] * math.sqrt(x) if x > 0.0 else 0.0


@nb.njit(cache=True)
def _s_power(prm, xs, ys, x):
    return prm[2] * x ** prm[0] if x > 0.0 else 0.0


@nb.njit(cache=True)
def _s_logpower(prm, xs, ys, x):
    if not x > 0.0:
        return 0.0
    return prm[2] * x ** prm[0] * math.log(E + x) ** prm[1]


@nb.njit(cache=True)
def _s_logpower_half(prm, xs, ys, x):
    # alpha = 1, beta = 1/2
    if not x > 0.0:
        return 0.0
    return prm[2] * x * math.sqrt(math.log(E + x))


@nb.njit(cache=True)
def _s_table(prm, xs, ys, x):
    if not x > 0.0:
        return 0.0
    s = _interp_ext(xs, ys, x)
    return prm[2] * s if s > 0.0 else 0.0


@nb.njit(cache=True)
def _s_envelope(prm, xs, ys, x):
    if not x > 0.0:
        return 0.0
    n = xs.shape[0]
    if x < xs[0]:
        return prm[2] * x / (xs[0] * math.sqrt(ys[0]))
    if x >= xs[n - 1]:
        return prm[2] / math.sqrt(ys[n - 1])
    return prm[2] / math.sqrt(_interp_ext(xs, ys, x))


def sigma_function(code: int, prm: np.ndarray):
    """The compiled sigma for a kernel spec."""
    if code == 0:
        return {1.0: _s_linear, 2.0: _s_square, 0.5: _s_sqrt}.get(float(prm[0]), _s_power)
    if code == 1:
        return _s_logpower_half if (prm[0], prm[1]) == (1.0, 0.5) else _s_logpower
    if code == 2:
        return _s_table
    if code == 3:
        return _s_envelope
    raise ValueError(f"unknown sigma code {code}")


@nb.njit(cache=True)
def sigma_many(sig, prm, xs, ys, x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = sig(prm, xs, ys, x[i])
    return out


@nb.njit(cache=True)
def euler_paths(sig, prm, xs, ys, x0, nsteps, dt, substeps, eps, kappa, xref, max_steps,
                seed, first, out_x, out_abs, out_sup):
    """Euler with projection onto [0, inf) and absorption at ``x <= eps``.

    With ``kappa > 0`` a grid step whose diffusion move sigma(x) sqrt(dt)
    exceeds ``kappa * max(x, xref)`` is taken as ``substeps`` elementary
    steps, each split dyadically until every move is within that bound, with
    sigma re-evaluated and a fresh normal per piece.  ``max_steps`` bounds
    the total number of steps per path.
    """
    sq = math.sqrt(dt)
    isq = 1.0 / math.sqrt(substeps)
    delta = dt / substeps
    words = np.empty(BUF, dtype=np.uint64)
    st = np.empty(STATE_SIZE, dtype=np.uint64)
    zbuf = np.empty(NBUF)
    for p in range(out_x.shape[0]):
        stream_init(words, st, seed, first + p)
        zp = NBUF
        x = x0
        sup = x0
        absorbed = not x0 > eps
        if absorbed:
            x = 0.0
        used = 0
        for _ in range(nsteps):
            if absorbed:
                break
            s = sig(prm, xs, ys, x)
            lim = kappa * max(x, xref)
            if kappa == 0.0 or s * sq <= lim:
                z = 0.0
                for _ in range(substeps):
                    if zp == NBUF:
                        fill_normals(words, st, zbuf)
                        zp = 0
                    z += zbuf[zp]
                    zp += 1
                if substeps > 1:
                    z *= isq
                x = x + s * sq * z
                used += 1
                if used > max_steps:
                    return ST_CLOCK, p
            else:
                # each elementary substep walks a dyadic grid, halving until
                # the move is within lim; identical states take identical
                # steps whatever the outer dt
                for _ in range(substeps):
                    # position and length in units of delta / 2^DYADIC_DEPTH
                    r = 0
                    while r < DYADIC_ONE:
                        k = DYADIC_ONE
                        while k > 1 and (s * math.sqrt(delta * k * DYADIC_UNIT) > lim or r % k != 0):
                            k >>= 1
                        h = delta * k * DYADIC_UNIT
                        if zp == NBUF:
                            fill_normals(words, st, zbuf)
                            zp = 0
                        x = x + s * math.sqrt(h) * zbuf[zp]
                        zp += 1
                        r += k
                        used += 1
                        if used > max_steps:
                            return ST_CLOCK, p
                        if not math.isfinite(x):
                            return ST_NONFINITE, p
                        if x > sup:
                            sup = x
                        if x <= eps:
                            break
                        s = sig(prm, xs, ys, x)
                        lim = kappa * max(x, xref)
                    if x <= eps:
                        break
            if not math.isfinite(x):
                return ST_NONFINITE, p
            if x > sup:
                sup = x
            if x <= eps:
                x = 0.0
                absorbed = True
        out_x[p] = x
        out_abs[p] = absorbed
        out_sup[p] = sup
    return ST_OK, 0


@nb.njit(cache=True)
def timechange_paths(sig, prm, xs, ys, x0, horizon, dt, substeps, eps, max_steps, seed, first, out_x, out_abs, out_sup):
    """Brownian path B from x0 run on the clock Pi = int sigma^-2(B).

    The terminal state is B at the first crossing of Pi over ``horizon``,
    located by linear interpolation within the step.
    """
    sq = math.sqrt(dt)
    isq = 1.0 / math.sqrt(substeps)
    half_dt = 0.5 * dt
    inv_dt = 1.0 / dt
    words = np.empty(BUF, dtype=np.uint64)
    st = np.empty(STATE_SIZE, dtype=np.uint64)
    zbuf = np.empty(NBUF)
    # bridge uniforms come from a separate lane so the Brownian path does
    # not depend on how often the bridge test runs
    awords = np.empty(BUF, dtype=np.uint64)
    ast = np.empty(STATE_SIZE, dtype=np.uint64)
    ubuf = np.empty(NBUF)
    for p in range(out_x.shape[0]):
        stream_init(words, st, seed, first + p)
        stream_init_aux(awords, ast, seed, first + p)
        zp = NBUF
        up = NBUF
        b = x0
        sup = x0
        out_abs[p] = False
        if not x0 > eps:
            out_x[p] = 0.0
            out_abs[p] = True
            out_sup[p] = sup
            continue
        s = sig(prm, xs, ys, b)
        inv_prev = 1.0 / (s * s)
        clock = 0.0
        done = False
        for _ in range(max_steps):
            z = 0.0
            for _ in range(substeps):
                if zp == NBUF:
                    fill_normals(words, st, zbuf)
                    zp = 0
                z += zbuf[zp]
                zp += 1
            if substeps > 1:
                z *= isq
            bn = b + sq * z
            if bn >= eps:
                # B is Brownian: it may dip below eps between grid points.
                q = 2.0 * (b - eps) * (bn - eps) * inv_dt
                if q < BRIDGE_CUTOFF:
                    if up == NBUF:
                        fill_uniforms(awords, ast, ubuf)
                        up = 0
                    u = ubuf[up]
                    up += 1
                    if u < math.exp(-q):
                        bn = -1.0
            if bn < eps:
                out_x[p] = 0.0
                out_abs[p] = True
                done = True
                break
            if not math.isfinite(bn):
                return ST_NONFINITE, p
            s = sig(prm, xs, ys, bn)
            inv_n = 1.0 / (s * s)
            inc = half_dt * (inv_prev + inv_n)
            if clock + inc >= horizon:
                frac = (horizon - clock) / inc
                xt = b + frac * (bn - b)
                if xt > sup:
                    sup = xt
                out_x[p] = xt
                done = True
                break
            clock += inc
            if not math.isfinite(clock):
                return ST_CLOCK, p
            b = bn
            inv_prev = inv_n
            if b > sup:
                sup = b
        if not done:
            return ST_CLOCK, p
        out_sup[p] = sup
    return ST_OK, 0


@nb.njit(cache=True)
def exit_paths(sig, prm, xs, ys, x0, lo, hi, nsteps, dt, seed, first, out_x, out_exit):
    """Euler stopped at the first grid time the path leaves (lo, hi).

    An exiting path is clamped to the boundary it crossed.
    """
    sq = math.sqrt(dt)
    words = np.empty(BUF, dtype=np.uint64)
    st = np.empty(STATE_SIZE, dtype=np.uint64)
    zbuf = np.empty(NBUF)
    for p in range(out_x.shape[0]):
        stream_init(words, st, seed, first + p)
        zp = NBUF
        x = x0
        ex = 0
        if x <= lo:
            x = lo
            ex = -1
        elif x >= hi:
            x = hi
            ex = 1
        for _ in range(nsteps):
            if ex != 0:
                break
            if zp == NBUF:
                fill_normals(words, st, zbuf)
                zp = 0
            x = x + sig(prm, xs, ys, x) * sq * zbuf[zp]
            zp += 1
            if not math.isfinite(x):
                return ST_NONFINITE, p
            if x <= lo:
                x = lo
                ex = -1
            elif x >= hi:
                x = hi
                ex = 1
        out_x[p] = x
        out_exit[p] = ex
    return ST_OK, 0


# Exact summation: split each double into mantissa * 2**(e - 53) and
# accumulate 26-bit halves of the mantissa per exponent in int64.
EXP_OFFSET = 1100
EXP_SLOTS = 2200


@nb.njit(cache=True)
def exact_accumulate(vals, acc_hi, acc_lo):
    for i in range(vals.shape[0]):
        v = vals[i]
        if v == 0.0:
            continue
        m, e = math.frexp(v)
        mi = np.int64(m * 9007199254740992.0)
        k = e + EXP_OFFSET
        acc_hi[k] += mi >> 26
        acc_lo[k] += mi & 0x3FFFFFF
