"""Counter-based random streams for the compiled path kernels.

Every path owns an independent Philox4x64-10 stream keyed by
``(seed, path_index)``; the counter is the block index.  Results therefore do
not depend on how paths are split into batches or scheduled on workers.  The
generator matches ``numpy.random.Philox(key=[seed, path_index])`` block for
block.  Normals come from a 256-layer ziggurat using one 64-bit word per
draw on the fast path.  Kernels pull normals in blocks of ``NBUF`` through
``fill_normals`` and index them locally; the stream of values is the same
whatever the block size.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

u64 = np.uint64

M0 = u64(0xD2E7470EE14C6C93)
M1 = u64(0xCA5A826395121157)
W0 = u64(0x9E3779B97F4A7C15)
W1 = u64(0xBB67AE8584CAA73B)

BLOCKS_PER_REFILL = 16
BUF = 4 * BLOCKS_PER_REFILL
TWO_M53 = 1.0 / 9007199254740992.0

# stream state slots; LANE is the second counter word, 0 for the main stream
K0, K1, CTR, POS, LANE = 0, 1, 2, 3, 4
STATE_SIZE = 5


@intrinsic
def _mulhilo(typingctx, a, b):
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        x = builder.zext(args[0], i128)
        y = builder.zext(args[1], i128)
        p = builder.mul(x, y)
        hi = builder.trunc(builder.lshr(p, ir.Constant(i128, 64)), ir.IntType(64))
        lo = builder.trunc(p, ir.IntType(64))
        return context.make_tuple(builder, signature.return_type, [hi, lo])

    return sig, codegen


@nb.njit(inline="always", cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        if r > 0:
            k0 += W0
            k1 += W1
        hi0, lo0 = _mulhilo(M0, c0)
        hi1, lo1 = _mulhilo(M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(cache=True)
def philox_blocks(k0, k1, first, count):
    """Blocks ``first .. first+count-1`` of the stream as a (count, 4) array."""
    out = np.empty((count, 4), dtype=np.uint64)
    for i in range(count):
        a, b, c, d = philox4x64(u64(first + i), u64(0), u64(0), u64(0), u64(k0), u64(k1))
        out[i, 0] = a
        out[i, 1] = b
        out[i, 2] = c
        out[i, 3] = d
    return out


def _zig_tables(n=256, r=3.6541528853610088, v=4.92867323399e-3):
    f = lambda x: math.exp(-0.5 * x * x)  # noqa: E731
    xs = np.zeros(n + 1)
    xs[0] = v / f(r)
    xs[1] = r
    for i in range(1, n - 1):
        xs[i + 1] = math.sqrt(-2.0 * math.log(v / xs[i] + f(xs[i])))
    xs[n] = 0.0
    m = 2.0**52
    ki = np.array([int(xs[i + 1] / xs[i] * m) for i in range(n)], dtype=np.uint64)
    wi = xs[:n] / m
    fi = np.array([f(x) for x in xs])
    fi[0] = f(r)
    return ki, wi, fi, r


ZIG_K, ZIG_W, ZIG_F, ZIG_R = _zig_tables()


NBUF = 128


@nb.njit(cache=True)
def stream_init(words, st, seed, path):
    st[K0] = u64(seed)
    st[K1] = u64(path)
    st[CTR] = u64(0)
    st[POS] = u64(BUF)
    st[LANE] = u64(0)


@nb.njit(cache=True)
def stream_init_aux(words, st, seed, path):
    """An auxiliary stream for the same key, disjoint from the main one."""
    stream_init(words, st, seed, path)
    st[LANE] = u64(1)


@nb.njit(cache=True)
def _refill(words, k0, k1, ctr, lane):
    for j in range(BLOCKS_PER_REFILL):
        ctr += u64(1)
        a, b, c, d = philox4x64(ctr, lane, u64(0), u64(0), k0, k1)
        words[4 * j] = a
        words[4 * j + 1] = b
        words[4 * j + 2] = c
        words[4 * j + 3] = d
    return ctr


@nb.njit(cache=True)
def _uniform_at(words, k0, k1, ctr, pos, lane):
    if pos >= BUF:
        ctr = _refill(words, k0, k1, ctr, lane)
        pos = 0
    u = ((words[pos] >> u64(11)) + 0.5) * TWO_M53
    return u, ctr, pos + 1


@nb.njit(cache=True)
def _normal_slow(words, k0, k1, ctr, pos, lane, idx, sign, x):
    # Rejected by the rectangle test: tail or wedge sampling.
    if idx == 0:
        while True:
            u1, ctr, pos = _uniform_at(words, k0, k1, ctr, pos, lane)
            u2, ctr, pos = _uniform_at(words, k0, k1, ctr, pos, lane)
            xx = -math.log(u1) / ZIG_R
            yy = -math.log(u2)
            if yy + yy > xx * xx:
                z = ZIG_R + xx
                return (-z if sign else z), ctr, pos
    u, ctr, pos = _uniform_at(words, k0, k1, ctr, pos, lane)
    if ZIG_F[idx] + u * (ZIG_F[idx + 1] - ZIG_F[idx]) < math.exp(-0.5 * x * x):
        return (-x if sign else x), ctr, pos
    return np.nan, ctr, pos


@nb.njit(cache=True)
def fill_normals(words, st, out):
    """Overwrite ``out`` with the next normals of the stream."""
    k0 = st[K0]
    k1 = st[K1]
    ctr = st[CTR]
    pos = np.int64(st[POS])
    lane = st[LANE]
    i = 0
    n = out.shape[0]
    while i < n:
        if pos >= BUF:
            ctr = _refill(words, k0, k1, ctr, lane)
            pos = 0
        w = words[pos]
        pos += 1
        idx = w & u64(0xFF)
        w >>= u64(8)
        sign = w & u64(1)
        rabs = (w >> u64(1)) & u64(0x000FFFFFFFFFFFFF)
        x = rabs * ZIG_W[idx]
        if rabs < ZIG_K[idx]:
            out[i] = -x if sign else x
            i += 1
            continue
        z, ctr, pos = _normal_slow(words, k0, k1, ctr, pos, lane, idx, sign, x)
        if z == z:
            out[i] = z
            i += 1
    st[CTR] = ctr
    st[POS] = u64(pos)


@nb.njit(cache=True)
def fill_uniforms(words, st, out):
    """Overwrite ``out`` with the next open-interval uniforms of the stream."""
    k0 = st[K0]
    k1 = st[K1]
    ctr = st[CTR]
    pos = np.int64(st[POS])
    lane = st[LANE]
    for i in range(out.shape[0]):
        out[i], ctr, pos = _uniform_at(words, k0, k1, ctr, pos, lane)
    st[CTR] = ctr
    st[POS] = u64(pos)


@nb.njit(cache=True)
def normals(seed, path, n):
    """The first ``n`` normals of the stream for ``(seed, path)``."""
    words = np.empty(BUF, dtype=np.uint64)
    st = np.empty(STATE_SIZE, dtype=np.uint64)
    stream_init(words, st, seed, path)
    out = np.empty(n)
    fill_normals(words, st, out)
    return out


@nb.njit(cache=True)
def uniforms(seed, path, n):
    words = np.empty(BUF, dtype=np.uint64)
    st = np.empty(STATE_SIZE, dtype=np.uint64)
    stream_init(words, st, seed, path)
    out = np.empty(n)
    fill_uniforms(words, st, out)
    return out
