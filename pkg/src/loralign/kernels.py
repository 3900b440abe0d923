"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same arithmetic.  Set ``LORALIGN_DISABLE_NUMBA=1`` (or run
without numba installed) to force the numpy path.  Both paths are always
importable as ``<name>_numba`` / ``<name>_numpy`` so they can be compared.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("LORALIGN_DISABLE_NUMBA", "0") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


def _njit(fn=None, **opts):
    if fn is None:
        return lambda f: _njit(f, **opts)
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True, **opts)(fn)


# --------------------------------------------------------------------------
# round-robin pair schedule for Jacobi sweeps
# --------------------------------------------------------------------------

_SCHEDULES: dict[int, np.ndarray] = {}


def round_robin_schedule(n: int) -> np.ndarray:
    """Tournament ordering of all column pairs.

    Returns an int64 array ``(rounds, n_even // 2, 2)``; pairs touching the
    dummy column ``n`` (odd ``n``) are marked with ``-1``.  Pairs inside one
    round are disjoint, so a round can be applied in any order.
    """
    if n in _SCHEDULES:
        return _SCHEDULES[n]
    ne = n + (n % 2)
    players = list(range(ne))
    rounds = []
    for _ in range(max(ne - 1, 1)):
        pairs = []
        for i in range(ne // 2):
            p, q = players[i], players[ne - 1 - i]
            if p > q:
                p, q = q, p
            if q >= n:
                p, q = -1, -1
            pairs.append((p, q))
        rounds.append(pairs)
        players = [players[0]] + [players[-1]] + players[1:-1]
    sched = np.asarray(rounds, dtype=np.int64).reshape(len(rounds), ne // 2, 2)
    _SCHEDULES[n] = sched
    return sched


# --------------------------------------------------------------------------
# one-sided Jacobi
# --------------------------------------------------------------------------


def jacobi_sweeps_numpy(g, v, schedule, tol, max_sweeps, floor=0.0):
    """Orthogonalize the columns of ``g`` in place; accumulate rotations in ``v``.

    Pairs are skipped once ``|gamma| <= tol * sqrt(alpha * beta)`` or when
    either squared column norm is at or below ``floor`` (rounding noise whose
    rotation cannot change the result).  Returns the number of sweeps used,
    or -1 when ``max_sweeps`` is exhausted.
    """
    for sweep in range(max_sweeps):
        rotated = False
        for rnd in schedule:
            pq = rnd[rnd[:, 0] >= 0]
            if pq.shape[0] == 0:
                continue
            p, q = pq[:, 0], pq[:, 1]
            gp, gq = g[:, p], g[:, q]
            alpha = np.sum(gp * gp, axis=0)
            beta = np.sum(gq * gq, axis=0)
            gamma = np.sum(gp * gq, axis=0)
            act = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (gamma != 0.0) & (np.minimum(alpha, beta) > floor)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            gamma = gamma[act]
            zeta = (beta[act] - alpha[act]) / (2.0 * gamma)
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1


# reassociation lets the dot products vectorize; results stay deterministic
# for a given build but are not bit-identical to the numpy path
@_njit(fastmath={"reassoc", "contract"})
def _jacobi_rows(gt, vt, schedule, tol, max_sweeps, floor):
    # columns stored as rows so every inner loop is contiguous
    m = gt.shape[1]
    nv = vt.shape[1]
    n_rounds = schedule.shape[0]
    n_pairs = schedule.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for r in range(n_rounds):
            for k in range(n_pairs):
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                if p < 0:
                    continue
                gp = gt[p]
                gq = gt[q]
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    a = gp[i]
                    b = gq[i]
                    alpha += a * a
                    beta += b * b
                    gamma += a * b
                if gamma == 0.0 or min(alpha, beta) <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    a = gp[i]
                    b = gq[i]
                    gp[i] = c * a - s * b
                    gq[i] = s * a + c * b
                vp = vt[p]
                vq = vt[q]
                for i in range(nv):
                    a = vp[i]
                    b = vq[i]
                    vp[i] = c * a - s * b
                    vq[i] = s * a + c * b
        if not rotated:
            return sweep + 1
    return -1


def jacobi_sweeps_numba(g, v, schedule, tol, max_sweeps, floor=0.0):
    gt = np.ascontiguousarray(g.T)
    vt = np.ascontiguousarray(v.T)
    used = _jacobi_rows(gt, vt, schedule, tol, max_sweeps, floor)
    g[...] = gt.T
    v[...] = vt.T
    return used


# --------------------------------------------------------------------------
# ordered matmul: every dot product is summed left to right
# --------------------------------------------------------------------------


def ordered_matmul_numpy(a, b):
    m, p = a.shape
    out = np.zeros((m, b.shape[1]))
    for k in range(p):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


@_njit
def ordered_matmul_numba(a, b):
    m, p = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(p):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


# --------------------------------------------------------------------------
# box filter over the two leading axes ("valid" windows)
# --------------------------------------------------------------------------


def box_mean_numpy(x, w):
    """Mean over every ``w x w`` window of ``x[h, w, ...]`` (valid mode)."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)) + ((0, 0),) * (x.ndim - 2))
    s = c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]
    return s / (w * w)


@_njit
def _box_mean_3d(x, w):
    # separable: window sums along columns, then along rows; channels innermost
    h, wd, ch = x.shape
    oh = h - w + 1
    ow = wd - w + 1
    rows = np.zeros((h, ow, ch))
    for i in range(h):
        for j in range(ow):
            for dj in range(w):
                for c in range(ch):
                    rows[i, j, c] += x[i, j + dj, c]
    out = np.zeros((oh, ow, ch))
    inv = 1.0 / (w * w)
    for i in range(oh):
        for di in range(w):
            for j in range(ow):
                for c in range(ch):
                    out[i, j, c] += rows[i + di, j, c]
        for j in range(ow):
            for c in range(ch):
                out[i, j, c] *= inv
    return out


def box_mean_numba(x, w):
    x3 = np.ascontiguousarray(x.reshape(x.shape[0], x.shape[1], -1), dtype=np.float64)
    out = _box_mean_3d(x3, w)
    return out.reshape((out.shape[0], out.shape[1]) + x.shape[2:])


if USE_NUMBA:
    jacobi_sweeps = jacobi_sweeps_numba
    ordered_matmul = ordered_matmul_numba
    box_mean = box_mean_numba
else:
    jacobi_sweeps = jacobi_sweeps_numpy
    ordered_matmul = ordered_matmul_numpy
    box_mean = box_mean_numpy


# --------------------------------------------------------------------------
# allocator
# --------------------------------------------------------------------------

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator(nbytes: int = 256 << 20) -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmap pages.

    Training allocates and frees the same few-megabyte arrays every step;
    by default each one is a new mapping that page-faults on first touch.
    No-op (returns False) where glibc ``mallopt`` is unavailable.
    """
    global _tuned
    if _tuned:
        return True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        ok = all(
            libc.mallopt(opt, val)
            for opt, val in (
                (_M_MMAP_THRESHOLD, 1 << 30),
                (_M_TRIM_THRESHOLD, nbytes),
                (_M_TOP_PAD, 64 << 20),
            )
        )
    except (OSError, AttributeError):
        return False
    _tuned = bool(ok)
    return _tuned
