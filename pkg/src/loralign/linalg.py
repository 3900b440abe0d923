"""Dense float64 matrices and a one-sided Jacobi SVD.

Matrices are plain 2-D ``numpy.float64`` arrays; the functions here validate
shape and finiteness on entry and never mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 100
# columns whose norm falls below this fraction of sigma_1 get a completed basis vector
RANK_TOL = 1e-13


class LinalgError(ValueError):
    pass


class ShapeError(LinalgError):
    pass


class ConvergenceError(LinalgError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (no copy when already one)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LinalgError(f"{name} of shape {arr.shape} has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order per entry."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return kernels.ordered_matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def transpose(a) -> np.ndarray:
    a = as_matrix(a)
    return np.ascontiguousarray(a.T)


@dataclass(frozen=True)
class SvdResult:
    """Economy SVD ``w = U diag(sigma) V^T`` with ``p = min(m, n)`` triples."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def p(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


@dataclass(frozen=True)
class TopK:
    Uk: np.ndarray
    Vk: np.ndarray
    k_eff: int
    source: SvdResult | None = field(default=None, repr=False, compare=False)


def _complete_basis(u: np.ndarray, good: np.ndarray) -> None:
    """Fill columns of ``u`` where ``good`` is False with orthonormal completions."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    for j in np.flatnonzero(~good):
        best, best_norm = None, -1.0
        for i in range(m):
            e = np.zeros(m)
            e[i] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > best_norm + 1e-12:
                best, best_norm = e, nrm
        col = best / best_norm
        u[:, j] = col
        basis.append(col)


def svd(w, max_sweeps: int = MAX_SWEEPS, guess: SvdResult | None = None) -> SvdResult:
    """Economy SVD by QR-preconditioned one-sided Jacobi.

    Singular values are sorted non-increasing.  Each left singular vector is
    signed so its largest-magnitude entry is positive (first one on ties), and
    the paired right vector follows; the result is a deterministic function of
    ``w`` (and ``guess``).

    ``guess`` is the SVD of a nearby matrix of the same shape.  Its square
    factor seeds the rotation so that far fewer sweeps are needed; the output
    obeys the same invariants either way.
    """
    w = as_matrix(w, "svd input")
    m, n = w.shape
    flipped = m < n
    a = w.T if flipped else w
    rows, p = a.shape

    # power-of-two scaling is exact and keeps squared norms away from under/overflow
    amax = float(np.max(np.abs(a)))
    scale = float(np.ldexp(1.0, np.frexp(amax)[1] - 1)) if amax > 0 else 1.0
    q, r = np.linalg.qr(a / scale, mode="reduced")
    if guess is None:
        g = np.array(r, dtype=np.float64, order="C")
        v = np.eye(p)
    else:
        if guess.U.shape != (m, p) or guess.V.shape != (n, p):
            raise ShapeError(f"svd guess has factors {guess.U.shape}/{guess.V.shape}, input is {m}x{n}")
        v = np.array(guess.U if flipped else guess.V, dtype=np.float64, order="C")
        g = r @ v
    tol = EPS * max(p, 1)
    floor = (EPS * np.linalg.norm(r)) ** 2
    sweeps = kernels.jacobi_sweeps(g, v, kernels.round_robin_schedule(p), tol, max_sweeps, floor)
    if sweeps < 0:
        raise ConvergenceError(f"Jacobi SVD of a {m}x{n} matrix did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]
    sigma_out = sigma * scale

    smax = sigma[0] if p else 0.0
    good = sigma > RANK_TOL * smax if smax > 0 else np.zeros(p, dtype=bool)
    ur = np.zeros_like(g)
    ur[:, good] = g[:, good] / sigma[good]
    u = q @ ur
    if not good.all():
        _complete_basis(u, good)

    if flipped:
        u, v = v, u
    idx = np.argmax(np.abs(u), axis=0)
    sgn = np.where(u[idx, np.arange(p)] < 0, -1.0, 1.0)
    u = u * sgn
    v = v * sgn
    return SvdResult(np.ascontiguousarray(u), sigma_out, np.ascontiguousarray(v))


def top_k(s: SvdResult, k: int) -> TopK:
    """Leading ``min(k, p)`` singular-vector columns; ``k`` above ``p`` clamps."""
    if int(k) != k or k < 1:
        raise ValueError(f"top_k needs k >= 1, got {k}")
    k_eff = min(int(k), s.p)
    return TopK(s.U[:, :k_eff].copy(), s.V[:, :k_eff].copy(), k_eff, s)
