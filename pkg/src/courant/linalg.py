"""Dense nonsymmetric eigenvalues: Householder Hessenberg + Francis double-shift QR."""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NumericError

CONVERGENCE_TOL = 1e-12


def _house(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Householder vector ``v`` and ``beta`` with ``(I - beta v v^T) x = -+|x| e_1``."""
    v = np.array(x, dtype=np.float64)
    alpha = math.copysign(np.linalg.norm(v), v[0] if v[0] != 0 else 1.0)
    v[0] += alpha
    vv = float(v @ v)
    if vv == 0.0:
        return v, 0.0
    return v, 2.0 / vv


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Upper Hessenberg matrix orthogonally similar to ``a``."""
    h = np.array(a, dtype=np.float64)
    n = h.shape[0]
    for k in range(n - 2):
        v, beta = _house(h[k + 1 :, k])
        if beta == 0.0:
            continue
        h[k + 1 :, k:] -= beta * np.outer(v, v @ h[k + 1 :, k:])
        h[:, k + 1 :] -= beta * np.outer(h[:, k + 1 :] @ v, v)
        h[k + 2 :, k] = 0.0
    return h


def _eig2(a: float, b: float, c: float, d: float) -> tuple[complex, complex]:
    mean = 0.5 * (a + d)
    p = 0.5 * (a - d)
    disc = p * p + b * c
    if disc >= 0:
        r = math.sqrt(disc)
        # avoid cancellation in the smaller root
        big = mean + math.copysign(r, mean) if mean != 0 else r
        det = a * d - b * c
        small = det / big if big != 0 else mean - r
        return complex(big), complex(small)
    r = math.sqrt(-disc)
    return complex(mean, r), complex(mean, -r)


def _francis_sweep(h: np.ndarray, lo: int, hi: int, s: float, t: float) -> None:
    """One implicit double-shift bulge chase on the active block ``h[lo:hi+1, lo:hi+1]``."""
    x = h[lo, lo] * h[lo, lo] + h[lo, lo + 1] * h[lo + 1, lo] - s * h[lo, lo] + t
    y = h[lo + 1, lo] * (h[lo, lo] + h[lo + 1, lo + 1] - s)
    z = h[lo + 1, lo] * h[lo + 2, lo + 1]
    for k in range(lo - 1, hi - 2):
        v, beta = _house(np.array([x, y, z]))
        if beta != 0.0:
            c0 = max(lo, k)
            rows = slice(k + 1, k + 4)
            h[rows, c0 : hi + 1] -= beta * np.outer(v, v @ h[rows, c0 : hi + 1])
            r1 = min(k + 4, hi)
            h[lo : r1 + 1, rows] -= beta * np.outer(h[lo : r1 + 1, rows] @ v, v)
        if k >= lo:
            h[k + 2, k] = 0.0
            h[k + 3, k] = 0.0
        x = h[k + 2, k + 1]
        y = h[k + 3, k + 1]
        if k < hi - 3:
            z = h[k + 4, k + 1]
    v, beta = _house(np.array([x, y]))
    if beta != 0.0:
        rows = slice(hi - 1, hi + 1)
        h[rows, hi - 2 : hi + 1] -= beta * np.outer(v, v @ h[rows, hi - 2 : hi + 1])
        h[lo : hi + 1, rows] -= beta * np.outer(h[lo : hi + 1, rows] @ v, v)
    h[hi, hi - 2] = 0.0


def eigvals(a: np.ndarray, tol: float = CONVERGENCE_TOL, max_sweeps: int | None = None) -> np.ndarray:
    """Eigenvalues of a real square matrix, sorted by real part then imaginary part.

    Complex eigenvalues are produced from 2x2 blocks and therefore appear as
    exact conjugate pairs.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"eigvals needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("eigvals received non-finite entries")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex)
    if max_sweeps is None:
        max_sweeps = 10 * n * n
    h = hessenberg(a)
    out: list[complex] = []
    hi = n - 1
    its = 0
    total = 0
    while hi >= 0:
        if hi == 0:
            out.append(complex(h[0, 0]))
            break
        lo = hi
        while lo > 0:
            sub = abs(h[lo, lo - 1])
            scale = abs(h[lo - 1, lo - 1]) + abs(h[lo, lo])
            if scale == 0.0:
                scale = np.abs(h[max(lo - 1, 0) : hi + 1, max(lo - 1, 0) : hi + 1]).sum()
            if sub <= tol * scale:
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            out.append(complex(h[hi, hi]))
            hi -= 1
            its = 0
            continue
        if lo == hi - 1:
            out.extend(_eig2(h[hi - 1, hi - 1], h[hi - 1, hi], h[hi, hi - 1], h[hi, hi]))
            hi -= 2
            its = 0
            continue
        if total >= max_sweeps:
            raise NumericError(f"QR iteration did not converge after {total} sweeps")
        its += 1
        total += 1
        if its % 10 == 0:
            # exceptional shift to break cycles
            w = abs(h[hi, hi - 1]) + abs(h[hi - 1, hi - 2])
            h11 = 0.75 * w + h[hi, hi]
            s = 2.0 * h11
            t = h11 * h11 + 0.4375 * w * w
        else:
            s = h[hi - 1, hi - 1] + h[hi, hi]
            t = h[hi - 1, hi - 1] * h[hi, hi] - h[hi - 1, hi] * h[hi, hi - 1]
        _francis_sweep(h, lo, hi, s, t)
    ev = np.array(out, dtype=complex)
    return ev[np.lexsort((ev.imag, ev.real))]
