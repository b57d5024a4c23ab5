"""Small in-house FFT: iterative radix-2 for powers of two, Bluestein otherwise.

Transforms act on the last axis. numpy.fft is the test oracle, never the implementation.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _radix2(x: np.ndarray, sign: float) -> np.ndarray:
    n = x.shape[-1]
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        a = a.reshape(a.shape[:-1] + (n // m, m))
        even = a[..., :half].copy()
        odd = a[..., half:] * tw
        a[..., :half] = even + odd
        a[..., half:] = even - odd
        a = a.reshape(a.shape[:-2] + (n,))
        m *= 2
    return a


def _bluestein(x: np.ndarray, sign: float) -> np.ndarray:
    n = x.shape[-1]
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase accurate for large n
    chirp = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    m = next_pow2(2 * n - 1)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1 :] = np.conj(chirp[1:][::-1])
    conv = _radix2(_radix2(a, -1.0) * _radix2(b, -1.0), 1.0) / m
    return conv[..., :n] * chirp


def _transform(x, sign: float) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[-1]
    if n == 0:
        raise ContractError("cannot transform an empty axis")
    if n & (n - 1) == 0:
        return _radix2(x, sign)
    return _bluestein(x, sign)


def fft(x) -> np.ndarray:
    return _transform(x, -1.0)


def ifft(x) -> np.ndarray:
    x = np.asarray(x)
    return _transform(x, 1.0) / x.shape[-1]


def rfft(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return fft(x)[..., : x.shape[-1] // 2 + 1]


def rfftfreq(n: int, d: float = 1.0) -> np.ndarray:
    return np.arange(n // 2 + 1) / (n * d)


def fftfreq(n: int, d: float = 1.0) -> np.ndarray:
    k = np.arange(n)
    k[(n + 1) // 2 :] -= n
    return k / (n * d)
