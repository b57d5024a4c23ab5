"""Spectral and spatial diagnostics of latent trajectories.

Everything here is a pure function of its inputs. Spectra use the in-house FFT
in :mod:`courant.fft`; the PCA uses numpy's SVD.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fft as F
from .decoder import FieldDecomposition, dominant_latent_map
from .errors import ContractError

OMEGA0 = 6.0
DB_FLOOR = -300.0
SEG_MIN = 4
PROBE_OFFSETS = ((1.0, 1.0), (1.0, -1.0), (3.0, 0.0))


# -- Welch -----------------------------------------------------------------


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the spectral-analysis convention)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def default_seg_len(n: int) -> int:
    return min(n // 2, 64)


def welch_psd(x, fs: float, seg_len: int | None = None, overlap: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Welch PSD of a mean-subtracted series.

    Density scaling: a unit-amplitude sinusoid integrates to about 1/2.
    Works along the last axis, so a batch of series can be passed at once.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if seg_len is None:
        seg_len = default_seg_len(n)
    if seg_len < SEG_MIN:
        raise ContractError(f"seg_len must be >= {SEG_MIN}, got {seg_len}")
    if seg_len > n:
        raise ContractError(f"seg_len {seg_len} exceeds series length {n}")
    if not 0 <= overlap < 1:
        raise ContractError("overlap must lie in [0, 1)")
    step = seg_len - int(seg_len * overlap)
    starts = np.arange(0, n - seg_len + 1, step)
    x = x - x.mean(axis=-1, keepdims=True)
    w = hann(seg_len)
    segs = np.stack([x[..., s : s + seg_len] for s in starts], axis=-2) * w
    spec = np.abs(F.rfft(segs)) ** 2 / (fs * (w * w).sum())
    psd = spec.mean(axis=-2)
    if seg_len % 2:
        psd[..., 1:] *= 2
    else:
        psd[..., 1:-1] *= 2
    return F.rfftfreq(seg_len, 1.0 / fs), psd


def bin_index(freqs: np.ndarray, f: float) -> int:
    """Index of the frequency bin nearest to ``f``."""
    return int(np.argmin(np.abs(np.asarray(freqs) - f)))


def premultiplied(freqs: np.ndarray, psd: np.ndarray) -> np.ndarray:
    return freqs * psd


# -- PCA -------------------------------------------------------------------


@dataclass
class PcaBasis:
    components: np.ndarray  # (k, d), orthonormal rows
    mean: np.ndarray  # (d,)
    explained_variance: np.ndarray  # (k,)

    def project(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, coeffs) -> np.ndarray:
        return np.asarray(coeffs) @ self.components + self.mean


def fit_pca(samples, k: int = 3) -> PcaBasis:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("PCA samples must be 2-D (n, d)")
    k = min(k, x.shape[1])
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s**2 / max(x.shape[0] - 1, 1)
    comps = vt[:k]
    # sign convention: largest-magnitude entry of each component is positive
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    signs[signs == 0] = 1
    return PcaBasis(comps * signs[:, None], mean, var[:k])


# -- latent spectra ----------------------------------------------------------


@dataclass
class LatentSpectra:
    freqs: np.ndarray  # (F,)
    psd: np.ndarray  # (L, k, F)
    basis: PcaBasis
    ranking: np.ndarray  # anchors by PC0 PSD at f_shed, descending
    coeffs: np.ndarray  # (L, k, T) projected series


def _as_states(traj) -> np.ndarray:
    arr = traj.array() if hasattr(traj, "array") else np.asarray(traj, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError(f"latent trajectory must be (T, L, d), got shape {arr.shape}")
    return arr


def latent_psd(
    traj,
    fs: float,
    f_shed: float,
    k: int = 3,
    fit_steps: int = 10,
    seg_len: int | None = None,
) -> LatentSpectra:
    """PCA-project every anchor's latent series and take its Welch PSD.

    The basis is fitted on the first ``fit_steps`` states only (all anchors pooled).
    """
    z = _as_states(traj)
    n_t, n_l, d = z.shape
    if n_t < 2 * SEG_MIN:
        raise ContractError(f"trajectory has {n_t} states; need at least {2 * SEG_MIN}")
    basis = fit_pca(z[: max(1, min(fit_steps, n_t))].reshape(-1, d), k)
    coeffs = basis.project(z).transpose(1, 2, 0)  # (L, k, T)
    freqs, psd = welch_psd(coeffs, fs, seg_len)
    at = bin_index(freqs, f_shed)
    ranking = np.argsort(-psd[:, 0, at], kind="stable")
    return LatentSpectra(freqs, psd, basis, ranking, coeffs)


def peak_frequency(freqs: np.ndarray, psd: np.ndarray) -> np.ndarray:
    """Argmax frequency along the last axis, skipping the DC bin."""
    return np.asarray(freqs)[1:][np.argmax(np.asarray(psd)[..., 1:], axis=-1)]


# -- Morlet scalogram --------------------------------------------------------


@dataclass
class Scalogram:
    times: np.ndarray  # (T,)
    freqs: np.ndarray  # (F,)
    db: np.ndarray  # (F, T), dB re max, floored
    magnitude: np.ndarray  # (F, T), linear |W|


def scalogram_grid(n: int, fs: float, f_shed: float, n_freqs: int = 64) -> np.ndarray:
    lo = max(fs / n, f_shed / 8)
    hi = min(0.45 * fs, 4 * f_shed)
    if not lo < hi:
        raise ContractError(f"empty scalogram band: lower {lo:g} >= upper {hi:g}")
    return np.geomspace(lo, hi, n_freqs)


def morlet_scalogram(
    x,
    fs: float,
    f_shed: float | None = None,
    freqs: np.ndarray | None = None,
    n_freqs: int = 64,
    omega0: float = OMEGA0,
) -> Scalogram:
    """Analytic Morlet CWT by frequency-domain multiplication.

    The wavelet is peak-normalised in frequency, so a sinusoid of amplitude A
    shows |W| = A/2 on its own scale at every interior time.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if freqs is None:
        if f_shed is None:
            raise ContractError("give either f_shed or an explicit frequency grid")
        freqs = scalogram_grid(n, fs, f_shed, n_freqs)
    freqs = np.asarray(freqs, dtype=np.float64)
    if np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
        raise ContractError("scalogram frequencies must be positive and increasing")
    m = F.next_pow2(n)
    pad = np.zeros(m)
    pad[:n] = x - x.mean()
    spec = F.fft(pad)
    omega = 2 * np.pi * F.fftfreq(m, 1.0 / fs)
    scales = omega0 / (2 * np.pi * freqs)
    kernel = np.exp(-0.5 * (scales[:, None] * omega[None, :] - omega0) ** 2)
    kernel[:, omega <= 0] = 0.0
    coef = F.ifft(spec[None, :] * kernel)[:, :n]
    mag = np.abs(coef)
    peak = mag.max()
    if peak > 0:
        with np.errstate(divide="ignore"):
            db = 20 * np.log10(mag / peak)
        db = np.maximum(db, DB_FLOOR)
    else:
        db = np.full(mag.shape, DB_FLOOR)
    return Scalogram(np.arange(n) / fs, freqs, db, mag)


@dataclass
class DriftSeries:
    times: np.ndarray
    f_peak: np.ndarray
    drift: np.ndarray
    in_band: np.ndarray


def peak_drift(scal: Scalogram, f_shed: float, band: float = 0.2) -> DriftSeries:
    f_peak = scal.freqs[np.argmax(scal.magnitude, axis=0)]
    drift = (f_peak - f_shed) / f_shed
    return DriftSeries(scal.times, f_peak, drift, np.abs(drift) <= band)


# -- spectral report ---------------------------------------------------------


@dataclass
class SpectralReport:
    f_shed: float
    spectra: LatentSpectra
    anchor: int
    scalogram: Scalogram
    drift: DriftSeries

    @property
    def freqs(self) -> np.ndarray:
        return self.spectra.freqs

    @property
    def psd(self) -> np.ndarray:
        return self.spectra.psd

    @property
    def premultiplied(self) -> np.ndarray:
        return premultiplied(self.spectra.freqs, self.spectra.psd)


def spectral_report(
    traj,
    fs: float,
    f_shed: float,
    k: int = 3,
    fit_steps: int = 10,
    anchor: int | None = None,
    seg_len: int | None = None,
) -> SpectralReport:
    """Latent PSDs plus the scalogram and drift of one representative anchor on PC0.

    The representative anchor defaults to the one with the most PC0 power at ``f_shed``.
    """
    spectra = latent_psd(traj, fs, f_shed, k, fit_steps, seg_len)
    if anchor is None:
        anchor = int(spectra.ranking[0])
    if not 0 <= anchor < spectra.psd.shape[0]:
        raise ContractError(f"anchor {anchor} out of range")
    scal = morlet_scalogram(spectra.coeffs[anchor, 0], fs, f_shed)
    return SpectralReport(f_shed, spectra, anchor, scal, peak_drift(scal, f_shed))


def _fmt(v) -> str:
    return f"{v:.17g}"


def export_report(report: SpectralReport, out_dir, anchors: Sequence[int] | None = None) -> Path:
    """Write ``psd.csv``, ``scalogram.csv`` and ``drift.csv``.

    ``anchors`` restricts ``psd.csv`` to those anchors (default: all, in index order).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pre = report.premultiplied
    n_l, k, _ = report.psd.shape
    anchors = range(n_l) if anchors is None else [int(a) for a in anchors]
    for a in anchors:
        if not 0 <= a < n_l:
            raise ContractError(f"anchor {a} out of range 0..{n_l - 1}")
    with (out / "psd.csv").open("w") as fh:
        fh.write("freq,anchor,pc,psd,premultiplied\n")
        for a in anchors:
            for p in range(k):
                for i, f in enumerate(report.freqs):
                    fh.write(f"{_fmt(f)},{a},{p},{_fmt(report.psd[a, p, i])},{_fmt(pre[a, p, i])}\n")
    s = report.scalogram
    with (out / "scalogram.csv").open("w") as fh:
        fh.write("t,f,dB\n")
        for j, t in enumerate(s.times):
            for i, f in enumerate(s.freqs):
                fh.write(f"{_fmt(t)},{_fmt(f)},{_fmt(s.db[i, j])}\n")
    d = report.drift
    with (out / "drift.csv").open("w") as fh:
        fh.write("t,f_peak,drift,in_band\n")
        for t, fp, dr, ib in zip(d.times, d.f_peak, d.drift, d.in_band):
            fh.write(f"{_fmt(t)},{_fmt(fp)},{_fmt(dr)},{int(ib)}\n")
    return out


# -- wake probes ---------------------------------------------------------------


@dataclass
class ProbeSpectra:
    freqs: np.ndarray
    psd: np.ndarray  # (P, F)
    f_peaks: np.ndarray  # (P,)
    f_shed: float
    confident: bool
    positions: np.ndarray  # (P, d_c)


def probe_psd(
    clouds: Sequence,
    fs: float,
    center,
    diameter: float,
    offsets=PROBE_OFFSETS,
    component: int = 1,
    seg_len: int | None = None,
    min_ratio: float = 10.0,
) -> ProbeSpectra:
    """Welch PSD of the transverse velocity at wake probes.

    Probes sit at ``center + diameter * offset``; each reads its nearest point in
    every snapshot. The estimate is flagged low-confidence unless every probe's
    peak exceeds ``min_ratio`` times its median spectral level.
    """
    if len(clouds) < 2 * SEG_MIN:
        raise ContractError(f"need at least {2 * SEG_MIN} snapshots, got {len(clouds)}")
    center = np.asarray(center, dtype=np.float64)
    pos = center[None, :] + diameter * np.asarray(offsets, dtype=np.float64)
    series = np.empty((len(pos), len(clouds)))
    for j, pc in enumerate(clouds):
        c = np.asarray(pc.coords)
        lo, hi = c.min(axis=0), c.max(axis=0)
        if np.any(pos < lo) or np.any(pos > hi):
            raise ContractError(f"probe outside the sampled domain at snapshot {j}")
        near = ((c[None, :, :] - pos[:, None, :]) ** 2).sum(-1).argmin(axis=1)
        series[:, j] = np.asarray(pc.targets)[near, component]
    freqs, psd = welch_psd(series, fs, seg_len)
    peaks = peak_frequency(freqs, psd)
    body = psd[:, 1:]
    med = np.median(body, axis=1)
    confident = bool(np.all(body.max(axis=1) > min_ratio * np.maximum(med, 1e-300)) and np.all(body.max(axis=1) > 0))
    return ProbeSpectra(freqs, psd, peaks, float(peaks.mean()), confident, pos)


# -- dominant-latent maps over time ---------------------------------------------


@dataclass
class TemporalPartition:
    labels: np.ndarray  # (S, N)
    weight_fields: np.ndarray  # (S, L, N) head-averaged
    centroids: np.ndarray  # (S, L, d_c)
    centroid_variance: np.ndarray  # (L,)
    dynamic: np.ndarray  # (L,) bool


def temporal_partition(decomps: Sequence[FieldDecomposition], coords, threshold: float = 0.0) -> TemporalPartition:
    """Dominant-latent labels per step and a stationary/dynamic split of anchors.

    An anchor is dynamic when the temporal variance of its weight-field centroid
    (summed over coordinates) exceeds ``threshold``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if not decomps:
        raise ContractError("need at least one decomposition")
    for s, d in enumerate(decomps):
        if d.weights.shape[1] != coords.shape[0] or d.weights.shape != decomps[0].weights.shape:
            raise ContractError(f"decomposition {s} does not share the query cloud")
    labels = np.stack([dominant_latent_map(d) for d in decomps])
    fields = np.stack([d.weights.mean(axis=0).T for d in decomps])  # (S, L, N)
    mass = fields.sum(axis=2, keepdims=True)
    centroids = fields @ coords / mass
    var = centroids.var(axis=0).sum(axis=1)
    return TemporalPartition(labels, fields, centroids, var, var > threshold)
