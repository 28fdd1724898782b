"""EEG spectrogram tensor and regional BOLD matrix construction."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "SpectrogramConfig",
    "sine_tapers",
    "multitaper_spectrogram",
    "normalize_eeg_tensor",
    "regress_nuisance",
    "bandpass_zscore",
    "parcellate",
]


@dataclass
class SpectrogramConfig:
    """Windowing and binning of the spectrogram.

    Windows are non-overlapping and one TR long. Bins are ``binwidth`` Hz wide
    and centred on ``fmin, fmin + binwidth, ..., fmax``.
    """

    tr_seconds: float
    fmin: float = 1.0
    fmax: float = 40.0
    binwidth: float = 1.0
    taper_count: int = 3

    def __post_init__(self):
        if not self.tr_seconds > 0:
            raise ValueError("tr_seconds must be positive")
        if not (self.binwidth > 0 and self.fmax >= self.fmin > 0):
            raise ValueError("bin edges must be strictly increasing")
        if self.taper_count < 1:
            raise ValueError("taper_count must be >= 1")

    @property
    def centres(self):
        n = int(round((self.fmax - self.fmin) / self.binwidth)) + 1
        return self.fmin + self.binwidth * np.arange(n)

    @property
    def edges(self):
        c = self.centres
        return np.concatenate([c - self.binwidth / 2, [c[-1] + self.binwidth / 2]])


def sine_tapers(n, k):
    """Orthonormal sine tapers ``sqrt(2/(n+1)) sin(pi j (t+1) / (n+1))``, j = 1..k."""
    t = np.arange(1, n + 1)
    j = np.arange(1, k + 1)[:, None]
    return np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * j * t / (n + 1))


def multitaper_spectrogram(x, sample_rate, cfg):
    """Time x frequency x channel multitaper spectrogram.

    Parameters
    ----------
    x : ndarray, shape (channels, samples)
        Filtered EEG.
    sample_rate : float
    cfg : SpectrogramConfig

    Returns
    -------
    ndarray, shape (I_s, I_g, I_m)
        ``I_s = floor(duration / TR)``. Window ``i`` covers samples
        ``[i * n, (i + 1) * n)`` with ``n = round(TR * sample_rate)``, aligned to
        fMRI volume ``i``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if sample_rate < 2 * cfg.fmax:
        raise ValueError(f"sample rate {sample_rate} Hz cannot resolve {cfg.fmax} Hz")
    n = int(round(cfg.tr_seconds * sample_rate))
    n_win = x.shape[1] // n
    if n_win < 1:
        raise ValueError("recording shorter than one window")
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    edges = cfg.edges
    which = np.digitize(freqs, edges) - 1
    n_bins = len(edges) - 1
    counts = np.bincount(which[(which >= 0) & (which < n_bins)], minlength=n_bins)
    if np.any(counts == 0):
        raise ValueError(
            f"TR window of {n} samples gives {sample_rate / n:.3g} Hz resolution; "
            f"some {cfg.binwidth} Hz bins are empty"
        )
    tapers = sine_tapers(n, cfg.taper_count)
    keep = (which >= 0) & (which < n_bins)
    avg = np.zeros((freqs.size, n_bins))
    avg[np.flatnonzero(keep), which[keep]] = 1.0
    avg /= counts
    out = np.empty((n_win, n_bins, x.shape[0]))
    for c in range(x.shape[0]):
        segs = x[c, : n_win * n].reshape(n_win, n)
        power = np.abs(np.fft.rfft(segs[:, None, :] * tapers, axis=-1)) ** 2
        out[:, :, c] = power.mean(axis=1) @ avg
    return out


def normalize_eeg_tensor(t, max_iter=100, tol=1e-6, return_info=False):
    """Centre every mode-1 fiber, then equalize slab variances over modes 2 and 3.

    After centring, frequency slabs and channel slabs are alternately rescaled
    to unit mean square until every nonzero slab is within ``tol`` (relative)
    of the target, or ``max_iter`` sweeps have run. All-zero slabs are left
    untouched and reported.
    """
    t = np.asarray(t, dtype=float)
    if t.shape[0] < 2:
        raise ValueError("need at least two time points")
    out = t - t.mean(axis=0, keepdims=True)
    I_s, I_g, I_m = out.shape
    zero_g = np.sum(out**2, axis=(0, 2)) == 0
    zero_m = np.sum(out**2, axis=(0, 1)) == 0
    if zero_g.any() or zero_m.any():
        logger.warning(
            "normalize_eeg_tensor: %d zero frequency slabs, %d zero channel slabs",
            zero_g.sum(),
            zero_m.sum(),
        )

    def deviations():
        ms_g = np.sum(out**2, axis=(0, 2)) / (I_s * I_m)
        ms_m = np.sum(out**2, axis=(0, 1)) / (I_s * I_g)
        return max(
            np.max(np.abs(ms_g[~zero_g] - 1.0), initial=0.0),
            np.max(np.abs(ms_m[~zero_m] - 1.0), initial=0.0),
        )

    sweeps = 0
    while deviations() > tol and sweeps < max_iter:
        ms_g = np.sum(out**2, axis=(0, 2)) / (I_s * I_m)
        out[:, ~zero_g, :] /= np.sqrt(ms_g[~zero_g])[None, :, None]
        ms_m = np.sum(out**2, axis=(0, 1)) / (I_s * I_g)
        out[:, :, ~zero_m] /= np.sqrt(ms_m[~zero_m])[None, None, :]
        sweeps += 1
    converged = deviations() <= tol
    if not converged:
        logger.warning("normalize_eeg_tensor: slab scaling did not converge in %d sweeps", max_iter)
    if return_info:
        return out, {
            "sweeps": sweeps,
            "converged": bool(converged),
            "zero_freq_slabs": np.flatnonzero(zero_g).tolist(),
            "zero_channel_slabs": np.flatnonzero(zero_m).tolist(),
        }
    return out


def regress_nuisance(y, confounds=None, rcond=1e-10):
    """Residual of each column of ``y`` after projection on ``[1, confounds]``."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    if confounds is None or np.size(confounds) == 0:
        design = np.ones((n, 1))
    else:
        c = np.asarray(confounds, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.shape[0] != n:
            raise ValueError("confounds must have one row per time point")
        design = np.column_stack([np.ones(n), c])
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        logger.warning("regress_nuisance: confound design is rank deficient (%d < %d)", rank, design.shape[1])
    beta = np.linalg.pinv(design, rcond=rcond) @ y
    return y - design @ beta


def bandpass_zscore(y, tr_seconds, low=0.008, high=0.20, return_flags=False):
    """Zero-phase FFT-mask band-pass followed by per-column z-scoring.

    Frequency bins with ``low <= |f| <= high`` are kept. Z-scores use the
    population standard deviation (``ddof=0``). Columns that are constant after
    filtering are zeroed and flagged.
    """
    y = np.asarray(y, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    n = y.shape[0]
    f = np.abs(np.fft.fftfreq(n, d=tr_seconds))
    keep = (f >= low) & (f <= high)
    filt = np.real(np.fft.ifft(np.fft.fft(y, axis=0) * keep[:, None], axis=0))
    filt = filt - filt.mean(axis=0)
    sd = filt.std(axis=0)
    scale = np.max(np.abs(y), axis=0)
    flat = sd <= 1e-12 * np.where(scale > 0, scale, 1.0)
    out = np.zeros_like(filt)
    out[:, ~flat] = filt[:, ~flat] / sd[~flat]
    if flat.any():
        logger.warning("bandpass_zscore: %d constant columns zeroed", flat.sum())
    if squeeze:
        out = out[:, 0]
    if return_flags:
        return out, np.flatnonzero(flat)
    return out


def parcellate(voxels, labels):
    """Average voxel time series within each region.

    Regions are ordered by sorted unique label; every label in
    ``range(n_regions)`` must occur when labels are integers from zero.
    """
    voxels = np.asarray(voxels, dtype=float)
    labels = np.asarray(labels)
    if labels.shape != (voxels.shape[1],):
        raise ValueError("one label per voxel column is required")
    regions = np.unique(labels)
    if np.issubdtype(labels.dtype, np.integer) and regions.min() >= 0:
        missing = np.setdiff1d(np.arange(regions.max() + 1), regions)
        if missing.size:
            raise ValueError(f"regions without voxels: {missing.tolist()}")
    out = np.empty((voxels.shape[0], regions.size))
    for i, r in enumerate(regions):
        out[:, i] = voxels[:, labels == r].mean(axis=1)
    return out
