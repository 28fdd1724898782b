"""Multi-channel Wiener filtering of EEG for spike enhancement.

Raw EEG is expected to be band-passed (1-50 Hz) and artifact-corrected by the
caller. The filter operates on a time-delay embedding of the recording with
lags ``-tau .. +tau``; the covariance of the embedded signal inside annotated
spike segments (``R_xx``) is contrasted with the covariance outside them
(``R_nn``) and the filter ``W = R_xx^-1 (R_xx - R_nn)`` is assembled from the
generalized eigendecomposition of the pair, with negative generalized
eigenvalues of the difference clipped to zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

__all__ = [
    "EegRecording",
    "MwfFilter",
    "delay_embed",
    "segments_to_mask",
    "mwf_train",
    "mwf_apply",
    "reference_envelope",
    "clipped_difference",
]


@dataclass
class EegRecording:
    """Channels x samples EEG with a per-sample spike annotation mask."""

    data: np.ndarray
    sample_rate: float
    ied_mask: np.ndarray

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        self.ied_mask = np.asarray(self.ied_mask, dtype=bool)
        if self.ied_mask.shape != (self.data.shape[1],):
            raise ValueError("ied_mask must have one entry per sample")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    @property
    def n_channels(self):
        return self.data.shape[0]


@dataclass
class MwfFilter:
    tau: int
    W: np.ndarray
    n_channels: int
    gevals: np.ndarray | None = None


def segments_to_mask(segments, n_samples):
    """Boolean mask from ``[[start, end], ...]`` sample ranges (end exclusive)."""
    mask = np.zeros(int(n_samples), dtype=bool)
    for start, end in segments:
        mask[max(int(start), 0) : min(int(end), n_samples)] = True
    return mask


def delay_embed(x, tau):
    """Stack copies of ``x`` shifted by lags ``-tau .. +tau``.

    Block ``l`` (0-based) holds ``x[t + l - tau]`` with zero padding outside
    the recording, so the first block is the lag ``-tau`` copy and the centre
    block (index ``tau``) is ``x`` itself.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tau = int(tau)
    C, T = x.shape
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if T <= 2 * tau:
        raise ValueError(f"need more than {2 * tau} samples for tau={tau}")
    out = np.zeros(((2 * tau + 1) * C, T))
    for b, lag in enumerate(range(-tau, tau + 1)):
        rows = slice(b * C, (b + 1) * C)
        if lag < 0:
            out[rows, -lag:] = x[:, : T + lag]
        elif lag > 0:
            out[rows, : T - lag] = x[:, lag:]
        else:
            out[rows] = x
    return out


def mwf_train(rec, tau=4):
    """Train a multi-channel Wiener filter from an annotated recording.

    Covariances use the biased (1/N) estimator over the embedded samples of
    each class. A singular ``R_nn`` is ridge-regularized with
    ``1e-8 * trace / dim`` and a warning is logged.
    """
    mask = rec.ied_mask
    if not mask.any() or mask.all():
        raise ValueError("training needs samples both inside and outside spike segments")
    xe = delay_embed(rec.data, tau)
    xs, xn = xe[:, mask], xe[:, ~mask]
    Rxx = xs @ xs.T / xs.shape[1]
    Rnn = xn @ xn.T / xn.shape[1]
    dim = Rxx.shape[0]

    def _ridge(R, name):
        w = np.linalg.eigvalsh(R)
        if w[0] <= 1e-12 * max(w[-1], 0.0):
            logger.warning("%s is singular; adding ridge", name)
            return R + 1e-8 * np.trace(R) / dim * np.eye(dim)
        return R

    Rnn = _ridge(Rnn, "R_nn")
    Rxx = _ridge(Rxx, "R_xx")
    # Rxx V = Rnn V diag(lam), V^T Rnn V = I
    lam, V = linalg.eigh(Rxx, Rnn)
    # Rxx - Rnn = V^-T diag(lam - 1) V^-1, so W = V diag(1 - 1/lam)_+ V^-1
    gain = np.clip(1.0 - 1.0 / lam, 0.0, None)
    W = V @ (gain[:, None] * np.linalg.inv(V))
    return MwfFilter(tau=int(tau), W=W, n_channels=rec.n_channels, gevals=lam)


def clipped_difference(f, rec):
    """The clipped surrogate of ``R_xx - R_nn`` that enters ``f.W``."""
    xe = delay_embed(rec.data, f.tau)
    xs = xe[:, rec.ied_mask]
    Rxx = xs @ xs.T / xs.shape[1]
    return Rxx @ f.W


def mwf_apply(f, rec):
    """Filter a recording; returns the centre-lag block of ``W^T x~``."""
    data = rec.data if isinstance(rec, EegRecording) else np.atleast_2d(np.asarray(rec, dtype=float))
    if data.shape[0] != f.n_channels:
        raise ValueError(f"filter expects {f.n_channels} channels, got {data.shape[0]}")
    C = f.n_channels
    xe = delay_embed(data, f.tau)
    centre = slice(f.tau * C, (f.tau + 1) * C)
    return f.W[:, centre].T @ xe


def reference_envelope(filtered, tr_samples):
    """Broadband power of the filtered EEG in consecutive TR-long windows.

    Each output value is the mean over channels and in-window samples of the
    squared amplitude; trailing samples that do not fill a window are dropped.
    """
    x = np.atleast_2d(np.asarray(filtered, dtype=float))
    tr_samples = int(tr_samples)
    if tr_samples <= 0:
        raise ValueError("tr_samples must be positive")
    n = x.shape[1] // tr_samples
    if n == 0:
        raise ValueError("recording shorter than one window")
    win = x[:, : n * tr_samples].reshape(x.shape[0], n, tr_samples)
    return np.mean(win**2, axis=(0, 2))
