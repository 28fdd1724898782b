"""Double-gamma HRF basis functions and their Toeplitz convolution operators.

Each basis function is the difference of two gamma densities,

    h(t) = g(t; theta1, theta2) - theta5 * g(t; theta3, theta4),
    g(t; a, b) = b**a t**(a-1) exp(-b t) / Gamma(a),

with shape ``a`` and rate ``b``. Waveforms are sampled at lags
``-n_pre .. n_post - 1`` (in units of TR) by evaluating the formula at
``t = (lag + n_pre) * TR``: the formula's origin sits ``n_pre`` samples before
the EEG sample, which lets a response start before the event.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

__all__ = [
    "N_PRE",
    "HrfParams",
    "HrfWaveform",
    "gamma_density",
    "hrf_eval",
    "hrf_eval_grad",
    "lag_grid",
    "default_n_post",
    "hrf_waveform",
    "toeplitz",
    "toeplitz_adjoint_lags",
    "shape_rate_from_mode",
    "params_from_timing",
    "baseline_timings",
    "sample_basis_init",
    "first_lobe_peak",
    "hrf_to_json",
]

N_PRE = 4


@dataclass(frozen=True)
class HrfParams:
    """Five gamma-density parameters ``(shape1, rate1, shape2, rate2, ratio)``."""

    theta: tuple

    def __post_init__(self):
        th = tuple(float(v) for v in self.theta)
        if len(th) != 5:
            raise ValueError("an HRF basis function has exactly five parameters")
        if not all(np.isfinite(v) and v > 0 for v in th):
            raise ValueError(f"HRF parameters must be positive, got {th}")
        if th[0] <= 1 or th[2] <= 1:
            raise ValueError("gamma shapes must exceed 1 so that h(0) = 0")
        object.__setattr__(self, "theta", th)

    def as_array(self):
        return np.array(self.theta)


def _log_gamma_density(t, a, b):
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, -np.inf)
    pos = t > 0
    tp = t[pos]
    out[pos] = a * np.log(b) + (a - 1.0) * np.log(tp) - b * tp - gammaln(a)
    return out


def gamma_density(t, shape, rate):
    """Gamma density with the given shape and rate; zero for t <= 0."""
    return np.exp(_log_gamma_density(t, float(shape), float(rate)))


def hrf_eval(theta, t):
    """Evaluate the double-gamma formula at times ``t`` (seconds); zero for t <= 0.

    A zero undershoot ratio is accepted here (single-lobe response).
    """
    th = np.asarray(theta.theta if isinstance(theta, HrfParams) else theta, dtype=float)
    if np.any(th[:4] <= 0) or th[4] < 0:
        raise ValueError("HRF parameters must be positive")
    g1 = np.exp(_log_gamma_density(t, th[0], th[1]))
    g2 = np.exp(_log_gamma_density(t, th[2], th[3]))
    return g1 - th[4] * g2


def hrf_eval_grad(theta, t):
    """Partial derivatives of :func:`hrf_eval` with respect to the five parameters.

    Returns an array of shape ``t.shape + (5,)``. Uses
    ``dg/da = g (log b + log t - psi(a))`` and ``dg/db = g (a / b - t)``.
    """
    th = np.asarray(theta.theta if isinstance(theta, HrfParams) else theta, dtype=float)
    t = np.asarray(t, dtype=float)
    g1 = np.exp(_log_gamma_density(t, th[0], th[1]))
    g2 = np.exp(_log_gamma_density(t, th[2], th[3]))
    logt = np.log(np.where(t > 0, t, 1.0))
    out = np.empty(t.shape + (5,))
    out[..., 0] = g1 * (np.log(th[1]) + logt - digamma(th[0]))
    out[..., 1] = g1 * (th[0] / th[1] - t)
    out[..., 2] = -th[4] * g2 * (np.log(th[3]) + logt - digamma(th[2]))
    out[..., 3] = -th[4] * g2 * (th[2] / th[3] - t)
    out[..., 4] = -g2
    return out


def default_n_post(tr, n_pre=N_PRE):
    """Samples at and after lag 0: at least 40 s of support and 20 samples in total."""
    return max(int(math.ceil(40.0 / tr)), 20 - n_pre)


def lag_grid(n_post, n_pre=N_PRE):
    return np.arange(-n_pre, n_post)


@dataclass
class HrfWaveform:
    samples: np.ndarray
    tr: float
    n_pre: int = N_PRE

    @property
    def lags(self):
        return np.arange(-self.n_pre, len(self.samples) - self.n_pre)

    @property
    def n_post(self):
        return len(self.samples) - self.n_pre


def hrf_waveform(theta, tr, n_post=None, n_pre=N_PRE):
    """Sample a basis function on the lag grid ``-n_pre .. n_post - 1``."""
    if n_post is None:
        n_post = default_n_post(tr, n_pre)
    t = (lag_grid(n_post, n_pre) + n_pre) * tr
    return HrfWaveform(hrf_eval(theta, t), float(tr), int(n_pre))


def toeplitz(h, I_s, n_pre=None):
    """Dense ``I_s x I_s`` convolution matrix with ``H[i, j] = h(i - j)``.

    ``h`` is an :class:`HrfWaveform` or a sample vector whose first entry is
    lag ``-n_pre``. Lags outside the waveform's support give zeros, so
    ``H @ s`` is the convolution of ``s`` with ``h`` truncated to ``I_s``
    samples, including the advanced (noncausal) taps.
    """
    if isinstance(h, HrfWaveform):
        samples, n_pre = h.samples, h.n_pre
    else:
        samples = np.asarray(h, dtype=float)
        n_pre = N_PRE if n_pre is None else n_pre
    I_s = int(I_s)
    H = np.zeros((I_s, I_s))
    for idx, value in enumerate(samples):
        lag = idx - n_pre
        if value == 0 or abs(lag) >= I_s:
            continue
        if lag >= 0:
            H[np.arange(lag, I_s), np.arange(0, I_s - lag)] = value
        else:
            H[np.arange(0, I_s + lag), np.arange(-lag, I_s)] = value
    return H


def toeplitz_adjoint_lags(A, S, n_lags, n_pre=N_PRE):
    """Gradient of ``<A, H(h) S>`` with respect to the waveform samples of ``h``.

    Entry ``idx`` (lag ``idx - n_pre``) equals ``sum_i sum_r A[i, r] S[i - lag, r]``.
    """
    I_s = A.shape[0]
    out = np.zeros(n_lags)
    for idx in range(n_lags):
        lag = idx - n_pre
        if abs(lag) >= I_s:
            continue
        if lag >= 0:
            out[idx] = np.sum(A[lag:] * S[: I_s - lag])
        else:
            out[idx] = np.sum(A[: I_s + lag] * S[-lag:])
    return out


def shape_rate_from_mode(mode, width):
    """Gamma ``(shape, rate)`` with the given mode and standard deviation (seconds)."""
    c = mode / width
    root = 0.5 * (c + math.sqrt(c * c + 4.0))
    shape = root * root
    return shape, root / width


def params_from_timing(peak, width, under_peak, under_width, ratio, tr, n_pre=N_PRE):
    """Convert lag-time timing (seconds after the EEG sample) into ``HrfParams``."""
    offset = n_pre * tr
    a1, b1 = shape_rate_from_mode(peak + offset, width)
    a2, b2 = shape_rate_from_mode(under_peak + offset, under_width)
    return HrfParams((a1, b1, a2, b2, ratio))


def baseline_timings(K):
    """Baseline ``(peak, width, under_peak, under_width, ratio)`` for K basis functions.

    First-lobe peaks are spread evenly over 4..8 s (6 s when K = 1).
    """
    peaks = np.array([6.0]) if K == 1 else np.linspace(4.0, 8.0, K)
    return [(p, 0.25 * p + 0.5, 2.0 * p + 4.0, 0.25 * p + 2.0, 0.35) for p in peaks]


def sample_basis_init(seed, K=3, tr=2.5, n_pre=N_PRE, noise=0.1):
    """Draw K jittered basis functions (early to late peaking).

    Every baseline timing value is multiplied by ``exp(noise * z)`` with
    ``z ~ N(0, 1)`` drawn from ``seed``; ``noise=0`` returns the baselines.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for timing in baseline_timings(K):
        jitter = np.exp(noise * rng.standard_normal(5))
        out.append(params_from_timing(*(np.array(timing) * jitter), tr=tr, n_pre=n_pre))
    return out


def first_lobe_peak(theta, tr, n_pre=N_PRE):
    """Lag time (s) of the positive lobe's mode."""
    th = theta.theta if isinstance(theta, HrfParams) else theta
    return (th[0] - 1.0) / th[1] - n_pre * tr


def hrf_to_json(theta, waveform):
    th = theta.theta if isinstance(theta, HrfParams) else tuple(float(v) for v in theta)
    return {
        "theta": [float(v) for v in th],
        "samples": [float(v) for v in waveform.samples],
        "tr": float(waveform.tr),
        "n_pre": int(waveform.n_pre),
    }
