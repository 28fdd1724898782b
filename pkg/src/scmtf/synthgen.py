"""Synthetic EEG tensors and regional BOLD matrices drawn from the coupled model.

The generator plants one spike-like source (a rectified burst process) with
a known set of active regions, regions whose HRF deviates from the rest
(an earlier peak and an inverted undershoot), and Gaussian noise at a chosen
SNR per modality. It returns the ground truth needed to score every stage.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import hrf as hrf_mod
from .model import FactorSet, basis_waveforms, predict_fmri
from .tensor_core import cpd_reconstruct

logger = logging.getLogger(__name__)

__all__ = ["SynthSpec", "SynthData", "generate", "add_noise", "burst_signature", "deviant_basis", "deviant_waveform"]


@dataclass
class SynthSpec:
    """Dimensions, ranks, noise levels and planted structure of a synthetic data set.

    ``active`` lists regions driven by the spike source and ``deviant``
    regions with an abnormal HRF; either is drawn from the seed when None.
    ``nuisance_db`` sets the energy of the rank-Q nuisance relative to the
    coupled part of the BOLD signal.
    """

    I_s: int = 200
    I_g: int = 20
    I_m: int = 16
    I_v: int = 30
    R: int = 2
    K: int = 2
    Q: int = 0
    snr_x_db: float = 20.0
    snr_y_db: float = 10.0
    tr: float = 2.5
    ied_component: int = 0
    n_active: int = 5
    active: list | None = None
    deviant: list | None = None
    burst_rate: float = 0.08
    ref_snr_db: float = 10.0
    nuisance_db: float = -6.0
    seed: int = 0

    def __post_init__(self):
        if min(self.I_s, self.I_g, self.I_m, self.I_v, self.R, self.K) < 1 or self.Q < 0:
            raise ValueError("dimensions and ranks must be positive")
        if not 0 <= self.ied_component < self.R:
            raise ValueError("ied_component out of range")
        for name in ("snr_x_db", "snr_y_db", "ref_snr_db"):
            if np.isnan(getattr(self, name)):
                raise ValueError(f"{name} must not be NaN")
        for name in ("active", "deviant"):
            idx = getattr(self, name)
            if idx is not None and any(not 0 <= int(i) < self.I_v for i in idx):
                raise ValueError(f"{name} region index out of range")

    def to_json(self):
        out = dict(self.__dict__)
        for k in ("active", "deviant"):
            if out[k] is not None:
                out[k] = [int(i) for i in out[k]]
        return out


@dataclass
class SynthData:
    X: np.ndarray
    Y: np.ndarray
    truth: FactorSet
    s_ref: np.ndarray
    spec: SynthSpec
    active: list
    deviant: list
    norms: tuple = (1.0, 1.0)
    clean: dict = field(default_factory=dict)


def add_noise(signal, snr_db, rng):
    """Signal plus white Gaussian noise scaled to the exact requested SNR (infinite SNR adds nothing)."""
    if np.isinf(snr_db) and snr_db > 0:
        return signal.copy()
    noise = rng.standard_normal(signal.shape)
    scale = np.linalg.norm(signal) / np.linalg.norm(noise) * 10.0 ** (-snr_db / 20.0)
    return signal + scale * noise


def burst_signature(n, rate, rng, ar=0.5):
    """Poisson event train convolved with a two-sample box, AR(1)-smoothed; nonnegative."""
    events = rng.poisson(rate, n) * rng.exponential(1.0, n)
    x = np.convolve(events, np.ones(2))[:n]
    x = lfilter([1.0], [1.0, -ar], x)
    if not np.any(x):
        x[rng.integers(n)] = 1.0
    return np.maximum(x, 0.0)


def _smooth_signature(n, rng, ar=0.8):
    return lfilter([1.0], [1.0, -ar], rng.standard_normal(n))


def _spectral_signature(n, rng):
    centre = rng.uniform(0.15, 0.85) * (n - 1)
    width = rng.uniform(0.08, 0.2) * n
    return np.exp(-0.5 * ((np.arange(n) - centre) / width) ** 2)


# deviant HRF: first lobe advanced by three samples, canonical undershoot inverted
DEVIANT_SHIFT = 3
DEVIANT_MIX = 0.2


def deviant_basis(tr, n_pre=hrf_mod.N_PRE):
    """Canonical first lobe advanced by ``DEVIANT_SHIFT`` samples, no undershoot of its own."""
    peak, width, under_peak, under_width, _ = hrf_mod.baseline_timings(1)[0]
    shift = DEVIANT_SHIFT * tr
    return hrf_mod.params_from_timing(peak - shift, width, under_peak - shift, under_width, 1e-6, tr, n_pre)


def deviant_waveform(tr, n_post, n_pre=hrf_mod.N_PRE):
    """Deviant response: advanced lobe minus ``DEVIANT_MIX`` times the canonical HRF.

    Subtracting the canonical response turns its negative late undershoot
    into a positive one.
    """
    t = (hrf_mod.lag_grid(n_post, n_pre) + n_pre) * tr
    canon = hrf_mod.params_from_timing(*hrf_mod.baseline_timings(1)[0], tr=tr, n_pre=n_pre)
    return hrf_mod.hrf_eval(deviant_basis(tr, n_pre), t) - DEVIANT_MIX * hrf_mod.hrf_eval(canon, t)


def generate(spec):
    """Draw a ground truth and synthesize normalized data from it.

    Returns
    -------
    SynthData
        ``X`` and ``Y`` have unit Frobenius norm; ``truth`` is rescaled so that
        its predictions match the normalized noiseless data.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x5CA7]))
    I_s, I_g, I_m, I_v, R, K, Q = spec.I_s, spec.I_g, spec.I_m, spec.I_v, spec.R, spec.K, spec.Q
    r_ied = spec.ied_component

    S = np.column_stack([
        burst_signature(I_s, spec.burst_rate, rng) if r == r_ied else _smooth_signature(I_s, rng)
        for r in range(R)
    ])
    S -= S.mean(axis=0)
    S /= np.linalg.norm(S, axis=0)
    G = np.column_stack([_spectral_signature(I_g, rng) for _ in range(R)])
    M = rng.standard_normal((I_m, R))

    active = sorted(int(i) for i in (spec.active if spec.active is not None
                                     else rng.choice(I_v, spec.n_active, replace=False)))
    deviant = sorted(int(i) for i in (spec.deviant if spec.deviant is not None
                                      else [active[int(rng.integers(len(active)))]]))

    if K == 1 and deviant:
        logger.warning("generate: a single basis function cannot carry a deviant HRF; none planted")
        deviant = []
    n_post = hrf_mod.default_n_post(spec.tr)
    basis_seed = int(rng.integers(2**31))
    planted = bool(deviant)
    if not planted:
        thetas = np.array([p.as_array() for p in hrf_mod.sample_basis_init(basis_seed, K, spec.tr)])
    else:
        # basis 0 is the deviant lobe; the rest are jittered canonical shapes
        normal = hrf_mod.sample_basis_init(basis_seed, K - 1, spec.tr)
        thetas = np.array([deviant_basis(spec.tr).as_array()] + [p.as_array() for p in normal])
    wave = basis_waveforms(thetas, spec.tr, n_post)
    B = np.empty((I_v, K))
    if not planted:
        B[:] = (1.0 + 0.15 * rng.standard_normal((I_v, K))) / K
    else:
        w0 = 1.0 / (K - 1)
        for v in range(I_v):
            B[v, 0] = 0.15 * rng.standard_normal()
            B[v, 1:] = w0 * (1.0 + 0.15 * rng.standard_normal(K - 1))
        for v in deviant:
            B[v, 0] = 1.0
            B[v, 1:] = -DEVIANT_MIX * w0
    # unit l1 local HRFs so V carries the amplitudes
    B /= np.sum(np.abs(B @ wave), axis=1, keepdims=True)

    V = np.empty((I_v, R))
    for r in range(R):
        if r == r_ied:
            V[:, r] = 0.0
            V[active, r] = rng.uniform(0.8, 1.2, len(active))
        else:
            # bounded away from zero: every region keeps a measurable response
            V[:, r] = rng.choice([-1.0, 1.0], I_v) * rng.uniform(0.5, 1.5, I_v)
    N = rng.standard_normal((I_s, Q))
    P = rng.standard_normal((I_v, Q))
    truth = FactorSet(S, G, M, B, V, N, P, thetas, spec.tr, hrf_mod.N_PRE, n_post)
    if Q:
        # nuisance energy fixed relative to the coupled part
        ratio = np.linalg.norm(predict_fmri(truth, coupled_only=True)) / np.linalg.norm(N @ P.T)
        truth.P = P * ratio * 10.0 ** (spec.nuisance_db / 20.0)

    X0 = cpd_reconstruct(S, G, M)
    Y0 = predict_fmri(truth)
    X = add_noise(X0, spec.snr_x_db, rng)
    Y = add_noise(Y0, spec.snr_y_db, rng)
    s_ref = add_noise(S[:, r_ied], spec.ref_snr_db, rng)

    nx, ny = float(np.linalg.norm(X)), float(np.linalg.norm(Y))
    truth.M = truth.M / nx
    truth.V = truth.V / ny
    truth.P = truth.P / ny
    return SynthData(
        X=X / nx,
        Y=Y / ny,
        truth=truth,
        s_ref=s_ref,
        spec=spec,
        active=active,
        deviant=deviant,
        norms=(nx, ny),
        clean={"X": X0 / nx, "Y": Y0 / ny},
    )
