"""Nonparametric spatial maps, familywise thresholds and HRF deviation metrics.

Significance of each source's spatial map is assessed against surrogate fMRI
data built by permuting wavelet detail coefficients within each scale, which
keeps the spectrum and (with one permutation shared by all regions) the
cross-region correlation of the adjusted data.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pywt
from scipy.special import logsumexp

from .hrf import toeplitz
from .model import basis_waveforms, local_hrfs

logger = logging.getLogger(__name__)

__all__ = [
    "WAVELET",
    "SnpmReport",
    "HrfMetricMaps",
    "wavelet_levels",
    "wavelet_surrogate",
    "iter_surrogates",
    "wavelet_resample",
    "PseudoT",
    "pseudo_t",
    "fwe_thresholds",
    "snpm",
    "hrf_extremity",
    "hrf_entropy",
    "top_k",
    "hrf_metrics",
    "ioz_overlap_pvalue",
]

WAVELET = "db4"
METRIC_WINDOW = 20


def _next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def _pad(Y):
    n = Y.shape[0]
    n2 = _next_pow2(n)
    if n2 == n:
        return Y
    return np.pad(Y, ((0, n2 - n), (0, 0)), mode="reflect")


def wavelet_levels(n):
    """Full decomposition depth used for a series of ``n`` samples."""
    return pywt.dwt_max_level(_next_pow2(n), pywt.Wavelet(WAVELET).dec_len)


def _decompose(Y):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] < 8:
        raise ValueError("wavelet resampling needs at least 8 time points")
    Yp = _pad(Y)
    level = wavelet_levels(Y.shape[0])
    return pywt.wavedec(Yp, WAVELET, mode="periodization", level=level, axis=0), Y.shape[0]


def _reconstruct(coeffs, n):
    return pywt.waverec(coeffs, WAVELET, mode="periodization", axis=0)[:n]


def wavelet_surrogate(Y, perms, per_region=False):
    """Surrogate of ``Y`` with detail coefficients permuted by ``perms``.

    ``perms[j]`` permutes the level-``j`` detail coefficients (coarse to fine,
    matching ``pywt.wavedec`` order after the approximation). With
    ``per_region`` each entry is instead a (coefficients x regions) array of
    column-wise permutations.
    """
    coeffs, n = _decompose(Y)
    out = [coeffs[0]]
    for c, p in zip(coeffs[1:], perms):
        p = np.asarray(p)
        if per_region:
            out.append(np.take_along_axis(c, p, axis=0))
        else:
            out.append(c[p])
    return _reconstruct(out, n)


def _surrogate_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def iter_surrogates(Y, L, seed, per_region=False):
    """Yield ``L`` wavelet surrogates; surrogate ``l`` depends only on ``(seed, l)``."""
    if L <= 0:
        raise ValueError("number of surrogates must be positive")
    coeffs, n = _decompose(Y)
    for l in range(L):
        rng = _surrogate_rng(seed, l)
        out = [coeffs[0]]
        for c in coeffs[1:]:
            if per_region:
                idx = np.argsort(rng.random(c.shape), axis=0)
                out.append(np.take_along_axis(c, idx, axis=0))
            else:
                out.append(c[rng.permutation(c.shape[0])])
        yield _reconstruct(out, n)


def wavelet_resample(Y, L, seed, per_region=False):
    """``L`` surrogate matrices stacked along a leading axis."""
    return np.stack(list(iter_surrogates(Y, L, seed, per_region)))


class PseudoT:
    """Per-region regression of the data on the source regressors of a fitted model.

    Region ``v`` is regressed on ``D_v = [z_1 .. z_R]`` with
    ``z_r = sum_k B[v, k] H_k s_r``. The projector and the diagonal of
    ``(D_v^T D_v)^-1`` are computed once so many data sets can be tested.
    """

    def __init__(self, f):
        I_s = f.S.shape[0]
        if I_s <= f.R:
            raise ValueError("need more time points than sources")
        wave = basis_waveforms(f.thetas, f.tr, f.n_post, f.n_pre)
        Z = np.stack([toeplitz(w, I_s, f.n_pre) @ f.S for w in wave])  # K x I_s x R
        self.dof = I_s - f.R
        self.design = np.einsum("vk,ksr->vsr", f.B, Z)  # I_v x I_s x R
        self.pinv = np.empty((f.B.shape[0], f.R, I_s))
        self.cdiag = np.empty((f.B.shape[0], f.R))
        self.collinear = []
        for v, D in enumerate(self.design):
            gram = D.T @ D
            if np.linalg.matrix_rank(D) < f.R:
                self.collinear.append(v)
            self.pinv[v] = np.linalg.pinv(D, rcond=1e-10)
            self.cdiag[v] = np.diag(np.linalg.pinv(gram, rcond=1e-14, hermitian=True))
        if self.collinear:
            logger.warning("pseudo_t: collinear regressors in %d regions", len(self.collinear))

    def __call__(self, Y):
        """t-statistics, shape ``(I_v, R)`` or ``(L, I_v, R)`` for stacked data."""
        Y = np.asarray(Y, dtype=float)
        stacked = Y.ndim == 3
        Ys = Y if stacked else Y[None]
        beta = np.einsum("vrs,lsv->lvr", self.pinv, Ys)
        fit = np.einsum("vsr,lvr->lsv", self.design, beta)
        rss = np.sum((Ys - fit) ** 2, axis=1)  # L x I_v
        sigma = np.sqrt(rss / self.dof)
        se = sigma[..., None] * np.sqrt(np.maximum(self.cdiag, 0.0))[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.sign(beta) * np.inf)
        t = np.where(beta == 0, 0.0, t)
        return t if stacked else t[0]


def pseudo_t(f, Y):
    """Pseudo t-statistic of every source in every region, shape ``(I_v, R)``."""
    return PseudoT(f)(Y)


def _nearest_rank(sorted_vals, q):
    L = sorted_vals.shape[0]
    k = max(int(math.ceil(q * L - 1e-12)), 1)
    return sorted_vals[k - 1]


def fwe_thresholds(null_t, alpha=0.05):
    """Max/min-statistic thresholds per source.

    Parameters
    ----------
    null_t : ndarray, shape (L, I_v) or (L, I_v, R)
        Statistics on surrogate data.

    Returns
    -------
    t_act, t_deact : ndarray (R,) or float
        Nearest-rank ``1 - alpha`` quantile of the per-surrogate maxima and
        ``alpha`` quantile of the per-surrogate minima.
    """
    null_t = np.asarray(null_t, dtype=float)
    squeeze = null_t.ndim == 2
    if squeeze:
        null_t = null_t[..., None]
    if null_t.shape[0] < 20:
        raise ValueError("need at least 20 surrogates")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    maxima = np.sort(null_t.max(axis=1), axis=0)
    minima = np.sort(null_t.min(axis=1), axis=0)
    t_act = _nearest_rank(maxima, 1.0 - alpha)
    t_deact = _nearest_rank(minima, alpha)
    if squeeze:
        return float(t_act[0]), float(t_deact[0])
    return t_act, t_deact


@dataclass
class SnpmReport:
    """Statistical maps; ``pseudo_t`` and the masks are (R, I_v)."""

    pseudo_t: np.ndarray
    act_thresholds: np.ndarray
    deact_thresholds: np.ndarray
    activation: np.ndarray
    deactivation: np.ndarray
    L: int
    seed: int
    alpha: float = 0.05
    collinear_regions: list = field(default_factory=list)

    def to_json(self):
        return {
            "pseudo_t": self.pseudo_t.tolist(),
            "act_thresholds": [float(v) for v in self.act_thresholds],
            "deact_thresholds": [float(v) for v in self.deact_thresholds],
            "activation": [np.flatnonzero(m).tolist() for m in self.activation],
            "deactivation": [np.flatnonzero(m).tolist() for m in self.deactivation],
            "L": int(self.L),
            "seed": int(self.seed),
            "alpha": float(self.alpha),
            "collinear_regions": list(self.collinear_regions),
        }


def snpm(f, Y, L=250, seed=0, alpha=0.05, per_region=False):
    """Pseudo-t maps of all sources with wavelet-surrogate FWE thresholds.

    The statistics use the adjusted data ``Y - N P^T``; only that matrix is
    resampled.
    """
    Yadj = np.asarray(Y, dtype=float) - f.N @ f.P.T
    stat = PseudoT(f)
    t_obs = stat(Yadj)
    null = np.empty((L,) + t_obs.shape)
    for l, sur in enumerate(iter_surrogates(Yadj, L, seed, per_region)):
        null[l] = stat(sur)
    t_act, t_deact = fwe_thresholds(null, alpha)
    act = t_obs > t_act[None, :]
    deact = (t_obs < t_deact[None, :]) & ~act
    return SnpmReport(
        pseudo_t=t_obs.T.copy(),
        act_thresholds=np.asarray(t_act),
        deact_thresholds=np.asarray(t_deact),
        activation=act.T.copy(),
        deactivation=deact.T.copy(),
        L=int(L),
        seed=int(seed),
        alpha=float(alpha),
        collinear_regions=list(stat.collinear),
    )


def _window(H, window):
    H = np.atleast_2d(np.asarray(H, dtype=float))
    return H[:, : min(window, H.shape[1])]


def hrf_extremity(H, window=METRIC_WINDOW, return_flags=False):
    """One minus the mean absolute correlation of each region's HRF with all others.

    ``H`` holds one waveform per row, starting at the earliest lag; only the
    first ``window`` samples are used. A constant waveform correlates 0 with
    everything and is flagged.
    """
    W = _window(H, window)
    n = W.shape[0]
    if n < 2:
        raise ValueError("need at least two regions")
    C = W - W.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(C, axis=1)
    flat = np.flatnonzero(norms == 0)
    if flat.size:
        logger.warning("hrf_extremity: constant waveforms in regions %s", flat.tolist())
    U = C / np.where(norms > 0, norms, 1.0)[:, None]
    corr = np.abs(U @ U.T)
    np.fill_diagonal(corr, 0.0)
    ext = np.clip(1.0 - corr.sum(axis=1) / (n - 1), 0.0, 1.0)
    if return_flags:
        return ext, flat.tolist()
    return ext


def hrf_entropy(H, window=METRIC_WINDOW, return_flags=False):
    """Leave-one-out kernel density surprise of each region's HRF.

    The reference set for region ``i`` is every other region's waveform and
    its negation (``2 (I_v - 1)`` points). Kernels are diagonal Gaussians with
    per-sample variance ``(4 / (d + 2))^(2 / (d + 4)) n^(-2 / (d + 4)) s2``
    (``d`` samples, ``n`` points); ``s2`` is the per-sample mean square of the
    sign-extended set of all regions, i.e. its variance. The entropy is
    ``-log`` of the density at ``h_i``. Variances below 1e-12 are floored and
    flagged.
    """
    W = _window(H, window)
    n_reg, d = W.shape
    if n_reg < 3:
        raise ValueError("need at least three regions")
    n_pts = 2 * (n_reg - 1)
    s2 = np.mean(W**2, axis=0)
    floored = np.flatnonzero(s2 < 1e-12).tolist()
    if floored:
        logger.info("hrf_entropy: zero-variance samples %s floored at 1e-12", floored)
    s2 = np.maximum(s2, 1e-12)
    bw = (4.0 / (d + 2)) ** (2.0 / (d + 4)) * n_pts ** (-2.0 / (d + 4)) * s2
    log_norm = -0.5 * float(np.sum(np.log(2.0 * np.pi * bw)))
    out = np.empty(n_reg)
    for i in range(n_reg):
        others = np.delete(W, i, axis=0)
        plus = -0.5 * np.sum((W[i] - others) ** 2 / bw, axis=1)
        minus = -0.5 * np.sum((W[i] + others) ** 2 / bw, axis=1)
        # pairing each point with its negation keeps the result exactly sign-symmetric
        pair = np.logaddexp(plus, minus)
        out[i] = -(log_norm + logsumexp(pair) - math.log(n_pts))
    if return_flags:
        return out, floored
    return out


def top_k(values, k=20):
    """Indices of the ``min(k, n)`` largest values; ties go to the lower region index."""
    values = np.asarray(values, dtype=float)
    return np.argsort(-values, kind="stable")[: min(k, values.size)]


@dataclass
class HrfMetricMaps:
    extremity: np.ndarray
    entropy: np.ndarray
    top_extremity: np.ndarray
    top_entropy: np.ndarray
    flags: dict = field(default_factory=dict)


def hrf_metrics(f_or_H, window=METRIC_WINDOW, k=20):
    """Extremity and entropy maps with their top-``k`` region lists."""
    H = local_hrfs(f_or_H) if hasattr(f_or_H, "thetas") else np.asarray(f_or_H, dtype=float)
    ext, flat = hrf_extremity(H, window, return_flags=True)
    ent, floored = hrf_entropy(H, window, return_flags=True)
    return HrfMetricMaps(ext, ent, top_k(ext, k), top_k(ent, k),
                         {"constant_waveforms": flat, "floored_samples": floored})


def ioz_overlap_pvalue(top, ioz, n_regions):
    """Hypergeometric upper-tail probability of the observed overlap.

    ``P(X >= k)`` for ``|top|`` draws without replacement from ``n_regions``
    regions of which ``|ioz|`` are in the onset zone, with ``k = |top & ioz|``.
    Computed exactly with integer binomial coefficients.
    """
    top, ioz = set(int(x) for x in top), set(int(x) for x in ioz)
    n_regions = int(n_regions)
    if len(ioz) > n_regions or len(top) > n_regions:
        raise ValueError("sets larger than the number of regions")
    if any(x < 0 or x >= n_regions for x in top | ioz):
        raise ValueError("region index out of range")
    k = len(top & ioz)
    K, n = len(ioz), len(top)
    total = math.comb(n_regions, n)
    tail = sum(math.comb(K, j) * math.comb(n_regions - K, n - j) for j in range(k, min(K, n) + 1))
    return tail / total
