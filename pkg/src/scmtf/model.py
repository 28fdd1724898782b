"""Structured coupled matrix-tensor factorization (sCMTF).

The EEG tensor ``X`` (time x frequency x channel) follows a rank-R CPD
``[[S, G, M]]``. The regional BOLD matrix ``Y`` (time x region) is modeled as

    Y_hat = sum_k (H_k S) (V * B[:, k])^T + N P^T

where ``H_k`` convolves with the k-th parametrized HRF basis function, ``B``
holds per-region basis weights and ``V`` per-region source amplitudes, and
``N P^T`` is an uncoupled rank-Q nuisance term. The temporal factor ``S`` is
shared by both modalities.

The fitted cost is

    J = beta_x ||X - X_hat||^2 + beta_y ||Y - Y_hat||^2
        + gamma_x sum_r lambda_x[r] + gamma_y sum_r lambda_y[r]

with ``lambda_x[r] = ||s_r|| ||g_r|| ||m_r||`` and
``lambda_y[r] = sum_k ||b_k * v_r||``. Norms inside the penalties are smoothed
as ``sqrt(||.||^2 + eps^2)`` so the cost is differentiable everywhere.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import hrf as hrf_mod
from .cpd import CpdOptions, cpd_fit
from .tensor_core import cpd_reconstruct, mttkrp

logger = logging.getLogger(__name__)

__all__ = [
    "FactorSet",
    "CostWeights",
    "FitOptions",
    "FitResult",
    "normalize_data",
    "basis_waveforms",
    "local_hrfs",
    "predict_fmri",
    "predict_eeg",
    "amplitudes",
    "scmtf_cost",
    "fold_rank1",
    "scmtf_init",
    "scmtf_fit",
    "boundary_row_weights",
]

EPS = 1e-12
THETA_LOWER = np.array([1.0 + 1e-6, 1e-8, 1.0 + 1e-6, 1e-8, 1e-8])


@dataclass
class FactorSet:
    """All unknowns of the coupled model.

    ``thetas`` has shape (K, 5); ``N`` and ``P`` have zero columns when Q = 0.
    """

    S: np.ndarray
    G: np.ndarray
    M: np.ndarray
    B: np.ndarray
    V: np.ndarray
    N: np.ndarray
    P: np.ndarray
    thetas: np.ndarray
    tr: float
    n_pre: int = hrf_mod.N_PRE
    n_post: int | None = None

    def __post_init__(self):
        for name in ("S", "G", "M", "B", "V", "N", "P", "thetas"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.N.size == 0:
            self.N = self.N.reshape(self.S.shape[0], 0)
        if self.P.size == 0:
            self.P = self.P.reshape(self.V.shape[0], 0)
        if self.n_post is None:
            self.n_post = hrf_mod.default_n_post(self.tr, self.n_pre)
        R = self.S.shape[1]
        if self.G.shape[1] != R or self.M.shape[1] != R or self.V.shape[1] != R:
            raise ValueError("S, G, M and V must share the rank R")
        if self.B.shape != (self.V.shape[0], self.thetas.shape[0]) or self.thetas.shape[1] != 5:
            raise ValueError("B must be (I_v, K) and thetas (K, 5)")
        if self.N.shape[1] != self.P.shape[1]:
            raise ValueError("N and P must share the nuisance rank Q")

    @property
    def R(self):
        return self.S.shape[1]

    @property
    def K(self):
        return self.thetas.shape[0]

    @property
    def Q(self):
        return self.N.shape[1]

    def copy(self):
        return replace(self, **{k: getattr(self, k).copy() for k in ("S", "G", "M", "B", "V", "N", "P", "thetas")})

    def blocks(self):
        return {k: getattr(self, k) for k in ("S", "G", "M", "B", "V", "N", "P", "thetas")}

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.blocks().values())


@dataclass
class CostWeights:
    beta_x: float = 1.0
    beta_y: float = 1.0
    gamma_x: float = 1e-3
    gamma_y: float = 1e-3

    def __post_init__(self):
        if min(self.beta_x, self.beta_y) <= 0 or min(self.gamma_x, self.gamma_y) < 0:
            raise ValueError("cost weights must be positive")


@dataclass
class FitOptions:
    max_iters: int = 1000
    rel_tol: float = 1e-8
    history: int = 20
    als_sweeps: int = 20
    cpd: CpdOptions = field(default_factory=lambda: CpdOptions(max_iters=2000))
    hrf_noise: float = 0.1


@dataclass
class FitResult:
    factors: FactorSet
    cost: float
    init_cost: float
    trace: list
    iterations: int
    converged: bool
    flag: str | None = None
    als_residual: float | None = None
    elapsed: float = 0.0


def normalize_data(X, Y):
    """Scale ``X`` and ``Y`` to unit Frobenius norm; returns the scaled data and the norms."""
    nx, ny = float(np.linalg.norm(X)), float(np.linalg.norm(Y))
    if nx == 0 or ny == 0:
        raise ValueError("cannot normalize an all-zero data set")
    return X / nx, Y / ny, (nx, ny)


def basis_waveforms(thetas, tr, n_post, n_pre=hrf_mod.N_PRE):
    """(K, n_pre + n_post) samples of every basis function."""
    t = (hrf_mod.lag_grid(n_post, n_pre) + n_pre) * tr
    return np.array([hrf_mod.hrf_eval(th, t) for th in np.atleast_2d(thetas)])


def _basis_jacobians(thetas, tr, n_post, n_pre):
    t = (hrf_mod.lag_grid(n_post, n_pre) + n_pre) * tr
    return [hrf_mod.hrf_eval_grad(th, t) for th in np.atleast_2d(thetas)]


def local_hrfs(f):
    """(I_v, n_pre + n_post) HRF of every region: ``B @ basis_waveforms``."""
    return f.B @ basis_waveforms(f.thetas, f.tr, f.n_post, f.n_pre)


def _toeplitz_bank(f, I_s):
    wave = basis_waveforms(f.thetas, f.tr, f.n_post, f.n_pre)
    return wave, [hrf_mod.toeplitz(w, I_s, f.n_pre) for w in wave]


def predict_eeg(f):
    return cpd_reconstruct(f.S, f.G, f.M)


def predict_fmri(f, coupled_only=False):
    """Model prediction of the BOLD matrix (I_s x I_v)."""
    I_s = f.S.shape[0]
    _, Hs = _toeplitz_bank(f, I_s)
    Y = np.zeros((I_s, f.V.shape[0]))
    for k, H in enumerate(Hs):
        Y += (H @ f.S) @ (f.V * f.B[:, k : k + 1]).T
    if not coupled_only and f.Q:
        Y += f.N @ f.P.T
    return Y


def amplitudes(f, eps=0.0):
    """Source amplitudes ``(lambda_x, lambda_y)``; ``eps`` applies the smoothed norm."""
    sn = lambda a: np.sqrt(np.sum(a**2, axis=0) + eps**2)
    lam_x = sn(f.S) * sn(f.G) * sn(f.M)
    lam_y = np.zeros(f.R)
    for k in range(f.K):
        lam_y += sn(f.B[:, k : k + 1] * f.V)
    return lam_x, lam_y


def scmtf_cost(f, X, Y, w=None, row_weights=None, with_grad=True):
    """Cost of the coupled model and its gradient.

    Parameters
    ----------
    f : FactorSet
    X : ndarray (I_s, I_g, I_m)
    Y : ndarray (I_s, I_v)
    w : CostWeights, optional
    row_weights : ndarray (I_s,), optional
        Per-time-point weights on the fMRI residual (0 masks a row).

    Returns
    -------
    J : float
    grad : dict
        Gradient blocks keyed like :meth:`FactorSet.blocks` (only when
        ``with_grad``).
    """
    w = w or CostWeights()
    I_s = f.S.shape[0]
    S, G, M, B, V, N, P = f.S, f.G, f.M, f.B, f.V, f.N, f.P

    Ex = cpd_reconstruct(S, G, M) - X
    wave, Hs = _toeplitz_bank(f, I_s)
    Z = [H @ S for H in Hs]
    Yhat = sum(Z[k] @ (V * B[:, k : k + 1]).T for k in range(f.K))
    if f.Q:
        Yhat = Yhat + N @ P.T
    Ey = Yhat - Y
    if row_weights is not None:
        Ey = Ey * np.sqrt(np.asarray(row_weights, dtype=float))[:, None]

    sq = lambda a: np.sqrt(np.sum(a**2, axis=0) + EPS**2)
    ns, ng, nm = sq(S), sq(G), sq(M)
    nky = np.array([sq(B[:, k : k + 1] * V) for k in range(f.K)])  # K x R

    J = (
        w.beta_x * float(np.sum(Ex**2))
        + w.beta_y * float(np.sum(Ey**2))
        + w.gamma_x * float(np.sum(ns * ng * nm))
        + w.gamma_y * float(np.sum(nky))
    )
    if not np.isfinite(J):
        raise FloatingPointError("non-finite cost; factor blocks: " + ", ".join(
            f"{k}: finite={np.all(np.isfinite(v))}" for k, v in f.blocks().items()))
    if not with_grad:
        return J

    Gx = 2.0 * w.beta_x * Ex
    Gy = 2.0 * w.beta_y * Ey
    if row_weights is not None:
        Gy = Gy * np.sqrt(np.asarray(row_weights, dtype=float))[:, None]

    U = [S, G, M]
    gS = mttkrp(Gx, U, 1)
    gG = mttkrp(Gx, U, 2)
    gM = mttkrp(Gx, U, 3)
    gV = np.zeros_like(V)
    gB = np.zeros_like(B)
    jacs = _basis_jacobians(f.thetas, f.tr, f.n_post, f.n_pre)
    gT = np.zeros_like(f.thetas)
    for k in range(f.K):
        Wk = V * B[:, k : k + 1]
        A = Gy @ Wk
        gS += Hs[k].T @ A
        GZ = Gy.T @ Z[k]
        gV += GZ * B[:, k : k + 1]
        gB[:, k] = np.sum(GZ * V, axis=1)
        gh = hrf_mod.toeplitz_adjoint_lags(A, S, wave.shape[1], f.n_pre)
        gT[k] = jacs[k].T @ gh
    gN = Gy @ P if f.Q else np.zeros_like(N)
    gP = Gy.T @ N if f.Q else np.zeros_like(P)

    # penalties
    gS += w.gamma_x * S / ns * (ng * nm)
    gG += w.gamma_x * G / ng * (ns * nm)
    gM += w.gamma_x * M / nm * (ns * ng)
    for k in range(f.K):
        gV += w.gamma_y * (B[:, k : k + 1] ** 2) * V / nky[k]
        gB[:, k] += w.gamma_y * np.sum((V**2) / nky[k], axis=1) * B[:, k]

    return J, {"S": gS, "G": gG, "M": gM, "B": gB, "V": gV, "N": gN, "P": gP, "thetas": gT}


def fold_rank1(u, K, R):
    """Best rank-1 split of a length ``K*R`` vector folded as a K x R matrix.

    ``u[k * R + r] ~ b[k] * v[r]``; ``v`` has unit norm and the largest-magnitude
    entry of ``b`` is positive.

    Returns
    -------
    b : ndarray (K,)
    v : ndarray (R,)
    residual : float
        Frobenius norm of the part of the folded matrix not captured (the
        energy of the trailing singular values).
    """
    u = np.asarray(u, dtype=float)
    if u.size != K * R:
        raise ValueError("u must have K * R entries")
    if not np.any(u):
        return np.zeros(K), np.zeros(R), 0.0
    U, s, Vt = np.linalg.svd(u.reshape(K, R), full_matrices=False)
    b = s[0] * U[:, 0]
    v = Vt[0].copy()
    if b[np.argmax(np.abs(b))] < 0:
        b, v = -b, -v
    return b, v, float(np.sqrt(np.sum(s[1:] ** 2)))


def _als_bv(Y, Z, B, V, sweeps, row_weights=None):
    """Alternating least squares on B and V with the temporal regressors ``Z`` fixed."""
    K = len(Z)
    sw = None if row_weights is None else np.sqrt(np.asarray(row_weights, dtype=float))[:, None]
    Zs = [z if sw is None else z * sw for z in Z]
    Yw = Y if sw is None else Y * sw
    for _ in range(sweeps):
        for v in range(Y.shape[1]):
            # B row given V row
            Dk = np.column_stack([z @ V[v] for z in Zs])
            B[v] = np.linalg.lstsq(Dk, Yw[:, v], rcond=None)[0]
            # V row given B row
            Dr = sum(B[v, k] * Zs[k] for k in range(K))
            V[v] = np.linalg.lstsq(Dr, Yw[:, v], rcond=None)[0]
    resid = Yw - sum(Zs[k] @ (V * B[:, k : k + 1]).T for k in range(K))
    return B, V, float(np.linalg.norm(resid))


def _balance_cpd(S, G, M):
    lam = np.linalg.norm(S, axis=0) * np.linalg.norm(G, axis=0) * np.linalg.norm(M, axis=0)
    c = np.cbrt(np.where(lam > 0, lam, 1.0))
    unit = lambda a: a / np.where(np.linalg.norm(a, axis=0) > 0, np.linalg.norm(a, axis=0), 1.0)
    return unit(S) * c, unit(G) * c, unit(M) * c


def scmtf_init(X, Y, R, K, Q, seed, tr, opts=None, n_pre=hrf_mod.N_PRE, n_post=None, row_weights=None):
    """Initialization cascade: CPD of X, sampled HRFs, regression, rank-1 folding, ALS, SVD.

    Returns the initial :class:`FactorSet` and the ALS residual norm.
    """
    opts = opts or FitOptions()
    if min(R, K) < 1 or Q < 0:
        raise ValueError("need R, K >= 1 and Q >= 0")
    seeds = np.random.SeedSequence(seed).spawn(2)
    cpd_seed = int(seeds[0].generate_state(1)[0])
    hrf_seed = int(seeds[1].generate_state(1)[0])
    cpd_opts = replace(opts.cpd, seed=cpd_seed)
    cp = cpd_fit(X, R, cpd_opts)
    S, G, M = _balance_cpd(*cp.factors.as_list())
    thetas = np.array([p.as_array() for p in hrf_mod.sample_basis_init(hrf_seed, K, tr, n_pre, opts.hrf_noise)])
    I_s, I_v = Y.shape
    f = FactorSet(S, G, M, np.zeros((I_v, K)), np.zeros((I_v, R)), np.zeros((I_s, 0)),
                  np.zeros((I_v, 0)), thetas, tr, n_pre, n_post)
    _, Hs = _toeplitz_bank(f, I_s)
    Z = [H @ S for H in Hs]
    D = np.hstack(Z)
    if np.linalg.matrix_rank(D) < D.shape[1]:
        logger.warning("scmtf_init: design [H_1 S ... H_K S] is rank deficient")
    Ut = np.linalg.pinv(D, rcond=1e-10) @ Y
    B = np.zeros((I_v, K))
    V = np.zeros((I_v, R))
    for v in range(I_v):
        B[v], V[v], _ = fold_rank1(Ut[:, v], K, R)
    B, V, resid = _als_bv(Y, Z, B, V, opts.als_sweeps, row_weights)
    f.B, f.V = B, V
    if Q:
        E = Y - predict_fmri(f, coupled_only=True)
        u, s, vt = np.linalg.svd(E, full_matrices=False)
        q = min(Q, s.size)
        root = np.sqrt(s[:q])
        N = np.zeros((I_s, Q))
        P = np.zeros((I_v, Q))
        N[:, :q] = u[:, :q] * root
        P[:, :q] = vt[:q].T * root
        f.N, f.P = N, P
    return f, resid


class _Packer:
    """Flatten a FactorSet into an optimizer vector; thetas are scaled by their start values."""

    order = ("S", "G", "M", "B", "V", "N", "P", "thetas")

    def __init__(self, f):
        self.template = f
        self.shapes = [getattr(f, k).shape for k in self.order]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.theta_scale = np.abs(f.thetas).copy()

    def pack(self, f):
        parts = []
        for k in self.order:
            a = getattr(f, k)
            if k == "thetas":
                a = a / self.theta_scale
            parts.append(a.ravel())
        return np.concatenate(parts)

    def pack_grad(self, g):
        parts = []
        for k in self.order:
            a = g[k]
            if k == "thetas":
                a = a * self.theta_scale
            parts.append(a.ravel())
        return np.concatenate(parts)

    def unpack(self, x):
        vals = {}
        pos = 0
        for k, shape, size in zip(self.order, self.shapes, self.sizes):
            a = x[pos : pos + size].reshape(shape)
            if k == "thetas":
                a = a * self.theta_scale
            vals[k] = a.copy()
            pos += size
        return replace(self.template, **vals)

    def bounds(self):
        lo = np.full(sum(self.sizes), -np.inf)
        start = sum(self.sizes[:-1])
        lo[start:] = (THETA_LOWER[None, :] / self.theta_scale).ravel()
        return list(zip(lo, [None] * lo.size))


def scmtf_fit(X, Y, R, K, Q, seed, tr, opts=None, weights=None, init=None, row_weights=None,
              n_pre=hrf_mod.N_PRE, n_post=None):
    """Fit the coupled model by limited-memory BFGS from the initialization cascade.

    ``X`` and ``Y`` should already have unit Frobenius norm (see
    :func:`normalize_data`). The optimizer keeps 20 correction pairs, uses a
    strong-Wolfe line search, and stops when the relative cost update
    ``|J_k - J_{k+1}| / J_0`` drops below ``opts.rel_tol`` or after
    ``opts.max_iters`` iterations. The HRF parameters are bounded to stay
    valid (shapes > 1, rates and ratio > 0).
    """
    opts = opts or FitOptions()
    weights = weights or CostWeights()
    start = time.perf_counter()
    als_resid = None
    if init is None:
        init, als_resid = scmtf_init(X, Y, R, K, Q, seed, tr, opts, n_pre, n_post, row_weights)
    packer = _Packer(init)

    def fun(x):
        J, g = scmtf_cost(packer.unpack(x), X, Y, weights, row_weights)
        return J, packer.pack_grad(g)

    x0 = packer.pack(init)
    J0 = fun(x0)[0]
    trace = [J0]
    state = {"stop": False}

    def callback(intermediate_result):
        J = float(intermediate_result.fun)
        prev = trace[-1]
        trace.append(J)
        if abs(prev - J) <= opts.rel_tol * abs(trace[0]):
            state["stop"] = True
            raise StopIteration

    flag = None
    x = x0
    iterations = 0
    restarted = False
    while True:
        res = minimize(
            fun,
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=packer.bounds(),
            callback=callback,
            options={
                "maxiter": max(opts.max_iters - iterations, 1),
                "maxcor": opts.history,
                "ftol": 0.0,
                "gtol": 1e-14,
                "maxfun": 20 * opts.max_iters,
                "maxls": 40,
            },
        )
        iterations += int(res.nit)
        x = res.x
        if state["stop"] or res.status == 1 or iterations >= opts.max_iters:
            break
        if "ABNORMAL" in str(res.message).upper() or res.status == 2:
            if restarted:
                flag = "line search failed after steepest-descent restart"
                logger.warning("scmtf_fit: %s", flag)
                break
            restarted = True
            continue
        break

    f = packer.unpack(x)
    J = scmtf_cost(f, X, Y, weights, row_weights, with_grad=False)
    return FitResult(
        factors=f,
        cost=J,
        init_cost=J0,
        trace=trace,
        iterations=iterations,
        converged=bool(state["stop"] or res.status == 0),
        flag=flag,
        als_residual=als_resid,
        elapsed=time.perf_counter() - start,
    )


def boundary_row_weights(run_lengths, n_pre=hrf_mod.N_PRE, n_post=None, tr=None):
    """Row weights that drop the fMRI samples whose convolution taps cross a run boundary.

    For concatenated runs, rows within ``n_post - 1`` samples after a boundary or
    ``n_pre`` samples before it mix signals from two runs and are given zero
    weight.
    """
    if n_post is None:
        if tr is None:
            raise ValueError("give n_post or tr")
        n_post = hrf_mod.default_n_post(tr, n_pre)
    total = int(np.sum(run_lengths))
    w = np.ones(total)
    edge = 0
    for length in list(run_lengths)[:-1]:
        edge += int(length)
        w[max(edge - n_pre, 0) : min(edge + n_post - 1, total)] = 0.0
    return w
