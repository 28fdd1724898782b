"""Rank-R canonical polyadic decomposition and the core consistency diagnostic.

The CPD is fitted with a Gauss-Newton method: the normal equations
``J^T J p = -g`` are solved inexactly by preconditioned conjugate gradients
using the structured Gramian of the CPD Jacobian (never formed explicitly),
and steps are globalized with a dogleg trust region.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor_core import CpdFactors, cpd_reconstruct, mttkrp

logger = logging.getLogger(__name__)

__all__ = [
    "CpdOptions",
    "CpdResult",
    "CoreConsistency",
    "cpd_fit",
    "corcondia",
    "congruence_match",
]


@dataclass
class CpdOptions:
    max_iters: int = 2000
    max_cg_iters: int = 400
    rel_cost_tol: float = 1e-8
    seed: int | None = 0
    cg_tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1 or self.max_cg_iters < 1:
            raise ValueError("iteration limits must be positive")
        if not self.rel_cost_tol > 0:
            raise ValueError("rel_cost_tol must be > 0")


@dataclass
class CpdResult:
    factors: CpdFactors
    rel_error: float
    iterations: int
    converged: bool
    warning: str | None = None
    trace: list = field(default_factory=list)
    elapsed: float = 0.0


def _gram(U):
    return [u.T @ u for u in U]


def _hadamard_except(grams, skip):
    out = np.ones_like(grams[0])
    for n, g in enumerate(grams):
        if n not in skip:
            out = out * g
    return out


def _gramian_vec(U, grams, X):
    """Product of the Gauss-Newton Gramian ``J^T J`` with the block vector ``X``."""
    Y = []
    proj = [u.T @ x for u, x in zip(U, X)]
    for n in range(3):
        y = X[n] @ _hadamard_except(grams, {n})
        for m in range(3):
            if m != n:
                y = y + U[n] @ (_hadamard_except(grams, {n, m}) * proj[m]).T
        Y.append(y)
    return Y


def _dot(A, B):
    return float(sum(np.vdot(a, b) for a, b in zip(A, B)))


def _pcg(U, grams, rhs, max_iters, tol):
    # block-Jacobi preconditioner: the diagonal Gramian blocks are W_nn (x) I
    precs = []
    for n in range(3):
        W = _hadamard_except(grams, {n})
        precs.append(np.linalg.pinv(W, rcond=1e-12, hermitian=True))
    apply_prec = lambda R: [r @ p for r, p in zip(R, precs)]

    x = [np.zeros_like(r) for r in rhs]
    r = [b.copy() for b in rhs]
    z = apply_prec(r)
    p = [zz.copy() for zz in z]
    rz = _dot(r, z)
    bnorm = np.sqrt(_dot(rhs, rhs))
    if bnorm == 0:
        return x, 0
    it = 0
    for it in range(1, max_iters + 1):
        Ap = _gramian_vec(U, grams, p)
        pAp = _dot(p, Ap)
        if pAp <= 0:
            break
        alpha = rz / pAp
        x = [a + alpha * b for a, b in zip(x, p)]
        r = [a - alpha * b for a, b in zip(r, Ap)]
        if np.sqrt(_dot(r, r)) <= tol * bnorm:
            break
        z = apply_prec(r)
        rz_new = _dot(r, z)
        beta = rz_new / rz
        rz = rz_new
        p = [a + beta * b for a, b in zip(z, p)]
    return x, it


def _cost(t, U):
    return 0.5 * float(np.sum((t - cpd_reconstruct(*U)) ** 2))


def cpd_fit(t, r, opts=None, init=None):
    """Fit a rank-``r`` CPD to the third-order tensor ``t``.

    Parameters
    ----------
    t : ndarray, shape (I_s, I_g, I_m)
    r : int
        Number of rank-1 terms.
    opts : CpdOptions, optional
    init : CpdFactors, optional
        Starting point. Defaults to i.i.d. standard normal factors drawn from
        ``opts.seed``.

    Returns
    -------
    CpdResult
        ``trace`` holds one ``{"iter", "cost", "rel_update"}`` record per
        accepted iteration; ``cost`` is ``0.5 * ||t - [[S, G, M]]||_F^2``.
    """
    opts = opts or CpdOptions()
    t = np.asarray(t, dtype=float)
    if t.ndim != 3:
        raise ValueError("cpd_fit expects a third-order tensor")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    r = int(r)
    dims = t.shape
    if r < 1 or r > min(dims[0] * dims[1], dims[0] * dims[2], dims[1] * dims[2]):
        raise ValueError(f"rank {r} outside sane range for shape {dims}")

    start = time.perf_counter()
    tnorm2 = float(np.sum(t**2))
    if tnorm2 == 0.0:
        zeros = CpdFactors(*(np.zeros((d, r)) for d in dims))
        return CpdResult(zeros, 0.0, 0, True, trace=[{"iter": 0, "cost": 0.0, "rel_update": 0.0}])

    if init is None:
        rng = np.random.default_rng(opts.seed)
        U = [rng.standard_normal((d, r)) for d in dims]
    else:
        U = [u.astype(float).copy() for u in init.as_list()]

    f = _cost(t, U)
    f0 = f
    floor = 0.5 * tnorm2 * 1e-28
    radius = np.sqrt(sum(np.sum(u**2) for u in U))
    trace = [{"iter": 0, "cost": f, "rel_update": float("nan")}]
    converged = False
    warning = None
    it = 0
    rejections = 0

    while it < opts.max_iters:
        grams = _gram(U)
        grad = [U[n] @ _hadamard_except(grams, {n}) - mttkrp(t, U, n + 1) for n in range(3)]
        gnorm2 = _dot(grad, grad)
        if gnorm2 == 0.0 or f <= floor:
            converged = True
            break

        p_gn, _ = _pcg(U, grams, [-g for g in grad], opts.max_cg_iters, opts.cg_tol)
        Jg = _dot(grad, _gramian_vec(U, grams, grad))
        alpha = gnorm2 / Jg if Jg > 0 else radius / np.sqrt(gnorm2)
        p_sd = [-alpha * g for g in grad]

        # dogleg step inside the trust region
        n_gn = np.sqrt(_dot(p_gn, p_gn))
        n_sd = np.sqrt(_dot(p_sd, p_sd))
        if n_gn <= radius:
            step = p_gn
        elif n_sd >= radius:
            step = [(radius / n_sd) * s for s in p_sd]
        else:
            d = [a - b for a, b in zip(p_gn, p_sd)]
            dd = _dot(d, d)
            sd = _dot(p_sd, d)
            tau = (-sd + np.sqrt(sd**2 + dd * (radius**2 - n_sd**2))) / dd
            step = [a + tau * b for a, b in zip(p_sd, d)]
        n_step = np.sqrt(_dot(step, step))

        predicted = -(_dot(grad, step) + 0.5 * _dot(step, _gramian_vec(U, grams, step)))
        U_new = [u + s for u, s in zip(U, step)]
        f_new = _cost(t, U_new)
        actual = f - f_new
        rho = actual / predicted if predicted > 0 else -1.0

        if rho < 0.25:
            radius = 0.5 * n_step
        elif rho > 0.75 and n_step > 0.99 * radius:
            radius = 2.0 * radius

        if actual > 0:
            it += 1
            rejections = 0
            rel_update = actual / f0
            superlinear = f_new < 0.5 * f
            U, f = U_new, f_new
            trace.append({"iter": it, "cost": f, "rel_update": rel_update})
            znorm = np.sqrt(sum(np.sum(u**2) for u in U))
            if f <= floor or (rel_update < opts.rel_cost_tol and not superlinear):
                converged = True
                break
            if n_step <= 1e-15 * znorm:
                converged = True
                break
        else:
            rejections += 1
            if radius <= 1e-14 * max(1.0, np.sqrt(sum(np.sum(u**2) for u in U))) or rejections > 60:
                warning = "trust region collapsed without cost decrease"
                logger.warning("cpd_fit: %s (iter %d)", warning, it)
                break

    rel_error = float(np.sqrt(2.0 * f / tnorm2))
    return CpdResult(
        CpdFactors(*U),
        rel_error,
        it,
        converged,
        warning=warning,
        trace=trace,
        elapsed=time.perf_counter() - start,
    )


class CoreConsistency(NamedTuple):
    value: float
    meaningless: bool


def _normalized(factors):
    U = [np.asarray(u, dtype=float) for u in factors.as_list()]
    norms = [np.linalg.norm(u, axis=0) for u in U]
    safe = [np.where(n > 0, n, 1.0) for n in norms]
    return [u / n for u, n in zip(U, safe)], norms[0] * norms[1] * norms[2]


def corcondia(t, factors, variant="fraction", rcond=1e-10):
    """Core consistency diagnostic, in percent.

    The least-squares core for the given factors is ``t x1 S+ x2 G+ x3 M+``
    with each factor column-normalized first, and each pseudoinverse truncated
    at ``rcond * sigma_max``.

    ``variant="fraction"`` returns ``100 * (1 - SS_offdiag / SS_total)`` and is
    bounded to [0, 100]. ``variant="bro"`` returns
    ``100 * (1 - ||core - I||^2 / R)`` with the amplitudes absorbed so the
    ideal core is the identity; it may be negative.

    For ``R = 1`` the diagnostic is meaningless and 100 is returned with the
    flag set.
    """
    t = np.asarray(t, dtype=float)
    if tuple(t.shape) != factors.shape:
        raise ValueError(f"factor shapes {factors.shape} do not match tensor {t.shape}")
    R = factors.rank
    if R == 1:
        return CoreConsistency(100.0, True)
    U, lam = _normalized(factors)
    if variant == "bro":
        U[2] = U[2] * lam
    elif variant != "fraction":
        raise ValueError(f"unknown variant {variant!r}")
    pinvs = [np.linalg.pinv(u, rcond=rcond) for u in U]
    core = np.einsum("ijk,pi,qj,rk->pqr", t, *pinvs, optimize=True)
    diag = np.zeros((R, R, R), dtype=bool)
    diag[np.arange(R), np.arange(R), np.arange(R)] = True
    if variant == "fraction":
        total = float(np.sum(core**2))
        if total == 0.0:
            return CoreConsistency(0.0, False)
        off = float(np.sum(core[~diag] ** 2))
        return CoreConsistency(100.0 * (1.0 - off / total), False)
    ideal = diag.astype(float)
    return CoreConsistency(100.0 * (1.0 - float(np.sum((core - ideal) ** 2)) / R), False)


def congruence_match(true, est):
    """Match the components of ``est`` to ``true`` up to permutation and sign.

    Components are paired by maximizing the product over modes of absolute
    column cosines (Hungarian assignment).

    Returns
    -------
    perm : ndarray
        ``est`` component assigned to each ``true`` component.
    per_mode : ndarray, shape (n_modes, R)
        Absolute cosine per mode for each matched pair.
    """
    true_l = true.as_list() if hasattr(true, "as_list") else list(true)
    est_l = est.as_list() if hasattr(est, "as_list") else list(est)
    cos = []
    for a, b in zip(true_l, est_l):
        an = a / np.maximum(np.linalg.norm(a, axis=0), 1e-300)
        bn = b / np.maximum(np.linalg.norm(b, axis=0), 1e-300)
        cos.append(np.abs(an.T @ bn))
    score = np.prod(cos, axis=0)
    rows, cols = linear_sum_assignment(-score)
    per_mode = np.array([c[rows, cols] for c in cos])
    return cols, per_mode
