"""Dense tensor and matrix kernels.

Third-order tensors are plain ``ndarray`` objects of shape ``(I_s, I_g, I_m)``.
Their canonical linear order is mode-1 fastest (Fortran order): entry
``(i, j, k)`` sits at position ``i + I_s * (j + I_g * k)``.

The mode-n unfolding places mode n along the rows and orders the columns by
the remaining modes in ascending order, first remaining mode fastest::

    unfold(t, 1)[i, j + I_g * k] = t[i, j, k]
    unfold(t, 2)[j, i + I_s * k] = t[i, j, k]
    unfold(t, 3)[k, i + I_s * j] = t[i, j, k]

With this convention ``unfold(cpd_reconstruct(S, G, M), 1) == S @ khatri_rao(M, G).T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CpdFactors",
    "unfold",
    "fold",
    "khatri_rao",
    "cpd_reconstruct",
    "mttkrp",
]


def _check_mode(mode):
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")


def unfold(t, mode):
    """Mode-``mode`` unfolding (1-based) of a third-order tensor."""
    _check_mode(mode)
    t = np.asarray(t, dtype=float)
    if t.ndim != 3:
        raise ValueError("unfold expects a third-order tensor")
    return np.reshape(np.moveaxis(t, mode - 1, 0), (t.shape[mode - 1], -1), order="F")


def fold(mat, mode, shape):
    """Inverse of :func:`unfold`."""
    _check_mode(mode)
    shape = tuple(int(s) for s in shape)
    moved = (shape[mode - 1],) + tuple(s for n, s in enumerate(shape) if n != mode - 1)
    return np.moveaxis(np.reshape(np.asarray(mat, dtype=float), moved, order="F"), 0, mode - 1)


def khatri_rao(a, b):
    """Columnwise Kronecker product; column r equals ``kron(a[:, r], b[:, r])``.

    Parameters
    ----------
    a : ndarray, shape (I, R)
    b : ndarray, shape (J, R)

    Returns
    -------
    ndarray, shape (I * J, R)
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"khatri_rao needs equal column counts, got {a.shape[1]} and {b.shape[1]}"
        )
    return np.einsum("ir,jr->ijr", a, b).reshape(a.shape[0] * b.shape[0], a.shape[1])


@dataclass
class CpdFactors:
    """Factor matrices of a rank-R CPD: temporal ``S``, spectral ``G``, spatial ``M``."""

    S: np.ndarray
    G: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        ranks = {self.S.shape[1], self.G.shape[1], self.M.shape[1]}
        if len(ranks) != 1 or self.S.shape[1] < 1:
            raise ValueError("factor matrices must share a column count >= 1")

    @property
    def rank(self):
        return self.S.shape[1]

    @property
    def shape(self):
        return (self.S.shape[0], self.G.shape[0], self.M.shape[0])

    def as_list(self):
        return [self.S, self.G, self.M]

    def copy(self):
        return CpdFactors(self.S.copy(), self.G.copy(), self.M.copy())


def cpd_reconstruct(S, G=None, M=None):
    """Full tensor ``sum_r s_r o g_r o m_r``.

    Accepts either a :class:`CpdFactors` or the three factor matrices.
    """
    if isinstance(S, CpdFactors):
        S, G, M = S.as_list()
    return np.einsum("ir,jr,kr->ijk", S, G, M)


def mttkrp(t, factors, mode):
    """Matricized tensor times Khatri-Rao product for mode ``mode`` (1-based).

    Equivalent to ``unfold(t, mode) @ khatri_rao(*reversed(others))`` without
    forming the Khatri-Rao product.
    """
    _check_mode(mode)
    S, G, M = factors
    if mode == 1:
        return np.einsum("ijk,jr,kr->ir", t, G, M, optimize=True)
    if mode == 2:
        return np.einsum("ijk,ir,kr->jr", t, S, M, optimize=True)
    return np.einsum("ijk,ir,jr->kr", t, S, G, optimize=True)
