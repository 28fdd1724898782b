"""Ambiguity standardization, stability clustering over restarts, IED component and rank selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import FactorSet, basis_waveforms

logger = logging.getLogger(__name__)

__all__ = [
    "StandardizeFlags",
    "standardize",
    "congruence_matrix",
    "SolutionBundle",
    "cluster_components",
    "IedSelection",
    "select_ied",
    "RankDiagnostics",
    "RankChoice",
    "select_rank",
]

CORCONDIA_MIN = 70.0
CARDINALITY_MIN = 10
_UNIT_TOL = 1e-13


@dataclass
class StandardizeFlags:
    zero_components: list = field(default_factory=list)
    zero_regions: list = field(default_factory=list)
    single_polarity_regions: list = field(default_factory=list)


def _needs_rescale(n):
    return n > 0 and abs(n - 1.0) > _UNIT_TOL


def _negative_dominates(x):
    return float(np.sum(x[x < 0] ** 2)) > float(np.sum(x[x > 0] ** 2))


def standardize(f, return_flags=False):
    """Resolve the scale and sign ambiguities of a FactorSet.

    Per component: ``s_r`` and ``g_r`` get unit norm (the scale moves into
    ``m_r``, and the ``s_r`` scale also into ``v_r``); ``s_r`` and ``g_r`` are
    negated when the squared mass of their negative entries exceeds that of the
    positive ones, compensated in ``m_r`` (and ``v_r`` for ``s_r``). Per region:
    the local HRF ``sum_k B[v, k] h_k`` is scaled to unit l1 norm and negated if
    its maximum comes after its minimum, compensated in the row of ``V``.

    Both model reconstructions are unchanged. Values already within 1e-13
    of unit norm are not rescaled, which makes the map idempotent.
    """
    f = f.copy()
    flags = StandardizeFlags()
    S, G, M, V, B = f.S, f.G, f.M, f.V, f.B
    for r in range(f.R):
        ns, ng = np.linalg.norm(S[:, r]), np.linalg.norm(G[:, r])
        if ns == 0 or ng == 0:
            flags.zero_components.append(r)
            continue
        if _needs_rescale(ns):
            S[:, r] /= ns
            M[:, r] *= ns
            V[:, r] *= ns
        if _needs_rescale(ng):
            G[:, r] /= ng
            M[:, r] *= ng
        if _negative_dominates(S[:, r]):
            S[:, r] *= -1
            M[:, r] *= -1
            V[:, r] *= -1
        if _negative_dominates(G[:, r]):
            G[:, r] *= -1
            M[:, r] *= -1

    wave = basis_waveforms(f.thetas, f.tr, f.n_post, f.n_pre)
    for v in range(B.shape[0]):
        h = B[v] @ wave
        c = float(np.sum(np.abs(h)))
        if c == 0:
            flags.zero_regions.append(v)
            continue
        if _needs_rescale(c):
            B[v] /= c
            V[v] *= c
            h = B[v] @ wave
        if h.max() <= 0 or h.min() >= 0:
            flags.single_polarity_regions.append(v)
        if np.argmax(h) > np.argmin(h):
            B[v] *= -1
            V[v] *= -1
    if flags.zero_components:
        logger.warning("standardize: zero-norm components left untouched: %s", flags.zero_components)
    if return_flags:
        return f, flags
    return f


def _unit_cols(a):
    n = np.linalg.norm(a, axis=0)
    return a / np.where(n > 0, n, 1.0)


def congruence_matrix(fa, fb=None):
    """Product over the s, g, m, v signatures of absolute column cosines."""
    fb = fa if fb is None else fb
    out = None
    for name in ("S", "G", "M", "V"):
        c = np.abs(_unit_cols(getattr(fa, name)).T @ _unit_cols(getattr(fb, name)))
        out = c if out is None else out * c
    return np.clip(out, 0.0, 1.0)


@dataclass
class SolutionBundle:
    """Clustered components of all restarts at one rank.

    ``labels[i, r]`` is the cluster of component ``r`` of restart ``i``;
    ``centroids[c]`` is the ``(restart, component)`` pair representing
    cluster ``c`` and ``cardinality[c]`` its size. Clusters are numbered by
    decreasing cardinality, ties by the smallest member index.
    """

    rank: int
    solutions: list
    labels: np.ndarray
    centroids: list
    cardinality: np.ndarray
    threshold: float = 0.85

    def members(self, c):
        return [tuple(int(x) for x in ij) for ij in np.argwhere(self.labels == c)]

    def centroid_factors(self, c):
        i, r = self.centroids[c]
        return self.solutions[i], r


def cluster_components(solutions, threshold=0.85):
    """Group equivalent components across restarts.

    Components are linked when their congruence reaches ``threshold``. Links
    are merged greedily from the strongest down (single linkage); a merge that
    would put two components of the same restart in one cluster is skipped, so
    every cluster has at most one member per restart.
    """
    n_rest = len(solutions)
    if n_rest < 2:
        raise ValueError("clustering needs at least two restarts")
    R = solutions[0].R
    if any(s.R != R for s in solutions):
        raise ValueError("all restarts must share the rank")
    n = n_rest * R
    cong = np.zeros((n, n))
    for i in range(n_rest):
        for j in range(i, n_rest):
            c = congruence_matrix(solutions[i], solutions[j])
            cong[i * R : (i + 1) * R, j * R : (j + 1) * R] = c
            cong[j * R : (j + 1) * R, i * R : (i + 1) * R] = c.T
    restart_of = np.repeat(np.arange(n_rest), R)

    parent = np.arange(n)
    restarts = [{int(restart_of[a])} for a in range(n)]

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    iu, ju = np.triu_indices(n, k=1)
    w = cong[iu, ju]
    keep = (w >= threshold) & (restart_of[iu] != restart_of[ju])
    iu, ju, w = iu[keep], ju[keep], w[keep]
    for e in np.lexsort((ju, iu, -w)):
        a, b = find(iu[e]), find(ju[e])
        if a == b or restarts[a] & restarts[b]:
            continue
        if b < a:
            a, b = b, a
        parent[b] = a
        restarts[a] |= restarts[b]

    roots = np.array([find(a) for a in range(n)])
    uniq, first = np.unique(roots, return_index=True)
    sizes = np.array([np.sum(roots == u) for u in uniq])
    order = np.lexsort((first, -sizes))
    relabel = {int(uniq[k]): c for c, k in enumerate(order)}
    flat = np.array([relabel[int(x)] for x in roots])
    centroids, cardinality = [], []
    for c in range(len(order)):
        idx = np.flatnonzero(flat == c)
        score = cong[np.ix_(idx, idx)].sum(axis=1)
        best = int(idx[np.argmax(score)])
        centroids.append((best // R, best % R))
        cardinality.append(idx.size)
    return SolutionBundle(
        rank=R,
        solutions=list(solutions),
        labels=flat.reshape(n_rest, R),
        centroids=centroids,
        cardinality=np.array(cardinality),
        threshold=threshold,
    )


@dataclass
class IedSelection:
    cluster: int
    restart: int
    component: int
    corr: float
    cardinality: int


def select_ied(bundle, s_ref):
    """Cluster centroid whose temporal signature best matches ``s_ref`` (|Pearson r|).

    Ties go to the larger cluster. The reported correlation keeps its sign.
    """
    s_ref = np.asarray(s_ref, dtype=float)
    if np.ptp(s_ref) == 0:
        raise ValueError("reference time course is constant")
    best = None
    for c, (i, r) in enumerate(bundle.centroids):
        s = bundle.solutions[i].S[:, r]
        corr = 0.0 if np.ptp(s) == 0 else float(np.corrcoef(s, s_ref)[0, 1])
        key = (abs(corr), int(bundle.cardinality[c]), -c)
        if best is None or key > best[0]:
            best = (key, IedSelection(c, int(i), int(r), corr, int(bundle.cardinality[c])))
    return best[1]


@dataclass
class RankDiagnostics:
    """Per-rank selection criteria; ``corcondia`` is None for R = 1."""

    rank: int
    corcondia: float | None
    cardinality: int
    corr: float
    max_t: float
    cost: float | None = None

    def __post_init__(self):
        if not -1.0 <= self.corr <= 1.0:
            raise ValueError("corr must lie in [-1, 1]")


@dataclass
class RankChoice:
    rank: int
    criteria_met: bool
    survivors: list
    reason: str


def select_rank(diags, corcondia_min=CORCONDIA_MIN, cardinality_min=CARDINALITY_MIN):
    """Choose the number of sources from per-rank diagnostics.

    Ranks pass when the core consistency is at least ``corcondia_min`` (R = 1
    is exempt) and the IED cluster has at least ``cardinality_min`` members.
    Among the passing ranks the highest |corr| with the reference wins; ties
    go to the larger IED cluster, then to the larger maximal t-statistic, then
    to the smaller rank. With no passing rank the same ordering is applied to
    all ranks and the choice is flagged.
    """
    diags = sorted(diags, key=lambda d: d.rank)
    if not diags:
        raise ValueError("no ranks evaluated")

    def passes(d):
        cc_ok = d.rank == 1 or (d.corcondia is not None and d.corcondia >= corcondia_min)
        return cc_ok and d.cardinality >= cardinality_min

    survivors = [d for d in diags if passes(d)]
    pool = survivors or diags
    best = max(pool, key=lambda d: (round(abs(d.corr), 12), d.cardinality, d.max_t, -d.rank))
    if survivors:
        reason = "max |corr| among ranks passing the core consistency and cardinality filters"
    else:
        reason = "criteria-unmet: no rank passes the filters; best |corr| overall"
        logger.warning("select_rank: %s", reason)
    return RankChoice(best.rank, bool(survivors), [d.rank for d in survivors], reason)
