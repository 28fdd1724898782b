"""Resumable end-to-end pipeline over a run directory.

Stages, in order: ``mwf``, ``tensorize``, ``decompose``, ``standardize``,
``select``, ``infer``, ``hrfmetrics``, ``summary``. Every stage reads the
artifacts of the previous ones from the run directory, writes its own, and
finally drops a ``<stage>.done`` marker; stages whose marker exists are
skipped, so deleting a stage's outputs and rerunning regenerates them.

All randomness derives from one root seed: the task ``(stage, *indices)``
uses ``SeedSequence([root, crc32(stage), *indices])``.
"""
from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .cpd import corcondia
from .eeg_enhance import EegRecording, mwf_apply, mwf_train, reference_envelope, segments_to_mask
from .inference import PseudoT, hrf_metrics, ioz_overlap_pvalue, snpm, top_k
from .model import CostWeights, FactorSet, FitOptions, boundary_row_weights, normalize_data, scmtf_fit
from .postproc import (
    RankDiagnostics,
    SolutionBundle,
    cluster_components,
    select_ied,
    select_rank,
    standardize,
)
from .tensor_core import CpdFactors
from .tensorize import (
    SpectrogramConfig,
    bandpass_zscore,
    multitaper_spectrogram,
    normalize_eeg_tensor,
    regress_nuisance,
)

logger = logging.getLogger(__name__)

__all__ = [
    "STAGES",
    "RunConfig",
    "PipelineError",
    "stage_seed",
    "resolve_threads",
    "save_factors",
    "load_factors",
    "run_stage",
    "run_pipeline",
]

STAGES = ("mwf", "tensorize", "decompose", "standardize", "select", "infer", "hrfmetrics", "summary")
BLOCKS = ("S", "G", "M", "B", "V", "N", "P", "thetas")


class PipelineError(RuntimeError):
    def __init__(self, stage, last_good, cause):
        super().__init__(f"stage '{stage}' failed ({cause}); last good artifact: {last_good}")
        self.stage = stage
        self.last_good = last_good


@dataclass
class RunConfig:
    """Inputs, model settings and output location of a run.

    Either ``eeg`` (raw channels x samples ``.t64`` with a JSON sidecar holding
    ``sample_rate`` and ``ied_segments``) or ``eeg_tensor`` (a ready
    time x frequency x channel ``.t64``, in which case ``s_ref`` must be given)
    is required. ``fmri`` is a time x region ``.t64``. ``Q`` defaults to twice
    the number of acquisition runs.
    """

    out: str = "run"
    fmri: str | None = None
    eeg: str | None = None
    eeg_sidecar: str | None = None
    eeg_tensor: str | None = None
    s_ref: str | None = None
    confounds: str | None = None
    ioz: str | None = None
    preprocess_fmri: bool = True
    tr: float = 2.5
    run_lengths: list | None = None
    rank_min: int = 1
    rank_max: int = 6
    restarts: int = 50
    K: int = 3
    Q: int | None = None
    L: int = 250
    alpha: float = 0.05
    seed: int = 0
    threads: int | None = None
    tau: int = 4
    fmin: float = 1.0
    fmax: float = 40.0
    binwidth: float = 1.0
    tapers: int = 3
    max_iters: int = 1000
    rel_tol: float = 1e-8
    gamma_x: float = 1e-3
    gamma_y: float = 1e-3
    mask_boundaries: bool = False
    cluster_threshold: float = 0.85
    top: int = 20

    def __post_init__(self):
        if not 1 <= self.rank_min <= self.rank_max:
            raise ValueError("need 1 <= rank_min <= rank_max")
        if self.restarts < 1 or self.K < 1 or self.L < 1:
            raise ValueError("restarts, K and L must be positive")
        if self.Q is not None and self.Q < 0:
            raise ValueError("Q must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.tr > 0:
            raise ValueError("tr must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def check_inputs(self):
        for name in ("fmri", "eeg", "eeg_sidecar", "eeg_tensor", "s_ref", "confounds", "ioz"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"{name}: {p} does not exist")
        if self.fmri is None:
            raise ValueError("an fMRI input is required")
        if self.eeg is None and self.eeg_tensor is None:
            raise ValueError("give either eeg or eeg_tensor")
        if self.eeg_tensor is not None and self.s_ref is None:
            raise ValueError("eeg_tensor needs an s_ref time course")

    @property
    def n_runs(self):
        return len(self.run_lengths) if self.run_lengths else 1

    @property
    def q(self):
        return 2 * self.n_runs if self.Q is None else self.Q

    @property
    def ranks(self):
        return list(range(self.rank_min, self.rank_max + 1))


def stage_seed(root, stage, *indices):
    """Deterministic 32-bit seed for a task, independent of scheduling."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode()), *(int(i) for i in indices)])
    return int(ss.generate_state(1)[0])


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("SCMTF_THREADS")
        threads = int(env) if env else 1
    return max(int(threads), 1)


def save_factors(path, f, extra=None):
    """Write a FactorSet as consecutive ``.t64`` sections plus a JSON manifest next to it."""
    path = Path(path)
    io.write_t64_sections(path, [(getattr(f, k), [f"{k}_rows", f"{k}_cols"]) for k in BLOCKS])
    meta = {"sections": list(BLOCKS), "tr": f.tr, "n_pre": f.n_pre, "n_post": f.n_post}
    meta.update(extra or {})
    io.write_json(path.with_suffix(".json"), meta)


def load_factors(path):
    path = Path(path)
    arrays = io.read_t64_sections(path)
    meta = io.read_json(path.with_suffix(".json"))
    blocks = dict(zip(meta["sections"], arrays))
    return FactorSet(**blocks, tr=meta["tr"], n_pre=meta["n_pre"], n_post=meta["n_post"]), meta


def _done(run, stage):
    return (run / f"{stage}.done").exists()


def _mark(run, stage):
    (run / f"{stage}.done").write_text("ok\n")


# ---------------------------------------------------------------- stages


def _stage_mwf(cfg, run):
    out = run / "mwf"
    out.mkdir(exist_ok=True)
    if cfg.eeg is None:
        io.write_json(out / "mwf.json", {"skipped": "pre-tensorized EEG input"})
        return
    data = io.read_t64(cfg.eeg)
    side = io.read_json(cfg.eeg_sidecar or Path(cfg.eeg).with_suffix(".json"))
    rec = EegRecording(data, float(side["sample_rate"]), segments_to_mask(side["ied_segments"], data.shape[1]))
    filt = mwf_train(rec, cfg.tau)
    y = mwf_apply(filt, rec)
    tr_samples = int(round(cfg.tr * rec.sample_rate))
    io.write_t64(out / "W.t64", filt.W)
    io.write_t64(out / "filtered.t64", y, ["channel", "sample"])
    io.write_t64(out / "s_ref.t64", reference_envelope(y, tr_samples)[:, None], ["time", "one"])
    io.write_json(out / "mwf.json", {"tau": cfg.tau, "sample_rate": rec.sample_rate, "n_channels": rec.n_channels})


def _stage_tensorize(cfg, run):
    out = run / "tensor"
    out.mkdir(exist_ok=True)
    Y = io.read_t64(cfg.fmri)
    info = {}
    if cfg.eeg_tensor is not None:
        X = io.read_t64(cfg.eeg_tensor)
        s_ref = io.read_t64(cfg.s_ref)[:, 0]
    else:
        side = io.read_json(cfg.eeg_sidecar or Path(cfg.eeg).with_suffix(".json"))
        y = io.read_t64(run / "mwf" / "filtered.t64")
        spec = SpectrogramConfig(cfg.tr, cfg.fmin, cfg.fmax, cfg.binwidth, cfg.tapers)
        X = multitaper_spectrogram(y, float(side["sample_rate"]), spec)
        X, info = normalize_eeg_tensor(X, return_info=True)
        s_ref = io.read_t64(run / "mwf" / "s_ref.t64")[:, 0]
    if cfg.preprocess_fmri:
        conf = io.read_t64(cfg.confounds) if cfg.confounds else None
        Y = regress_nuisance(Y, conf)
        Y, flat = bandpass_zscore(Y, cfg.tr, return_flags=True)
        info["flat_regions"] = flat.tolist()
    n = min(X.shape[0], Y.shape[0], s_ref.shape[0])
    if n != X.shape[0] or n != Y.shape[0]:
        logger.warning("tensorize: truncating EEG (%d) and fMRI (%d) to %d volumes", X.shape[0], Y.shape[0], n)
    X, Y, s_ref = X[:n], Y[:n], s_ref[:n]
    Xn, Yn, norms = normalize_data(X, Y)
    io.write_t64(out / "X.t64", Xn)
    io.write_t64(out / "Y.t64", Yn, ["time", "region"])
    io.write_t64(out / "s_ref.t64", s_ref[:, None], ["time", "one"])
    io.write_json(out / "tensor.json", {"shape_x": list(Xn.shape), "shape_y": list(Yn.shape),
                                        "norms": list(norms), "info": info})


def _fit_task(args):
    X, Y, R, K, Q, seed, tr, opts, weights, row_weights, path, extra = args
    with threadpool_limits(1):
        res = scmtf_fit(X, Y, R, K, Q, seed, tr, opts, weights, row_weights=row_weights)
    meta = {"cost": res.cost, "init_cost": res.init_cost, "iterations": res.iterations,
            "converged": res.converged, "flag": res.flag, "als_residual": res.als_residual,
            "seed": seed, **extra}
    save_factors(path, res.factors, meta)
    return meta


def _map_tasks(fn, tasks, threads):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads, mp_context=get_context("spawn")) as ex:
        return list(ex.map(fn, tasks))


def _stage_decompose(cfg, run):
    X = io.read_t64(run / "tensor" / "X.t64")
    Y = io.read_t64(run / "tensor" / "Y.t64")
    opts = FitOptions(max_iters=cfg.max_iters, rel_tol=cfg.rel_tol)
    weights = CostWeights(gamma_x=cfg.gamma_x, gamma_y=cfg.gamma_y)
    row_w = None
    if cfg.mask_boundaries and cfg.n_runs > 1:
        row_w = boundary_row_weights(cfg.run_lengths, tr=cfg.tr)
    tasks = []
    for R in cfg.ranks:
        d = run / "decompose" / f"R{R}"
        d.mkdir(parents=True, exist_ok=True)
        for i in range(cfg.restarts):
            seed = stage_seed(cfg.seed, "decompose", R, i)
            tasks.append((X, Y, R, cfg.K, cfg.q, seed, cfg.tr, opts, weights, row_w,
                          d / f"restart{i:03d}.t64", {"rank": R, "restart": i}))
    metas = _map_tasks(_fit_task, tasks, resolve_threads(cfg.threads))
    for R in cfg.ranks:
        io.write_json(run / "decompose" / f"R{R}" / "manifest.json",
                      {"rank": R, "K": cfg.K, "Q": cfg.q, "restarts": [m for m in metas if m["rank"] == R]})


def _stage_standardize(cfg, run):
    for R in cfg.ranks:
        src = run / "decompose" / f"R{R}"
        dst = run / "standardize" / f"R{R}"
        dst.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(cfg.restarts):
            f, meta = load_factors(src / f"restart{i:03d}.t64")
            fs, flags = standardize(f, return_flags=True)
            meta = {k: v for k, v in meta.items() if k not in ("sections", "tr", "n_pre", "n_post")}
            meta["flags"] = asdict(flags)
            save_factors(dst / f"restart{i:03d}.t64", fs, meta)
            entries.append(meta)
        io.write_json(dst / "manifest.json", {"rank": R, "restarts": entries})


def _load_rank(cfg, run, R):
    return [load_factors(run / "standardize" / f"R{R}" / f"restart{i:03d}.t64")[0] for i in range(cfg.restarts)]


def _bundle(solutions, threshold):
    if len(solutions) >= 2:
        return cluster_components(solutions, threshold)
    R = solutions[0].R
    return SolutionBundle(R, solutions, np.arange(R)[None, :], [(0, r) for r in range(R)], np.ones(R, int), threshold)


def _stage_select(cfg, run):
    X = io.read_t64(run / "tensor" / "X.t64")
    Y = io.read_t64(run / "tensor" / "Y.t64")
    s_ref = io.read_t64(run / "tensor" / "s_ref.t64")[:, 0]
    diags, rows = [], []
    for R in cfg.ranks:
        sols = _load_rank(cfg, run, R)
        bundle = _bundle(sols, cfg.cluster_threshold)
        sel = select_ied(bundle, s_ref)
        f = sols[sel.restart]
        cc = corcondia(X, CpdFactors(f.S, f.G, f.M))
        t = PseudoT(f)(Y - f.N @ f.P.T)
        max_t = float(np.max(t[:, sel.component]))
        d = RankDiagnostics(R, None if cc.meaningless else cc.value, sel.cardinality, sel.corr, max_t)
        diags.append(d)
        rows.append({
            "rank": R,
            "corcondia": d.corcondia,
            "ied_cardinality": sel.cardinality,
            "corr": sel.corr,
            "max_t": max_t,
            "ied_restart": sel.restart,
            "ied_component": sel.component,
            "ied_cluster": sel.cluster,
            "cluster_sizes": bundle.cardinality.tolist(),
        })
    choice = select_rank(diags)
    chosen = next(r for r in rows if r["rank"] == choice.rank)
    io.write_json(run / "select.json", {
        "diagnostics": rows,
        "selected_rank": choice.rank,
        "criteria_met": choice.criteria_met,
        "survivors": choice.survivors,
        "reason": choice.reason,
        "ied": {k: chosen[k] for k in ("ied_restart", "ied_component", "corr", "ied_cardinality")},
    })


def _chosen(cfg, run):
    sel = io.read_json(run / "select.json")
    R = sel["selected_rank"]
    i, r = sel["ied"]["ied_restart"], sel["ied"]["ied_component"]
    f, _ = load_factors(run / "standardize" / f"R{R}" / f"restart{i:03d}.t64")
    return f, r, sel


def _write_pgm(path, values):
    """One-row grey image of region values, min-max scaled (for quick viewing)."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    lo, hi = float(v.min()), float(v.max())
    img = np.zeros(v.shape, dtype=np.uint8) if hi == lo else np.round(255 * (v - lo) / (hi - lo)).astype(np.uint8)
    img = np.repeat(np.repeat(img, 8, axis=0), 8, axis=1)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def _stage_infer(cfg, run):
    Y = io.read_t64(run / "tensor" / "Y.t64")
    f, r, _ = _chosen(cfg, run)
    with threadpool_limits(1):
        rep = snpm(f, Y, cfg.L, stage_seed(cfg.seed, "infer"), cfg.alpha)
    out = run / "infer"
    out.mkdir(exist_ok=True)
    io.write_json(out / "report.json", {**rep.to_json(), "ied_component": r})
    io.write_t64(out / "tmap.t64", rep.pseudo_t, ["source", "region"])
    _write_pgm(out / "tmap.pgm", rep.pseudo_t)


def _overlap(regions, ioz, n):
    if ioz is None:
        return {"regions": [int(x) for x in regions], "in_ioz": None, "p_value": None}
    regions = [int(x) for x in regions]
    return {"regions": regions, "in_ioz": len(set(regions) & set(ioz)), "p_value": ioz_overlap_pvalue(regions, ioz, n)}


def _stage_hrfmetrics(cfg, run):
    f, _, _ = _chosen(cfg, run)
    with threadpool_limits(1):
        maps = hrf_metrics(f, k=cfg.top)
    ioz = io.read_json(cfg.ioz) if cfg.ioz else None
    n = f.V.shape[0]
    io.write_json(run / "hrfmetrics.json", {
        "extremity": maps.extremity.tolist(),
        "entropy": maps.entropy.tolist(),
        "top_extremity": _overlap(maps.top_extremity, ioz, n),
        "top_entropy": _overlap(maps.top_entropy, ioz, n),
        "flags": maps.flags,
    })


def _stage_summary(cfg, run):
    sel = io.read_json(run / "select.json")
    rep = io.read_json(run / "infer" / "report.json")
    hm = io.read_json(run / "hrfmetrics.json")
    ioz = io.read_json(cfg.ioz) if cfg.ioz else None
    r = rep["ied_component"]
    t = np.asarray(rep["pseudo_t"])[r]
    n = t.size

    def strongest(idx, sign):
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            return []
        order = idx[top_k(sign * t[idx], cfg.top)]
        return order.tolist()

    act = strongest(rep["activation"][r], 1.0)
    deact = strongest(rep["deactivation"][r], -1.0)
    summary = {
        "selected_rank": sel["selected_rank"],
        "rank_criteria_met": sel["criteria_met"],
        "ied_component": r,
        "ied_corr": sel["ied"]["corr"],
        "ied_cardinality": sel["ied"]["ied_cardinality"],
        "eeg_topography_consistent": None,
        "activation": _overlap(act, ioz, n),
        "deactivation": _overlap(deact, ioz, n),
        "entropy": hm["top_entropy"],
        "extremity": hm["top_extremity"],
        "thresholds": {"act": rep["act_thresholds"][r], "deact": rep["deact_thresholds"][r]},
        "diagnostics": sel["diagnostics"],
        "ioz_size": None if ioz is None else len(ioz),
    }
    io.write_json(run / "summary.json", summary)


_STAGE_FUNCS = {
    "mwf": _stage_mwf,
    "tensorize": _stage_tensorize,
    "decompose": _stage_decompose,
    "standardize": _stage_standardize,
    "select": _stage_select,
    "infer": _stage_infer,
    "hrfmetrics": _stage_hrfmetrics,
    "summary": _stage_summary,
}


def run_stage(cfg, stage, force=False):
    """Run one stage (skipped when already done unless ``force``)."""
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    if _done(run, stage) and not force:
        logger.info("stage %s already done", stage)
        return
    prior = [s for s in STAGES[: STAGES.index(stage)] if _done(run, s)]
    last_good = str(run / f"{prior[-1]}.done") if prior else None
    logger.info("stage %s", stage)
    try:
        _STAGE_FUNCS[stage](cfg, run)
    except Exception as exc:
        raise PipelineError(stage, last_good, exc) from exc
    _mark(run, stage)


def run_pipeline(cfg, force=False):
    """Execute every stage in order; returns the path of ``summary.json``."""
    cfg.check_inputs()
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    io.write_json(run / "config.json", asdict(cfg))
    for stage in STAGES:
        run_stage(cfg, stage, force=force)
    return run / "summary.json"
