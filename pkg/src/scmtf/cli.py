"""Command line driver: ``scmtf <subcommand> [options]``.

Every pipeline subcommand takes an optional ``--config`` JSON file whose keys
are :class:`scmtf.pipeline.RunConfig` fields; command-line flags override it.
``SCMTF_THREADS`` sets the worker count when ``--threads`` is absent.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import io
from .pipeline import STAGES, PipelineError, RunConfig, run_pipeline, run_stage, save_factors
from .synthgen import SynthSpec, generate

logger = logging.getLogger("scmtf")

# flag -> RunConfig field
_OVERRIDES = {
    "out": "out",
    "fmri": "fmri",
    "eeg": "eeg",
    "eeg_sidecar": "eeg_sidecar",
    "eeg_tensor": "eeg_tensor",
    "s_ref": "s_ref",
    "confounds": "confounds",
    "ioz": "ioz",
    "tr": "tr",
    "rank_min": "rank_min",
    "rank_max": "rank_max",
    "restarts": "restarts",
    "K": "K",
    "Q": "Q",
    "surrogates": "L",
    "alpha": "alpha",
    "seed": "seed",
    "threads": "threads",
    "tau": "tau",
    "fmin": "fmin",
    "fmax": "fmax",
    "binwidth": "binwidth",
    "tapers": "tapers",
    "max_iters": "max_iters",
    "rel_tol": "rel_tol",
}


def _pipeline_parent():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    p.add_argument("--out", help="run directory")
    p.add_argument("--fmri", help="time x region .t64")
    p.add_argument("--eeg", help="channels x samples .t64 (sidecar JSON next to it)")
    p.add_argument("--eeg-sidecar")
    p.add_argument("--eeg-tensor", help="pre-computed time x frequency x channel .t64")
    p.add_argument("--s-ref", help="reference IED time course .t64 (with --eeg-tensor)")
    p.add_argument("--confounds")
    p.add_argument("--ioz", help="JSON list of onset-zone region indices")
    p.add_argument("--tr", type=float)
    p.add_argument("--rank-min", type=int)
    p.add_argument("--rank-max", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--Q", type=int)
    p.add_argument("--surrogates", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--tau", type=int)
    p.add_argument("--fmin", type=float)
    p.add_argument("--fmax", type=float)
    p.add_argument("--binwidth", type=float)
    p.add_argument("--tapers", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--rel-tol", type=float)
    p.add_argument("--mask-boundaries", action="store_true", default=None)
    p.add_argument("--force", action="store_true", help="rerun the stage even if it is done")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="scmtf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic data set with its ground truth")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--I-s", dest="I_s", type=int, default=200)
    sim.add_argument("--I-g", dest="I_g", type=int, default=20)
    sim.add_argument("--I-m", dest="I_m", type=int, default=16)
    sim.add_argument("--I-v", dest="I_v", type=int, default=30)
    sim.add_argument("--R", type=int, default=2)
    sim.add_argument("--K", type=int, default=2)
    sim.add_argument("--Q", type=int, default=0)
    sim.add_argument("--snr-x", dest="snr_x_db", type=float, default=20.0)
    sim.add_argument("--snr-y", dest="snr_y_db", type=float, default=10.0)
    sim.add_argument("--tr", type=float, default=2.5)

    parent = _pipeline_parent()
    helps = {
        "mwf": "train and apply the spike-enhancing Wiener filter",
        "tensorize": "build the EEG tensor and the preprocessed BOLD matrix",
        "decompose": "fit all ranks and restarts",
        "standardize": "resolve sign and scale of every fit",
        "select": "cluster restarts, pick the IED source and the rank",
        "infer": "surrogate-based pseudo-t maps with FWE thresholds",
        "hrfmetrics": "HRF extremity and entropy maps, IOZ overlap",
        "run": "all stages in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[parent], help=text)
    return parser


def config_from_args(args):
    base = io.read_json(args.config) if getattr(args, "config", None) else {}
    for flag, key in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    if getattr(args, "mask_boundaries", None):
        base["mask_boundaries"] = True
    return RunConfig.from_dict(base)


def _simulate(args):
    spec = SynthSpec(I_s=args.I_s, I_g=args.I_g, I_m=args.I_m, I_v=args.I_v, R=args.R, K=args.K,
                     Q=args.Q, snr_x_db=args.snr_x_db, snr_y_db=args.snr_y_db, tr=args.tr, seed=args.seed)
    d = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_t64(out / "X.t64", d.X)
    io.write_t64(out / "Y.t64", d.Y, ["time", "region"])
    io.write_t64(out / "s_ref.t64", d.s_ref[:, None], ["time", "one"])
    io.write_json(out / "ioz.json", d.active)
    save_factors(out / "truth.t64", d.truth, {"active": d.active, "deviant": d.deviant, "spec": spec.to_json()})
    cfg = RunConfig(out=str(out / "run"), fmri=str(out / "Y.t64"), eeg_tensor=str(out / "X.t64"),
                    s_ref=str(out / "s_ref.t64"), ioz=str(out / "ioz.json"), preprocess_fmri=False,
                    tr=spec.tr, K=spec.K, Q=spec.Q, seed=spec.seed)
    io.write_json(out / "config.json", asdict(cfg))
    print(out / "config.json")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return _simulate(args)
        cfg = config_from_args(args)
        if args.command == "run":
            print(run_pipeline(cfg, force=args.force))
            return 0
        if args.command in ("mwf", "tensorize"):
            cfg.check_inputs()
        run_stage(cfg, args.command, force=args.force)
        return 0
    except PipelineError as exc:
        logger.error("%s", exc)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
