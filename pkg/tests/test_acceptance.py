"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line; the lines are collected and
repeated in the terminal summary (see ``conftest.py``).
"""
import json
import math
import time

import numpy as np
import pytest
from conftest import random_factorset
from test_eeg_enhance import _snr, planted_spikes
from test_hrf import brute_conv
from test_model import _rel_grad_error
from test_postproc import REFERENCE_ROWS, table_diags

from scmtf import io
from scmtf.cli import main
from scmtf.cpd import CpdOptions, congruence_match, corcondia, cpd_fit
from scmtf.eeg_enhance import EegRecording, mwf_apply, mwf_train
from scmtf.hrf import toeplitz
from scmtf.inference import hrf_entropy, hrf_extremity, ioz_overlap_pvalue, snpm
from scmtf.model import CostWeights
from scmtf.postproc import select_rank, standardize
from scmtf.tensor_core import CpdFactors, cpd_reconstruct

RESULTS = []

pytestmark = pytest.mark.acceptance


def report(name, ok, detail, capsys):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def test_rank_selection_fidelity(capsys):
    t0 = time.perf_counter()
    got = {pid: select_rank(table_diags(pid)).rank for pid in REFERENCE_ROWS}
    elapsed = time.perf_counter() - t0
    required = all(got[p] == REFERENCE_ROWS[p][4] for p in ("p02", "p03", "p10"))
    mismatches = sorted(p for p in REFERENCE_ROWS if got[p] != REFERENCE_ROWS[p][4])
    # p09 is the one documented criterion gap (higher |corr| at a passing rank)
    ok = required and mismatches == ["p09"] and elapsed < 1.0
    report("rank selection", ok,
           f"p02->{got['p02']} p03->{got['p03']} p10->{got['p10']}, "
           f"{12 - len(mismatches)}/12 rows match (mismatch: {mismatches}), {elapsed * 1e3:.1f} ms", capsys)


def test_cpd_recovery(capsys):
    worst, times = 1.0, []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        true = CpdFactors(rng.standard_normal((20, 3)), rng.standard_normal((15, 3)), rng.standard_normal((10, 3)))
        t0 = cpd_reconstruct(true)
        noise = rng.standard_normal(t0.shape)
        t = t0 + noise * np.linalg.norm(t0) / np.linalg.norm(noise) * 10 ** (-40 / 20)
        start = time.perf_counter()
        res = cpd_fit(t, 3, CpdOptions(seed=seed))
        times.append(time.perf_counter() - start)
        worst = min(worst, congruence_match(true, res.factors)[1].min())
    med = float(np.median(times))
    report("CPD recovery", worst >= 0.99 and med <= 10.0,
           f"min per-mode congruence {worst:.5f} over 20 seeds, median fit {med:.3f} s", capsys)


def test_corcondia(capsys):
    exact_dev, below = 0.0, 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        f = CpdFactors(rng.standard_normal((12, 2)), rng.standard_normal((10, 2)), rng.standard_normal((8, 2)))
        t0 = cpd_reconstruct(f)
        exact_dev = max(exact_dev, abs(corcondia(t0, f).value - 100.0))
        noise = rng.standard_normal(t0.shape)
        t = t0 + noise * np.linalg.norm(t0) / np.linalg.norm(noise) * 10 ** (-40 / 20)
        c_r = corcondia(t, cpd_fit(t, 2, CpdOptions(seed=seed)).factors).value
        c_over = corcondia(t, cpd_fit(t, 3, CpdOptions(seed=seed)).factors).value
        below += c_over < c_r
    report("CorConDia", exact_dev <= 1e-6 and below >= 18,
           f"exact factors |cc - 100| <= {exact_dev:.1e}; R+1 below R in {below}/20 seeds", capsys)


def test_gradient(capsys):
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(200 + seed)
        f = random_factorset(rng, I_s=25, I_g=3, I_m=3, I_v=4, R=2, K=2, Q=1)
        X = rng.standard_normal((25, 3, 3))
        Y = rng.standard_normal((25, 4))
        worst = max(worst, _rel_grad_error(f, X, Y, CostWeights()))
    report("gradient", worst <= 1e-6, f"max blockwise relative error {worst:.2e} over 5 points (theta included)", capsys)


def test_convolution_oracle(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        I_s = int(rng.integers(20, 80))
        h = rng.standard_normal(20)  # lags -4..15: four noncausal taps
        s = rng.standard_normal(I_s)
        worst = max(worst, np.max(np.abs(toeplitz(h, I_s, 4) @ s - brute_conv(h, s, 4))))
    report("convolution", worst <= 1e-12, f"max abs deviation {worst:.1e} over 100 pairs", capsys)


def test_mwf(capsys):
    rng = np.random.default_rng(12345)
    rec, clean, noise = planted_spikes(rng, 0.0)
    f = mwf_train(rec, 4)
    gain = _snr(mwf_apply(f, clean), mwf_apply(f, noise), rec.ied_mask) - _snr(clean, noise, rec.ied_mask)
    x = rng.standard_normal((3, 400))
    x[:, :2] = 0.0
    x[:, -2:] = 0.0
    mask = np.zeros(800, bool)
    mask[:400] = True
    w = mwf_train(EegRecording(np.hstack([x, x]), 100.0, mask), 2).W
    rel = np.linalg.norm(w) / np.sqrt(w.shape[0])  # identity has Frobenius norm sqrt(dim)
    report("MWF", gain >= 6.0 and rel <= 1e-6, f"SNR gain {gain:.2f} dB at 0 dB; equal-covariance ||W||/||I|| {rel:.1e}", capsys)


def test_standardization(capsys):
    idem = recon = flip = True
    for seed in range(50):
        rng = np.random.default_rng(300 + seed)
        f = random_factorset(rng, I_s=30, I_v=5, R=3, K=2, Q=1)
        s = standardize(f)
        idem &= all(np.array_equal(a, b) for a, b in zip(s.blocks().values(), standardize(s).blocks().values()))
        x0 = cpd_reconstruct(f.S, f.G, f.M)
        recon &= np.max(np.abs(cpd_reconstruct(s.S, s.G, s.M) - x0)) <= 1e-12 * max(1.0, np.abs(x0).max())
        g = f.copy()
        # paired sign changes leave X and Y unchanged
        g.S[:, 0] *= -1
        g.M[:, 0] *= -1
        g.V[:, 0] *= -1
        g.G[:, 1] *= -1
        g.M[:, 1] *= -1
        g.B[seed % 5] *= -1
        g.V[seed % 5] *= -1
        flip &= all(np.array_equal(a, b) for a, b in zip(s.blocks().values(), standardize(g).blocks().values()))
    report("standardization", idem and recon and flip,
           f"idempotent={idem} reconstruction<=1e-12={recon} flip-equivariant={flip} on 50 sets", capsys)


def test_metrics_invariance(capsys):
    rng = np.random.default_rng(9)
    exact = True
    for _ in range(20):
        H = rng.standard_normal((12, 20))
        signs = rng.choice([-1.0, 1.0], (12, 1))
        exact &= np.array_equal(hrf_extremity(H * signs), hrf_extremity(H))
        exact &= np.allclose(hrf_entropy(H * signs), hrf_entropy(H), rtol=0, atol=1e-12)
    worst = 0.0
    for N, K, n, k in [(30, 5, 20, 4), (30, 5, 10, 2), (50, 8, 20, 5), (100, 10, 20, 3), (20, 10, 5, 3)]:
        ioz = range(K)
        top = list(range(k)) + list(range(K, K + n - k))
        p = ioz_overlap_pvalue(top, ioz, N)
        mc = np.mean(rng.hypergeometric(K, N - K, n, size=10**6) >= k)
        worst = max(worst, abs(p - mc))
    report("metrics invariance", exact and worst <= 2e-3,
           f"polarity invariance={exact}; max |p - MC| {worst:.1e} on 5 parameterizations", capsys)


def test_fwe_calibration(capsys):
    rng = np.random.default_rng(2024)
    f = random_factorset(rng, I_s=200, I_v=30, R=2, K=2, Q=0)
    hits = 0
    for rep in range(200):
        Y = np.random.default_rng([2024, rep]).standard_normal((200, 30))
        hits += bool(snpm(f, Y, L=100, seed=rep).activation[0].any())
    rate = hits / 200
    report("FWE calibration", 0.01 <= rate <= 0.10, f"familywise activation error {rate:.3f} (200 reps, L=100, alpha 0.05)", capsys)


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    runs = []
    for seed in range(10):
        d = root / f"seed{seed}"
        assert main(["simulate", "--out", str(d), "--seed", str(seed)]) == 0
        rc = main(["run", "--config", str(d / "config.json"), "--rank-min", "2", "--rank-max", "2",
                   "--restarts", "10", "--surrogates", "100"])
        assert rc == 0
        runs.append(d)
    return runs, time.perf_counter() - start


def test_end_to_end_localization(e2e_runs, capsys):
    runs, elapsed = e2e_runs
    sens_ok = dev_ok = 0
    sens = []
    for d in runs:
        s = json.loads((d / "run" / "summary.json").read_text())
        truth = io.read_json(d / "truth.json")
        active = set(truth["active"])
        hit = len(active & set(s["activation"]["regions"])) / len(active)
        sens.append(hit)
        sens_ok += hit >= 0.8
        dev_ok += bool(set(truth["deviant"]) & set(s["entropy"]["regions"][:3]))
    ok = sens_ok >= 8 and dev_ok >= 8 and elapsed <= 600
    report("end-to-end localization", ok,
           f"sensitivity>=0.8 in {sens_ok}/10 seeds (mean {np.mean(sens):.2f}); deviant top-3 by entropy in "
           f"{dev_ok}/10; {elapsed:.0f} s", capsys)


def test_determinism(e2e_runs, tmp_path, capsys):
    runs, _ = e2e_runs
    d = runs[0]
    rc = main(["run", "--config", str(d / "config.json"), "--out", str(tmp_path / "again"), "--rank-min", "2",
               "--rank-max", "2", "--restarts", "10", "--surrogates", "100", "--threads", "2"])
    same = rc == 0 and (tmp_path / "again" / "summary.json").read_bytes() == (d / "run" / "summary.json").read_bytes()
    report("determinism", same, "second run with --threads 2 gives a byte-identical summary.json", capsys)
