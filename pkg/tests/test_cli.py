import json

import pytest

from scmtf import io
from scmtf.cli import main

SIM = ["--seed", "2", "--I-s", "80", "--I-g", "6", "--I-m", "5", "--I-v", "10"]
FAST = ["--rank-min", "1", "--rank-max", "2", "--restarts", "3", "--surrogates", "20", "--max-iters", "100"]


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(d)] + SIM) == 0
    return d


def _run(simdir, out, *extra):
    return main(["run", "--config", str(simdir / "config.json"), "--out", str(out)] + FAST + list(extra))


def test_simulate_outputs(simdir):
    for name in ("X.t64", "Y.t64", "s_ref.t64", "ioz.json", "truth.t64", "config.json"):
        assert (simdir / name).exists()
    assert io.read_t64(simdir / "X.t64").shape == (80, 6, 5)
    cfg = json.loads((simdir / "config.json").read_text())
    assert cfg["preprocess_fmri"] is False


def test_run_summary(simdir, tmp_path):
    assert _run(simdir, tmp_path / "a", "--threads", "1") == 0
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["selected_rank"] in (1, 2)
    assert s["ioz_size"] == 5
    assert s["eeg_topography_consistent"] is None
    assert {"activation", "deactivation", "entropy", "extremity", "diagnostics"} <= set(s)


def test_deterministic_across_threads(simdir, tmp_path, monkeypatch):
    assert _run(simdir, tmp_path / "one", "--threads", "1") == 0
    monkeypatch.setenv("SCMTF_THREADS", "2")
    assert _run(simdir, tmp_path / "two") == 0
    a = (tmp_path / "one" / "summary.json").read_bytes()
    b = (tmp_path / "two" / "summary.json").read_bytes()
    assert a == b


def test_resume_skips_done_stages(simdir, tmp_path):
    out = tmp_path / "r"
    assert _run(simdir, out, "--threads", "1") == 0
    fit = next((out / "decompose").rglob("restart000.t64"))
    stamp = fit.stat().st_mtime_ns
    first = (out / "summary.json").read_bytes()
    (out / "infer.done").unlink()
    (out / "summary.done").unlink()
    assert _run(simdir, out, "--threads", "1") == 0
    assert fit.stat().st_mtime_ns == stamp
    assert (out / "summary.json").read_bytes() == first


def test_missing_ioz_gives_null_overlap(simdir, tmp_path):
    cfg = json.loads((simdir / "config.json").read_text())
    cfg["ioz"] = None
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "n"), "--threads", "1"] + FAST) == 0
    s = json.loads((tmp_path / "n" / "summary.json").read_text())
    assert s["ioz_size"] is None
    assert s["activation"]["p_value"] is None and s["activation"]["in_ioz"] is None


def test_exit_codes(simdir, tmp_path):
    # missing input file
    assert _run(simdir, tmp_path / "x", "--fmri", str(tmp_path / "nope.t64")) == 1
    # a stage whose predecessors never ran
    assert main(["select", "--config", str(simdir / "config.json"), "--out", str(tmp_path / "y")]) == 2
    with pytest.raises(SystemExit):
        main(["bogus"])
