import numpy as np
import pytest
from scipy import linalg

from scmtf.eeg_enhance import (
    EegRecording,
    MwfFilter,
    clipped_difference,
    delay_embed,
    mwf_apply,
    mwf_train,
    reference_envelope,
    segments_to_mask,
)


def planted_spikes(rng, snr_db, C=6, T=6000, fs=250.0, n_spikes=30):
    """Spike template on a fixed topography plus spatially coloured noise."""
    width = 24
    tpl = -np.diff(np.exp(-0.5 * ((np.arange(width + 1) - width / 2) / 3.0) ** 2))
    topo = rng.standard_normal(C)
    clean = np.zeros((C, T))
    starts = rng.choice(np.arange(50, T - 50, 60), n_spikes, replace=False)
    mask = np.zeros(T, bool)
    for s in starts:
        clean[:, s : s + width] += np.outer(topo, tpl)
        mask[s : s + width] = True
    mix = rng.standard_normal((C, C))
    noise = mix @ rng.standard_normal((C, T))
    p_sig = np.mean(clean[:, mask] ** 2)
    p_noise = np.mean(noise[:, mask] ** 2)
    noise *= np.sqrt(p_sig / p_noise * 10 ** (-snr_db / 10))
    return EegRecording(clean + noise, fs, mask), clean, noise


def _snr(signal, noise, mask):
    return 10 * np.log10(np.mean(signal[:, mask] ** 2) / np.mean(noise[:, mask] ** 2))


def test_delay_embed_cases():
    x = np.array([[1.0, 2.0, 3.0]])
    assert delay_embed(x, 0).tolist() == x.tolist()
    assert delay_embed(x, 1).tolist() == [[0, 1, 2], [1, 2, 3], [2, 3, 0]]
    with pytest.raises(ValueError):
        delay_embed(x, 2)


def test_delay_embed_centre(rng):
    x = rng.standard_normal((3, 20))
    e = delay_embed(x, 4)
    assert np.array_equal(e[4 * 3 : 5 * 3], x)


def test_mwf_apply_trivial(rng):
    x = rng.standard_normal((3, 50))
    dim = 3 * 9
    assert np.all(mwf_apply(MwfFilter(4, np.zeros((dim, dim)), 3), x) == 0)
    assert np.allclose(mwf_apply(MwfFilter(4, np.eye(dim), 3), x), x)
    with pytest.raises(ValueError):
        mwf_apply(MwfFilter(4, np.eye(dim), 3), x[:2])


def test_mwf_gain_and_preservation(rng):
    rec, clean, noise = planted_spikes(rng, 0.0)
    f = mwf_train(rec, 4)
    gain = _snr(mwf_apply(f, clean), mwf_apply(f, noise), rec.ied_mask) - _snr(clean, noise, rec.ied_mask)
    assert gain >= 6.0
    rec10, clean10, _ = planted_spikes(np.random.default_rng(7), 10.0)
    out = mwf_apply(mwf_train(rec10, 4), rec10)
    ch = np.argmax(np.sum(clean10**2, axis=1))
    assert np.corrcoef(out[ch], clean10[ch])[0, 1] >= 0.9


def test_clipping_constructed():
    # 2 channels, tau = 0: Rxx - Rnn has one negative generalized eigenvalue
    rng = np.random.default_rng(3)
    T = 20000
    mask = np.zeros(T, bool)
    mask[: T // 2] = True
    x = rng.standard_normal((2, T))
    x[0, mask] *= 3.0  # channel 0 stronger inside spikes
    x[1, mask] *= 0.5  # channel 1 weaker inside spikes
    f = mwf_train(EegRecording(x, 100.0, mask), tau=0)
    assert np.sum(f.gevals < 1) == 1
    xe = x
    Rxx = xe[:, mask] @ xe[:, mask].T / mask.sum()
    Rnn = xe[:, ~mask] @ xe[:, ~mask].T / (~mask).sum()
    lam, V = linalg.eigh(Rxx, Rnn)
    neg = V[:, np.argmin(lam)]
    # the clipped direction contributes nothing to W
    assert np.linalg.norm(f.W @ neg) <= 1e-10
    D = clipped_difference(f, EegRecording(x, 100.0, mask))
    assert np.min(np.linalg.eigvalsh(0.5 * (D + D.T))) >= -1e-10


def test_equal_covariances_give_zero_filter(rng):
    # zero guards of tau samples make both halves embed identically
    x = rng.standard_normal((3, 400))
    x[:, :2] = 0.0
    x[:, -2:] = 0.0
    mask = np.zeros(800, bool)
    mask[:400] = True
    rec = EegRecording(np.hstack([x, x]), 100.0, mask)
    f = mwf_train(rec, 2)
    assert np.linalg.norm(f.W) <= 1e-6 * np.sqrt(f.W.shape[0])


def test_train_errors(rng):
    with pytest.raises(ValueError):
        mwf_train(EegRecording(rng.standard_normal((2, 50)), 100.0, np.zeros(50, bool)))
    with pytest.raises(ValueError):
        EegRecording(np.zeros((2, 5)), 100.0, np.zeros(4, bool))


def test_singular_rnn_ridge(rng, caplog):
    x = rng.standard_normal((2, 300))
    x[1] = 0.0
    mask = np.zeros(300, bool)
    mask[100:150] = True
    f = mwf_train(EegRecording(x, 100.0, mask), 1)
    assert np.all(np.isfinite(f.W))
    assert "singular" in caplog.text


def test_envelope():
    assert np.allclose(reference_envelope(np.full((2, 20), 3.0), 5), 9.0)
    x = np.zeros((4, 30))
    x[2, 13] = 1.0
    env = reference_envelope(x, 10)
    assert env.tolist() == [0.0, 1 / 40, 0.0]
    assert np.allclose(reference_envelope(2 * x, 10), 4 * env)
    with pytest.raises(ValueError):
        reference_envelope(x, 0)


def test_channel_permutation_equivariance(rng):
    rec, _, _ = planted_spikes(rng, 0.0, C=3, T=2000, n_spikes=10)
    f = mwf_train(rec, 1)
    p = [2, 0, 1]
    g = mwf_train(EegRecording(rec.data[p], rec.sample_rate, rec.ied_mask), 1)
    idx = np.concatenate([np.array(p) + 3 * b for b in range(3)])
    assert np.allclose(g.W, f.W[np.ix_(idx, idx)], atol=1e-8)


def test_segments_to_mask():
    m = segments_to_mask([[1, 3], [8, 20]], 10)
    assert np.flatnonzero(m).tolist() == [1, 2, 8, 9]
