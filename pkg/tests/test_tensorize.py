import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scmtf.tensorize import (
    SpectrogramConfig,
    bandpass_zscore,
    multitaper_spectrogram,
    normalize_eeg_tensor,
    parcellate,
    regress_nuisance,
    sine_tapers,
)

FS = 250.0


def test_sine_tapers_orthonormal():
    w = sine_tapers(100, 3)
    assert np.allclose(w @ w.T, np.eye(3), atol=1e-12)


def test_sinusoid_energy_in_bin():
    cfg = SpectrogramConfig(2.0)
    t = np.arange(int(10 * FS)) / FS
    x = np.sin(2 * np.pi * 10 * t)[None]
    X = multitaper_spectrogram(x, FS, cfg)
    assert X.shape == (5, 40, 1)
    spec = X[:, :, 0].mean(axis=0)
    c = cfg.centres
    far = spec[np.abs(c - 10) >= 3]
    assert spec[c == 10][0] >= 10 * far.max()


def test_zero_and_copied_channels(rng):
    cfg = SpectrogramConfig(2.0)
    assert np.all(multitaper_spectrogram(np.zeros((2, 1000)), FS, cfg) == 0)
    x = rng.standard_normal(1100)
    X = multitaper_spectrogram(np.vstack([x, x]), FS, cfg)
    assert np.array_equal(X[:, :, 0], X[:, :, 1])
    assert X.shape[0] == 1100 // 500


def test_windows_are_causal_in_order(rng):
    cfg = SpectrogramConfig(2.0)
    x = rng.standard_normal((1, 2000))
    y = x.copy()
    y[:, 1500:] = 0.0
    assert np.array_equal(multitaper_spectrogram(x, FS, cfg)[:3], multitaper_spectrogram(y, FS, cfg)[:3])


def test_spectrogram_errors():
    with pytest.raises(ValueError):
        multitaper_spectrogram(np.zeros((1, 100)), FS, SpectrogramConfig(2.0))
    with pytest.raises(ValueError):
        multitaper_spectrogram(np.zeros((1, 1000)), 50.0, SpectrogramConfig(2.0))
    with pytest.raises(ValueError):
        # 0.5 s windows give 2 Hz resolution: 1 Hz bins go empty
        multitaper_spectrogram(np.zeros((1, 1000)), FS, SpectrogramConfig(0.5))
    with pytest.raises(ValueError):
        SpectrogramConfig(0.0)


def test_normalize_tensor(rng):
    t = rng.standard_normal((30, 6, 5)) * rng.uniform(0.1, 10, (1, 6, 1)) * rng.uniform(0.1, 10, (1, 1, 5)) + 3.0
    out, info = normalize_eeg_tensor(t, return_info=True)
    assert info["converged"]
    assert np.max(np.abs(out.mean(axis=0))) <= 1e-12
    ms_g = np.mean(out**2, axis=(0, 2))
    ms_m = np.mean(out**2, axis=(0, 1))
    assert np.max(np.abs(ms_g - 1)) <= 1e-6 and np.max(np.abs(ms_m - 1)) <= 1e-6
    again = normalize_eeg_tensor(out)
    assert np.allclose(again, out, atol=1e-10)


def test_normalize_zero_slab(rng):
    t = rng.standard_normal((10, 4, 3))
    t[:, 2, :] = 5.0  # constant over time: zero after centring
    out, info = normalize_eeg_tensor(t, return_info=True)
    assert info["zero_freq_slabs"] == [2]
    assert np.all(out[:, 2, :] == 0)
    with pytest.raises(ValueError):
        normalize_eeg_tensor(np.zeros((1, 2, 2)))


def test_regress_nuisance(rng):
    c = rng.standard_normal((50, 2))
    assert np.linalg.norm(regress_nuisance(c[:, :1], c)) <= 1e-10
    y = rng.standard_normal(50)
    assert np.allclose(regress_nuisance(y, None)[:, 0], y - y.mean())
    # confound orthogonal to y and to the intercept
    yc = y - y.mean()
    z = rng.standard_normal(50)
    z -= z.mean()
    z -= (z @ yc) / (yc @ yc) * yc
    assert np.allclose(regress_nuisance(y, z)[:, 0], yc, atol=1e-12)


@given(st.integers(0, 2**31))
def test_regress_orthogonality(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((40, 3))
    c = rng.standard_normal((40, 4))
    r = regress_nuisance(y, c)
    design = np.column_stack([np.ones(40), c])
    scale = np.linalg.norm(design, axis=0)[:, None] * np.linalg.norm(r, axis=0)[None]
    assert np.all(np.abs(design.T @ r) <= 1e-8 * np.maximum(scale, 1.0))


def test_bandpass():
    tr = 2.0
    t = np.arange(400) * tr
    slow = np.sin(2 * np.pi * 0.05 * t)
    out = bandpass_zscore(slow, tr)
    assert np.corrcoef(out, slow)[0, 1] >= 0.99
    fast = np.sin(2 * np.pi * 0.24 * t)  # above 0.2 Hz
    f = np.abs(np.fft.fftfreq(400, tr))
    keep = (f >= 0.008) & (f <= 0.2)
    filt = np.real(np.fft.ifft(np.fft.fft(fast) * keep))
    assert np.sqrt(np.mean(filt**2)) <= 0.01 * np.sqrt(np.mean(fast**2))


def test_bandpass_high_frequency_attenuated():
    # 0.5 Hz is beyond Nyquist at TR = 2 s; test at TR = 0.5 s
    tr = 0.5
    t = np.arange(800) * tr
    x = np.sin(2 * np.pi * 0.5 * t)
    f = np.abs(np.fft.fftfreq(800, tr))
    keep = (f >= 0.008) & (f <= 0.2)
    filt = np.real(np.fft.ifft(np.fft.fft(x) * keep))
    assert np.sqrt(np.mean(filt**2)) <= 0.01 * np.sqrt(np.mean(x**2))


def test_zscore_moments(rng):
    y = rng.standard_normal((300, 4)).cumsum(axis=0)
    out = bandpass_zscore(y, 2.0)
    assert np.max(np.abs(out.mean(axis=0))) <= 1e-12
    assert np.max(np.abs(out.std(axis=0) - 1)) <= 1e-12


def test_constant_column_flagged(rng):
    y = np.column_stack([rng.standard_normal(100), np.full(100, 4.0)])
    out, flat = bandpass_zscore(y, 2.0, return_flags=True)
    assert flat.tolist() == [1] and np.all(out[:, 1] == 0)


def test_parcellate(rng):
    v = rng.standard_normal((20, 6))
    labels = np.array([0, 1, 0, 2, 1, 2])
    out = parcellate(v, labels)
    for r in range(3):
        assert np.allclose(out[:, r], v[:, labels == r].mean(axis=1))
    assert np.array_equal(parcellate(v[:, :3], np.array([2, 0, 1])), v[:, [1, 2, 0]])
    dup = np.column_stack([v[:, 0], v[:, 0]])
    assert np.array_equal(parcellate(dup, np.array([0, 0]))[:, 0], v[:, 0])
    with pytest.raises(ValueError):
        parcellate(v, np.array([0, 0, 0, 2, 2, 2]))
