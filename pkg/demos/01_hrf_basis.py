"""
HRF basis functions and the convolution operator
=================================================

Each basis function is a difference of two gamma densities sampled on a lag
grid that starts four samples before the event. The convolution with a
source time course is a banded Toeplitz matrix.
"""

import numpy as np

from scmtf.hrf import default_n_post, first_lobe_peak, hrf_waveform, sample_basis_init, toeplitz

tr = 2.5

# Baseline shapes (no jitter) peak early, mid and late
basis = sample_basis_init(seed=0, K=3, tr=tr, noise=0.0)
for p in basis:
    w = hrf_waveform(p, tr)
    print(f"theta={np.round(p.theta, 3)}  peak {first_lobe_peak(p, tr):.1f} s  samples {w.samples.size}")

# Jittered draws, as used to initialize each restart
for seed in range(3):
    peaks = [first_lobe_peak(p, tr) for p in sample_basis_init(seed, 3, tr)]
    print("seed", seed, "peaks (s):", np.round(peaks, 2))

# Convolve an impulse train with the first basis function
h = hrf_waveform(basis[0], tr).samples
s = np.zeros(40)
s[[5, 20]] = 1.0
H = toeplitz(h, s.size)
y = H @ s
print("response peaks at samples", np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] > y[2:])) + 1)
print("operator is", H.shape, "with", default_n_post(tr), "post-event lags")
