"""Synthetic dry source material: tone complexes, noise bursts, chirps."""

from __future__ import annotations

import numpy as np
from scipy.signal import butter, sosfiltfilt


def _band_filter(x, band, fs):
    lo, hi = band
    nyq = fs / 2.0
    hi = min(hi, 0.98 * nyq)
    sos = butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return sosfiltfilt(sos, x)


def _syllable_envelope(rng, n, fs, rate_hz=(2.5, 5.0), floor=0.05):
    """Smooth on/off envelope at a syllabic rate."""
    t = np.arange(n) / fs
    rate = rng.uniform(*rate_hz)
    phase = rng.uniform(0, 2 * np.pi)
    env = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + phase + 0.8 * np.sin(2 * np.pi * 0.7 * t)))
    return floor + (1.0 - floor) * env ** 2


def harmonic_complex(rng, n, fs, band, f0_range=(90.0, 260.0)):
    """Voiced-speech stand-in: gliding f0, harmonics limited to ``band``."""
    t = np.arange(n) / fs
    f0 = rng.uniform(*f0_range)
    glide = f0 * (1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 6.3)))
    phase = 2 * np.pi * np.cumsum(glide) / fs
    x = np.zeros(n)
    for h in range(1, int(band[1] / f0_range[0]) + 1):
        # drop harmonics once the glide carries them out of band
        inst = h * glide
        gain = ((inst >= band[0]) & (inst <= band[1])).astype(float)
        if not gain.any():
            continue
        x += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / np.sqrt(h)
    return x * _syllable_envelope(rng, n, fs)


def noise_burst(rng, n, fs, band):
    """Band-limited noise gated into bursts (fricative stand-in)."""
    x = _band_filter(rng.standard_normal(n), band, fs)
    return x * _syllable_envelope(rng, n, fs, rate_hz=(1.5, 4.0), floor=0.0)


def chirp(rng, n, fs, band):
    """Exponential sweep across ``band`` and back."""
    t = np.arange(n) / fs
    dur = n / fs
    lo, hi = np.log(band[0]), np.log(band[1])
    tri = 1.0 - np.abs(2.0 * ((t / dur * rng.uniform(1.0, 3.0)) % 1.0) - 1.0)
    freq = np.exp(lo + (hi - lo) * tri)
    return np.sin(2 * np.pi * np.cumsum(freq) / fs + rng.uniform(0, 2 * np.pi))


def bin_tones(bins, n, fft_size, amplitudes=None, rng=None):
    """Sum of sinusoids at exact STFT bin centres.

    With a periodic hamming window and ``win_len == fft_size`` each tone
    occupies exactly bins ``k-1..k+1``, so disjoint bin sets give sources with
    disjoint time-frequency support.
    """
    rng = rng or np.random.default_rng(0)
    amps = np.ones(len(bins)) if amplitudes is None else np.asarray(amplitudes, float)
    t = np.arange(n)
    x = np.zeros(n)
    for k, a in zip(bins, amps):
        x += a * np.cos(2 * np.pi * k * t / fft_size + rng.uniform(0, 2 * np.pi))
    return x


KINDS = {"harmonic": harmonic_complex, "noise": noise_burst, "chirp": chirp}


def speech_like(rng, n, fs, band, kind=None):
    """One dry source of ``n`` samples with unit RMS, energy mostly in ``band``."""
    kind = kind or rng.choice(["harmonic", "harmonic", "noise", "chirp"])
    if kind == "mixed":
        x = harmonic_complex(rng, n, fs, band) + 0.3 * noise_burst(rng, n, fs, band)
    else:
        x = KINDS[kind](rng, n, fs, band)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)
