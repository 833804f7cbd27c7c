"""Spatial features: inter-mic phase differences, steering vectors, angle features."""

from __future__ import annotations

import numpy as np

from .room import SPEED_OF_SOUND, ArrayGeometry
from .signal import AnalysisConfig

# 1-based mic pairs: three diametric pairs then three adjacent ones
DEFAULT_PAIRS = ((1, 4), (2, 5), (3, 6), (1, 2), (3, 4), (5, 6))

MODES = ("single", "ipd", "ipd+angle")


def _check_pairs(pairs, n_mics):
    for i1, i2 in pairs:
        if i1 == i2:
            raise ValueError(f"pair ({i1}, {i2}) repeats a microphone")
        if not (1 <= i1 <= n_mics and 1 <= i2 <= n_mics):
            raise ValueError(f"pair ({i1}, {i2}) out of range 1..{n_mics}")


def _stack(specs):
    specs = np.asarray(specs)
    if specs.ndim != 3:
        raise ValueError(f"expected (mics, T, F) spectrograms, got shape {specs.shape}")
    return specs


def _wrap(phase):
    """Wrap to (-pi, pi]."""
    w = np.angle(np.exp(1j * phase))
    return np.where(w <= -np.pi, np.pi, w)


def pair_ratios(specs, pairs=DEFAULT_PAIRS):
    """``Y[i1] / Y[i2]`` per pair, ``(P, T, F)``; cells with a silent mic are 0."""
    specs = _stack(specs)
    _check_pairs(pairs, specs.shape[0])
    num = np.stack([specs[i1 - 1] for i1, _ in pairs])
    den = np.stack([specs[i2 - 1] for _, i2 in pairs])
    ok = (np.abs(den) > 0) & (np.abs(num) > 0)
    return np.where(ok, num * np.conj(den) / np.where(ok, np.abs(den) ** 2, 1.0), 0.0)


def compute_ipd(specs, pairs=DEFAULT_PAIRS) -> np.ndarray:
    """Phase difference per pair, ``(P, T, F)`` radians in (-pi, pi].

    The difference of two phases in (-pi, pi] is re-wrapped; silent cells are 0.
    """
    specs = _stack(specs)
    _check_pairs(pairs, specs.shape[0])
    phase = np.angle(specs)
    mag = np.abs(specs)
    out = []
    for i1, i2 in pairs:
        d = _wrap(phase[i1 - 1] - phase[i2 - 1])
        out.append(np.where((mag[i1 - 1] > 0) & (mag[i2 - 1] > 0), d, 0.0))
    return np.stack(out)


def ipd_planes(ipd) -> np.ndarray:
    """cos planes followed by sin planes, ``(2P, T, F)``."""
    return np.concatenate([np.cos(ipd), np.sin(ipd)], axis=0)


def pair_delays(array: ArrayGeometry, azimuth: float, pairs=DEFAULT_PAIRS) -> np.ndarray:
    """Far-field arrival-time difference ``tau[i1] - tau[i2]`` per pair, seconds.

    A plane wave from ``azimuth`` reaches mic ``m`` at ``-(p_m . u) / c``
    relative to the array centre.
    """
    _check_pairs(pairs, array.mic_count)
    u = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    arrival = -(array.mic_positions @ u) / SPEED_OF_SOUND
    return np.array([arrival[i1 - 1] - arrival[i2 - 1] for i1, i2 in pairs])


def steering_vectors(array: ArrayGeometry, azimuth: float, config: AnalysisConfig,
                     pairs=DEFAULT_PAIRS) -> np.ndarray:
    """Unit-modulus ``(P, F)`` coefficients ``exp(j 2 pi f dtau)``.

    The sign cancels the observed ``Y[i1] / Y[i2]`` phase for a source at
    ``azimuth``, so a matching source gives positive alignment.
    """
    if not np.isfinite(azimuth):
        raise ValueError("azimuth must be finite")
    freqs = np.arange(config.bins) * config.sample_rate / config.fft_size
    dtau = pair_delays(array, azimuth, pairs)
    return np.exp(2j * np.pi * freqs[None, :] * dtau[:, None])


def compute_angle_features(specs, steering, pairs=DEFAULT_PAIRS) -> np.ndarray:
    """Directional alignment per speaker, ``(S, T, F)``.

    For each speaker, the real parts of the unit-normalised
    ``e * Y[i1] / Y[i2]`` terms are summed over pairs; each value lies in
    ``[-P, P]`` and silent cells contribute 0.
    """
    ratios = pair_ratios(specs, pairs)
    steering = np.asarray(steering)
    if steering.ndim == 2:
        steering = steering[np.newaxis]
    if steering.shape[1:] != (len(pairs), ratios.shape[-1]):
        raise ValueError(f"steering shape {steering.shape} does not match pairs x bins "
                         f"({len(pairs)}, {ratios.shape[-1]})")
    out = []
    for e in steering:
        z = e[:, None, :] * ratios
        mag = np.abs(z)
        unit = np.where(mag > 0, z.real / np.where(mag > 0, mag, 1.0), 0.0)
        out.append(unit.sum(axis=0))
    return np.stack(out)


def feature_width(mode: str, bins: int, n_pairs: int = len(DEFAULT_PAIRS), n_speakers: int = 2) -> int:
    if mode == "single":
        return bins
    if mode == "ipd":
        return bins * (1 + 2 * n_pairs)
    if mode == "ipd+angle":
        return bins * (1 + 2 * n_pairs + n_speakers)
    raise ValueError(f"unknown feature mode {mode!r}; expected one of {MODES}")


def assemble_features(magnitude, ipd=None, angle=None, mode: str = "single") -> np.ndarray:
    """Per-frame feature matrix ``(T, width)``.

    Blocks are concatenated along the feature axis in the order
    ``|Y0|, cos IPD x P, sin IPD x P, angle x S`` with the target speaker's
    angle plane first.
    """
    magnitude = np.asarray(magnitude, float)
    if mode not in MODES:
        raise ValueError(f"unknown feature mode {mode!r}; expected one of {MODES}")
    if mode == "single":
        return magnitude
    if ipd is None:
        raise ValueError(f"mode {mode!r} needs IPD features")
    ipd = np.asarray(ipd)
    if ipd.shape[1:] != magnitude.shape:
        raise ValueError(f"IPD shape {ipd.shape} does not match magnitude {magnitude.shape}")
    blocks = [magnitude[None], ipd_planes(ipd)]
    if mode == "ipd+angle":
        if angle is None:
            raise ValueError("mode 'ipd+angle' needs angle features")
        angle = np.asarray(angle, float)
        if angle.shape[1:] != magnitude.shape:
            raise ValueError(f"angle shape {angle.shape} does not match magnitude {magnitude.shape}")
        blocks.append(angle)
    planes = np.concatenate(blocks, axis=0)
    return planes.transpose(1, 0, 2).reshape(magnitude.shape[0], -1)
