"""Waveform containers and the convolution-kernel STFT/ISTFT.

The analysis transform is a strided 1-D convolution of the signal with a
fixed bank of windowed cosine and sine rows; synthesis is the matching
transposed convolution followed by division with the overlap-added squared
window.  Spectrograms are plain ``(T, F)`` complex arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MultichannelWaveform:
    """Real samples of shape ``(channels, length)`` at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError(f"samples must be (channels, length), got {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        object.__setattr__(self, "samples", samples)

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]


def hamming(win_len: int) -> np.ndarray:
    """Periodic hamming window."""
    n = np.arange(win_len)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / win_len)


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


@dataclass(frozen=True)
class AnalysisConfig:
    win_len: int = 512
    hop: int = 128
    fft_size: int = 512
    sample_rate: int = 16000
    window: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.hop <= self.win_len:
            raise ValueError(f"need 0 < hop <= win_len, got hop={self.hop}, win_len={self.win_len}")
        if self.fft_size < self.win_len:
            raise ValueError(f"fft_size {self.fft_size} smaller than win_len {self.win_len}")
        if self.fft_size % 2:
            raise ValueError("fft_size must be even")
        window = hamming(self.win_len) if self.window is None else np.asarray(self.window, float)
        if window.shape != (self.win_len,):
            raise ValueError(f"window length {window.shape} != win_len {self.win_len}")
        if np.any(window <= 0) or np.any(window > 1.09):
            raise ValueError("window values must lie in (0, 1.09]")
        object.__setattr__(self, "window", window)

    @classmethod
    def from_ms(cls, win_ms: float = 32.0, hop_ms: float = 8.0, sample_rate: int = 16000):
        win_len = int(round(win_ms * sample_rate / 1000.0))
        hop = int(round(hop_ms * sample_rate / 1000.0))
        return cls(win_len=win_len, hop=hop, fft_size=_next_pow2(win_len), sample_rate=sample_rate)

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def frame_count(self, length: int) -> int:
        if length < self.win_len:
            raise ValueError(f"signal of {length} samples is shorter than one frame ({self.win_len})")
        return (length - self.win_len) // self.hop + 1

    def signal_length(self, frames: int) -> int:
        return (frames - 1) * self.hop + self.win_len

    def fit_length(self, length: int) -> int:
        """Smallest length >= ``length`` that frames without a remainder."""
        if length <= self.win_len:
            return self.win_len
        return self.signal_length(-(-(length - self.win_len) // self.hop) + 1)


@dataclass(frozen=True)
class StftKernel:
    """Analysis rows ``(2F, win_len)``: F cosine rows then F negative-sine rows."""

    config: AnalysisConfig
    analysis_rows: np.ndarray
    synthesis_rows: np.ndarray

    @property
    def bins(self) -> int:
        return self.config.bins

    def normalization(self, frames: int) -> np.ndarray:
        """Overlap-added squared window for ``frames`` frames."""
        cfg = self.config
        key = (cfg.win_len, cfg.hop, cfg.window.tobytes(), frames)
        out = _NORMS.get(key)
        if out is None:
            w2 = np.broadcast_to(cfg.window ** 2, (frames, cfg.win_len))
            out = _NORMS[key] = overlap_add(w2, cfg.hop)
            out.flags.writeable = False
        return out


_NORMS: dict = {}


def make_stft_kernel(config: AnalysisConfig) -> StftKernel:
    n_fft = config.fft_size
    k = np.arange(config.bins)[:, None]
    n = np.arange(config.win_len)[None, :]
    arg = 2.0 * np.pi * k * n / n_fft
    w = config.window[None, :]
    analysis = np.concatenate([np.cos(arg) * w, -np.sin(arg) * w], axis=0)

    # real inverse DFT basis; DC and Nyquist appear once, every other bin twice
    weight = np.full((config.bins, 1), 2.0)
    weight[0] = 1.0
    weight[-1] = 1.0
    synthesis = np.concatenate([np.cos(arg) * weight * w, -np.sin(arg) * weight * w], axis=0) / n_fft
    return StftKernel(config, analysis, synthesis)


_KERNELS: dict = {}


def kernel_for(config: AnalysisConfig) -> StftKernel:
    key = (config.win_len, config.hop, config.fft_size, config.window.tobytes())
    kern = _KERNELS.get(key)
    if kern is None:
        kern = _KERNELS[key] = make_stft_kernel(config)
    return kern


def frames_of(x: np.ndarray, config: AnalysisConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n_frames = config.frame_count(x.shape[-1])
    view = np.lib.stride_tricks.sliding_window_view(x, config.win_len, axis=-1)
    # contiguous copy: BLAS is much faster than matmul on the strided view
    return np.ascontiguousarray(view[..., ::config.hop, :][..., :n_frames, :])


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, win_len = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + ((n_frames - 1) * hop + win_len,))
    for t in range(n_frames):
        out[..., t * hop:t * hop + win_len] += frames[..., t, :]
    return out


def stft(x: np.ndarray, config: AnalysisConfig) -> np.ndarray:
    """STFT of one channel (or a stack of channels along leading axes).

    No padding is applied, so ``T = (len - win_len) // hop + 1``.
    """
    kern = kernel_for(config)
    rows = frames_of(x, config) @ kern.analysis_rows.T
    f = config.bins
    return rows[..., :f] + 1j * rows[..., f:]


def spec_to_frames(spec: np.ndarray, config: AnalysisConfig) -> np.ndarray:
    kern = kernel_for(config)
    rows = np.concatenate([spec.real, spec.imag], axis=-1)
    return rows @ kern.synthesis_rows


def istft(spec: np.ndarray, config: AnalysisConfig) -> np.ndarray:
    """Inverse of :func:`stft` via transposed convolution and window-sum-square division."""
    spec = np.asarray(spec)
    if spec.shape[-1] != config.bins:
        raise ValueError(f"spectrogram has {spec.shape[-1]} bins, config expects {config.bins}")
    kern = kernel_for(config)
    norm = kern.normalization(spec.shape[-2])
    if np.any(norm < 1e-10):
        raise ValueError("window-sum-square vanishes inside the signal; hop too large for window")
    return overlap_add(spec_to_frames(spec, config), config.hop) / norm


def istft_adjoint(grad: np.ndarray, frames: int, config: AnalysisConfig) -> np.ndarray:
    """Pull a gradient w.r.t. the ISTFT output back onto ``[Re | Im]`` rows ``(T, 2F)``."""
    kern = kernel_for(config)
    g = np.asarray(grad, dtype=np.float64) / kern.normalization(frames)
    return frames_of(g, config) @ kern.synthesis_rows.T


def decompose(spec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and phase in (-pi, pi]; zero cells get phase 0."""
    spec = np.asarray(spec)
    mag = np.abs(spec)
    phase = np.where(mag > 0, np.angle(spec), 0.0)
    # np.angle returns -pi for negative reals with a -0.0 imaginary part
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return mag, phase


def recombine(magnitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return magnitude * np.exp(1j * phase)
