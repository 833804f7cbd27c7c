"""WAV read/write for PCM16 and float32, mono or multichannel."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .signal import MultichannelWaveform


class WavFormatError(ValueError):
    pass


def read_wav(path, expected_rate: int | None = None) -> MultichannelWaveform:
    rate, data = wavfile.read(path)
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample type {data.dtype}")
    samples = samples.T if samples.ndim == 2 else samples[np.newaxis, :]
    return MultichannelWaveform(np.ascontiguousarray(samples), int(rate))


def write_wav(path, wave: MultichannelWaveform, subtype: str = "float32") -> None:
    """Write atomically; ``subtype`` is ``"float32"`` or ``"pcm16"``."""
    data = wave.samples.T
    if subtype == "float32":
        data = data.astype("<f4")
    elif subtype == "pcm16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    atomic_write(path, lambda fh: wavfile.write(fh, wave.sample_rate, data))


def atomic_write(path, writer) -> None:
    """Call ``writer(binary_file)`` on a temp file then rename onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, lambda fh: fh.write(text.encode("utf-8")))
