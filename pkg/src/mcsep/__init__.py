"""Multi-channel mask-based speech separation toolkit."""

from .signal import AnalysisConfig, MultichannelWaveform, decompose, istft, recombine, stft

__all__ = ["AnalysisConfig", "MultichannelWaveform", "decompose", "istft", "recombine", "stft"]
__version__ = "0.1.0"
