"""Oracle time-frequency masks and masked reconstruction with the mix phase."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import AnalysisConfig, decompose, istft, recombine

KINDS = ("IBM", "IAM", "IRM", "IPSM")
MASK_CEILING = 2.0
IPSM_FLOOR = -1.0
SILENCE = 1e-12


@dataclass(frozen=True)
class MaskSet:
    kind: str
    masks: np.ndarray  # (S, T, F)

    @property
    def n_sources(self) -> int:
        return self.masks.shape[0]


def _check_dims(source_specs, mix_spec):
    source_specs = np.asarray(source_specs)
    mix_spec = np.asarray(mix_spec)
    if source_specs.ndim != 3 or source_specs.shape[1:] != mix_spec.shape:
        raise ValueError(f"source spectrograms {source_specs.shape} do not match mix {mix_spec.shape}")
    return source_specs, mix_spec


def compute_oracle_mask(kind: str, source_specs, mix_spec, irm_power: bool = False) -> MaskSet:
    """Oracle masks from ground-truth source spectrograms.

    IBM: 1 for the loudest source (ties to the lowest index).
    IAM: ``|X| / |Y|`` clipped to ``[0, 2]``.
    IRM: ``|X| / sum |X_j|``, or ``sqrt(|X|^2 / sum |X_j|^2)`` with ``irm_power``.
    IPSM: ``|X| cos(angle X - angle Y) / |Y|`` clipped to ``[-1, 2]``.
    Cells where the mix is silent get 0 for every kind.
    """
    source_specs, mix_spec = _check_dims(source_specs, mix_spec)
    src_mag = np.abs(source_specs)
    mix_mag = np.abs(mix_spec)
    active = mix_mag >= SILENCE
    safe_mix = np.where(active, mix_mag, 1.0)

    if kind == "IBM":
        winner = np.argmax(src_mag, axis=0)
        masks = (np.arange(len(src_mag))[:, None, None] == winner[None]).astype(float)
    elif kind == "IAM":
        masks = np.clip(src_mag / safe_mix, 0.0, MASK_CEILING)
    elif kind == "IRM":
        if irm_power:
            total = np.sum(src_mag ** 2, axis=0)
            masks = np.sqrt(np.where(total > 0, src_mag ** 2 / np.where(total > 0, total, 1.0), 0.0))
        else:
            total = np.sum(src_mag, axis=0)
            masks = np.where(total > 0, src_mag / np.where(total > 0, total, 1.0), 0.0)
    elif kind == "IPSM":
        cos = np.cos(np.angle(source_specs) - np.angle(mix_spec)[None])
        masks = np.clip(src_mag * cos / safe_mix, IPSM_FLOOR, MASK_CEILING)
    else:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {KINDS}")
    return MaskSet(kind, np.where(active[None], masks, 0.0))


def apply_mask(mask, mix_spec) -> np.ndarray:
    """Masked mixture magnitude ``mask * |Y|``."""
    mask = np.asarray(mask, float)
    mix_mag = np.abs(mix_spec)
    if mask.shape[-2:] != mix_mag.shape:
        raise ValueError(f"mask {mask.shape} does not match mix {mix_mag.shape}")
    return mask * mix_mag


def reconstruct(est_magnitude, mix_phase, config: AnalysisConfig) -> np.ndarray:
    """Time signal from an estimated magnitude and the mixture phase."""
    est_magnitude = np.asarray(est_magnitude, float)
    if est_magnitude.shape != np.shape(mix_phase):
        raise ValueError(f"magnitude {est_magnitude.shape} and phase {np.shape(mix_phase)} differ")
    return istft(recombine(est_magnitude, mix_phase), config)


def separate(mask_set: MaskSet, mix_spec, config: AnalysisConfig) -> np.ndarray:
    """Reconstruct every source of ``mask_set``; returns ``(S, samples)``."""
    _, phase = decompose(mix_spec)
    return np.stack([reconstruct(apply_mask(m, mix_spec), phase, config) for m in mask_set.masks])
