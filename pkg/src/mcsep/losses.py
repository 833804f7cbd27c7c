"""Separation losses with analytic gradients with respect to the masks.

Every loss takes masks ``(S, T, F)`` on the mixture magnitude and returns a
``LossResult`` whose ``grad`` has the same shape as the masks.  Time-domain
losses reconstruct with the mixture phase through the convolution ISTFT and
pull the gradient back through its adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import CAP_DB, best_permutation
from .signal import AnalysisConfig, istft, istft_adjoint

KINDS = ("uPIT-SiSNR", "uPIT-MSE", "TGT-SiSNR")

# smooth guard: the ratio saturates at 10**8 and never drops below 10**-8,
# keeping the loss inside [-80, 80] dB with finite gradients everywhere
NOISE_EPS = 1e-10
SATURATION = 10.0 ** (-CAP_DB / 10.0)
DB = 10.0 / math.log(10.0)


@dataclass(frozen=True)
class LossSpec:
    kind: str = "uPIT-SiSNR"
    n_sources: int = 2
    target: int = 0  # TGT always scores the first speaker

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {KINDS}")
        if self.n_sources < 1:
            raise ValueError("n_sources must be positive")
        if self.kind == "TGT-SiSNR" and self.target != 0:
            raise ValueError("TGT loss uses the first speaker as target")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray  # same shape as the masks
    permutation: tuple


def smooth_si_snr(est, ref):
    """Guarded Si-SNR in dB and its gradient with respect to ``est``."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"estimate {est.shape} and reference {ref.shape} differ")
    e = est - est.mean()
    r = ref - ref.mean()
    rr = float(r @ r)
    if rr == 0.0:
        raise ValueError("reference has zero energy after mean removal")
    t = (float(e @ r) / rr) * r
    n = e - t
    tt = float(t @ t)
    nn = float(n @ n)
    den = nn + SATURATION * tt + NOISE_EPS
    q = tt / den + SATURATION
    value = DB * math.log(q)
    # dtt/de = 2t, dnn/de = 2n
    dq = (2.0 * t) / den - tt * (2.0 * n + SATURATION * 2.0 * t) / den ** 2
    g = DB * dq / q
    return value, g - g.mean()


def _check(masks, mix_mag):
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim == 2:
        masks = masks[np.newaxis]
    if masks.shape[1:] != np.shape(mix_mag):
        raise ValueError(f"masks {masks.shape} do not match mixture {np.shape(mix_mag)}")
    return masks


def _estimates(masks, mix_mag, mix_phase, config):
    cos, sin = np.cos(mix_phase), np.sin(mix_phase)
    specs = masks * mix_mag * (cos + 1j * sin)
    return istft(specs, config), cos, sin


def _mask_grad(time_grad, mix_mag, cos, sin, config):
    """Chain a time-domain gradient back to one mask."""
    rows = istft_adjoint(time_grad, mix_mag.shape[0], config)
    f = config.bins
    return (rows[:, :f] * cos + rows[:, f:] * sin) * mix_mag


def _refs(refs, n_samples):
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    if refs.shape[-1] != n_samples:
        raise ValueError(f"references have {refs.shape[-1]} samples, reconstruction has {n_samples}")
    return refs


def loss_upit_sisnr(masks, mix_mag, mix_phase, refs, config: AnalysisConfig) -> LossResult:
    """Negative mean Si-SNR under the best estimate-to-reference assignment."""
    masks = _check(masks, mix_mag)
    ests, cos, sin = _estimates(masks, mix_mag, mix_phase, config)
    refs = _refs(refs, ests.shape[-1])
    n = len(refs)
    if len(masks) != n:
        raise ValueError(f"{len(masks)} masks for {n} references")
    table = [[smooth_si_snr(ests[e], refs[r]) for e in range(n)] for r in range(n)]
    perm = best_permutation(np.array([[v for v, _ in row] for row in table]))
    grad = np.zeros_like(masks)
    total = 0.0
    for r in range(n):
        e = perm[r]
        value, g = table[r][e]
        total += value
        grad[e] = _mask_grad(-g / n, mix_mag, cos, sin, config)
    return LossResult(-total / n, grad, perm)


def loss_tgt_sisnr(target_mask, mix_mag, mix_phase, ref_target, config: AnalysisConfig) -> LossResult:
    """Negative Si-SNR of the target (first) speaker only; no permutation search."""
    mask = _check(target_mask, mix_mag)
    if len(mask) != 1:
        raise ValueError("TGT loss takes exactly one mask")
    est, cos, sin = _estimates(mask, mix_mag, mix_phase, config)
    ref = _refs(ref_target, est.shape[-1])[0]
    value, g = smooth_si_snr(est[0], ref)
    grad = _mask_grad(-g, mix_mag, cos, sin, config)[np.newaxis]
    return LossResult(-value, grad, (0,))


def loss_upit_mse(masks, mix_mag, ref_mags) -> LossResult:
    """Mean squared magnitude error under the best assignment."""
    masks = _check(masks, mix_mag)
    ref_mags = np.asarray(ref_mags, dtype=np.float64)
    if ref_mags.shape != masks.shape:
        raise ValueError(f"reference magnitudes {ref_mags.shape} do not match masks {masks.shape}")
    est = masks * mix_mag
    n = len(masks)
    size = est[0].size
    # negated so that best_permutation's maximisation picks the smallest error
    err = np.array([[-float(np.sum((est[e] - ref_mags[r]) ** 2)) for e in range(n)] for r in range(n)])
    perm = best_permutation(err)
    grad = np.zeros_like(masks)
    for r in range(n):
        e = perm[r]
        grad[e] = 2.0 * (est[e] - ref_mags[r]) * mix_mag / (n * size)
    total = -math.fsum(err[r, perm[r]] for r in range(n))
    return LossResult(total / (n * size), grad, perm)


def evaluate_loss(spec: LossSpec, masks, mix_mag, mix_phase, refs, ref_mags, config) -> LossResult:
    if spec.kind == "uPIT-SiSNR":
        return loss_upit_sisnr(masks, mix_mag, mix_phase, refs, config)
    if spec.kind == "uPIT-MSE":
        return loss_upit_mse(masks, mix_mag, ref_mags)
    masks = _check(masks, mix_mag)
    res = loss_tgt_sisnr(masks[0], mix_mag, mix_phase, np.atleast_2d(refs)[0], config)
    grad = np.zeros_like(masks)
    grad[0] = res.grad[0]
    return LossResult(res.value, grad, tuple(range(len(masks))))
