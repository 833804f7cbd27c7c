"""Mini-batch gradient descent for the mask estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import MaskEstimator
from .losses import LossSpec, evaluate_loss
from .signal import AnalysisConfig

DIVERGENCE_PATIENCE = 50
DIVERGENCE_FACTOR = 10.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    clip: float = 5.0
    hidden: tuple = (128,)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.clip <= 0:
            raise ValueError("clip norm must be positive")


@dataclass
class TrainItem:
    """One mixture prepared for training."""

    features: np.ndarray  # (T, width)
    mix_mag: np.ndarray  # (T, F)
    mix_phase: np.ndarray
    refs: np.ndarray  # (S, samples) time-domain references
    ref_mags: np.ndarray  # (S, T, F)


@dataclass
class TrainResult:
    estimator: MaskEstimator
    curve: list = field(default_factory=list)  # (step, loss, grad_norm)


def batch_loss(estimator: MaskEstimator, items, loss: LossSpec, config: AnalysisConfig):
    """Mean loss over ``items`` and its parameter gradients (summed in item order)."""
    grads = None
    total = []
    for item in items:
        masks, acts = estimator.forward(item.features)
        res = evaluate_loss(loss, masks, item.mix_mag, item.mix_phase, item.refs, item.ref_mags, config)
        g = estimator.backward(acts, res.grad)
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        total.append(res.value)
    n = len(total)
    return math.fsum(total) / n, [g / n for g in grads]


def divergence_threshold(initial: float) -> float:
    """Loss level counted as divergent; ``10 x initial`` for a positive start."""
    return initial + max((DIVERGENCE_FACTOR - 1.0) * abs(initial), 1.0)


def train(items, estimator: MaskEstimator, loss: LossSpec, config: TrainConfig,
          analysis: AnalysisConfig, progress=None) -> TrainResult:
    """Plain gradient descent with global-norm clipping.

    Batches are drawn from reshuffled epochs of ``items`` using ``config.seed``,
    so a run is fully determined by its inputs.
    """
    items = list(items)
    if not items:
        raise ValueError("training set is empty")
    if items[0].features.shape[1] != estimator.input_width:
        raise ValueError(f"feature width {items[0].features.shape[1]} does not match estimator input "
                         f"width {estimator.input_width}")
    est = estimator.copy()
    rng = np.random.default_rng(config.seed)
    batch = min(config.batch_size, len(items))
    order, pos = rng.permutation(len(items)), 0
    curve = []
    initial = None
    above = 0
    for step in range(config.steps):
        if pos + batch > len(order):
            order, pos = rng.permutation(len(items)), 0
        idx = order[pos:pos + batch]
        pos += batch
        value, grads = batch_loss(est, [items[i] for i in idx], loss, analysis)
        norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
        curve.append((step, value, norm))
        if initial is None:
            initial = value
        above = above + 1 if value > divergence_threshold(initial) else 0
        if above >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(f"loss above {divergence_threshold(initial):.4g} for "
                                   f"{DIVERGENCE_PATIENCE} consecutive steps (step {step}, loss {value:.4g})")
        factor = config.lr * (min(1.0, config.clip / norm) if norm > 0 else 1.0)
        est.set_parameters([p - factor * g for p, g in zip(est.parameters(), grads)])
        if progress is not None:
            progress(step, value, norm)
    return TrainResult(est, curve)
