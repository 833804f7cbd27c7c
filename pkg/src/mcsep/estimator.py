"""Per-frame MLP mask estimator with hand-written backpropagation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


LOCAL_GAIN = 8.0


class NonFiniteGradient(FloatingPointError):
    pass


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class MaskEstimator:
    """tanh hidden layers, sigmoid output of width ``n_sources * bins``.

    Besides the dense layers, an optional bin-local path adds
    ``LOCAL_GAIN * sum_p local[s, p] * x[p, f]`` to the output logit of
    source ``s`` at bin ``f``, where ``x[p, f]`` is plane ``p`` of the
    standardised input frame.  Its weights are shared by all bins, so a rule
    such as "mask follows the angle-feature difference" is learned once for
    the whole spectrum.  The constant gain speeds up this path under the
    single learning rate.  ``shift`` and ``scale`` standardise the input
    features and are stored with the weights.
    """

    widths: tuple  # (input, *hidden, n_sources * bins)
    n_sources: int
    bins: int
    weights: list  # W_k with shape (widths[k], widths[k + 1])
    biases: list
    shift: np.ndarray = None
    scale: np.ndarray = None
    feature_mode: str = "single"
    local: np.ndarray = None  # (n_sources, planes) or None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.widths[-1] != self.n_sources * self.bins:
            raise ValueError(f"output width {self.widths[-1]} != {self.n_sources} x {self.bins}")
        if self.shift is None:
            self.shift = np.zeros(self.widths[0])
        if self.scale is None:
            self.scale = np.ones(self.widths[0])
        if self.local is not None:
            planes, rem = divmod(self.widths[0], self.bins)
            if rem or self.local.shape != (self.n_sources, planes):
                raise ValueError(f"bin-local weights {self.local.shape} do not fit input width "
                                 f"{self.widths[0]} with {self.bins} bins")

    @classmethod
    def create(cls, input_width: int, hidden, n_sources: int, bins: int, seed: int = 0,
               feature_mode: str = "single", local: bool = True) -> "MaskEstimator":
        """Uniform ``+-1/sqrt(fan_in)`` weights; zero biases and bin-local weights."""
        widths = (input_width, *hidden, n_sources * bins)
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        local_w = np.zeros((n_sources, input_width // bins)) if local else None
        return cls(widths, n_sources, bins, weights, biases, feature_mode=feature_mode, local=local_w)

    @property
    def input_width(self) -> int:
        return self.widths[0]

    def parameters(self) -> list:
        params = [p for pair in zip(self.weights, self.biases) for p in pair]
        return params + ([self.local] if self.local is not None else [])

    def set_parameters(self, params) -> None:
        params = [np.array(p, dtype=np.float64) for p in params]
        n = 2 * len(self.weights)
        self.weights = params[0:n:2]
        self.biases = params[1:n:2]
        if self.local is not None:
            self.local = params[n]

    def copy(self) -> "MaskEstimator":
        return MaskEstimator(self.widths, self.n_sources, self.bins,
                             [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.shift.copy(), self.scale.copy(), self.feature_mode,
                             None if self.local is None else self.local.copy())

    def _check_input(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.input_width:
            raise ValueError(f"feature width {features.shape[-1]} does not match estimator input width "
                             f"{self.input_width}")
        return features

    def forward(self, features):
        """Masks ``(S, T, F)`` for features ``(T, width)`` plus a cache for :meth:`backward`."""
        x = (self._check_input(features) - self.shift) / self.scale
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if k == last:
                if self.local is not None:
                    planes = x.reshape(len(x), -1, self.bins)
                    z = z + LOCAL_GAIN * np.einsum("tpf,sp->tsf", planes, self.local).reshape(len(x), -1)
                h = _sigmoid(z)
            else:
                h = np.tanh(z)
            acts.append(h)
        masks = h.reshape(len(h), self.n_sources, self.bins).transpose(1, 0, 2)
        return masks, acts

    def predict(self, features) -> np.ndarray:
        return self.forward(features)[0]

    def backward(self, acts, mask_grad) -> list:
        """Parameter gradients (same order as :meth:`parameters`) from ``dL/dmasks``."""
        mask_grad = np.asarray(mask_grad, dtype=np.float64)
        out = acts[-1]
        g = mask_grad.transpose(1, 0, 2).reshape(out.shape) * out * (1.0 - out)
        g_logits = g
        grads = []
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = acts[k]
            grads.append(g.sum(axis=0))
            grads.append(h_in.T @ g)
            if k:
                g = (g @ self.weights[k].T) * (1.0 - h_in ** 2)
        grads.reverse()
        if self.local is not None:
            planes = acts[0].reshape(len(out), -1, self.bins)
            g_sf = g_logits.reshape(len(out), self.n_sources, self.bins)
            grads.append(LOCAL_GAIN * np.einsum("tsf,tpf->sp", g_sf, planes))
        for i, gr in enumerate(grads):
            if not np.all(np.isfinite(gr)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {i} (shape {gr.shape}); "
                                        f"max |dL/dmask| = {np.nanmax(np.abs(mask_grad)):.3g}")
        return grads


@dataclass
class FeatureStats:
    shift: np.ndarray
    scale: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, feature_list, floor: float = 1e-3) -> "FeatureStats":
        """Per-dimension mean and standard deviation over all frames."""
        total = sum(len(f) for f in feature_list)
        mean = sum(np.asarray(f, np.float64).sum(axis=0) for f in feature_list) / total
        var = sum(((np.asarray(f, np.float64) - mean) ** 2).sum(axis=0) for f in feature_list) / total
        return cls(mean, np.maximum(np.sqrt(var), floor))
