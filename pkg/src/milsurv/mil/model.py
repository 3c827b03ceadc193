"""Feedforward patch encoder with mean pooling and a linear Cox head.

A case score is ``head(mean_p encoder(x_p))``. Because the head is linear this
equals the mean of the per-patch scores ``head(encoder(x_p))``, which is what
makes patch-level scores well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from milsurv.errors import ValidationError


@dataclass(frozen=True)
class ArchConfig:
    """Encoder shape. Widths grow geometrically and are capped at ``max_depth``."""

    n_layers: int = 2
    base_depth: int = 32
    depth_growth: float = 1.5
    max_depth: int = 64

    def widths(self) -> list[int]:
        return [
            int(min(self.max_depth, round(self.base_depth * self.depth_growth**i)))
            for i in range(self.n_layers)
        ]


@dataclass
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1] if self.weights else 0


@dataclass
class MilModel:
    encoder: EncoderParams
    head_w: np.ndarray
    head_b: np.ndarray  # shape (1,)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list: W0, b0, ..., W_{L-1}, b_{L-1}, head_w, head_b."""
        out = []
        for w, b in zip(self.encoder.weights, self.encoder.biases):
            out += [w, b]
        return out + [self.head_w, self.head_b]

    @classmethod
    def from_parameters(cls, params: list[np.ndarray]) -> "MilModel":
        *layers, head_w, head_b = params
        return cls(EncoderParams(list(layers[0::2]), list(layers[1::2])), head_w, head_b)

    def copy(self) -> "MilModel":
        return MilModel.from_parameters([p.copy() for p in self.parameters()])

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.encoder.weights)):
            names += [f"W{i}", f"b{i}"]
        return names + ["head_w", "head_b"]


def init_model(input_dim: int, arch: ArchConfig, rng) -> MilModel:
    """Uniform fan-in scaled weights, zero biases."""
    weights, biases = [], []
    fan_in = input_dim
    for width in arch.widths():
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, width)))
        biases.append(np.zeros(width))
        fan_in = width
    bound = 1.0 / np.sqrt(fan_in)
    head_w = rng.uniform(-bound, bound, fan_in)
    return MilModel(EncoderParams(weights, biases), head_w, np.zeros(1))


def encode(enc: EncoderParams, x: np.ndarray, keep: bool = False):
    """Embed patches ``x`` (N, d). With ``keep`` also return the pre-activations."""
    if x.ndim != 2 or x.shape[1] != enc.input_dim:
        raise ValidationError(
            f"patch dimension {x.shape[-1] if x.ndim else None} does not match encoder input {enc.input_dim}"
        )
    h = x
    pre = []
    last = len(enc.weights) - 1
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return (h, pre) if keep else h


def patch_scores(model: MilModel, x: np.ndarray) -> np.ndarray:
    return encode(model.encoder, x) @ model.head_w + model.head_b[0]


@dataclass(frozen=True)
class ForwardResult:
    patch_scores: np.ndarray
    case_score: float


def forward(model: MilModel, bag: np.ndarray) -> ForwardResult:
    """Score one bag of patch vectors (m, d)."""
    bag = np.asarray(bag, dtype=float)
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise ValidationError("bag must be a nonempty (m, d) matrix")
    h = encode(model.encoder, bag)
    pooled = h.mean(axis=0)
    return ForwardResult(h @ model.head_w + model.head_b[0], float(pooled @ model.head_w + model.head_b[0]))


def batch_forward(model: MilModel, bags: np.ndarray):
    """Case scores for equal-size bags ``(B, n, d)``; returns ``(scores, cache)``."""
    b, n, d = bags.shape
    h, pre = encode(model.encoder, bags.reshape(b * n, d), keep=True)
    pooled = h.reshape(b, n, -1).mean(axis=1)
    scores = pooled @ model.head_w + model.head_b[0]
    return scores, (bags.reshape(b * n, d), pre, h, pooled, n)


def batch_backward(model: MilModel, cache, d_scores: np.ndarray) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. all parameters given ``dloss/dscores``."""
    x, pre, h, pooled, n = cache
    enc = model.encoder
    g_head_w = pooled.T @ d_scores
    g_head_b = np.array([d_scores.sum()])
    # every patch of case i receives d_scores[i] / n through the mean
    delta = np.repeat(d_scores / n, n)[:, None] * model.head_w[None, :]
    grads_w, grads_b = [None] * len(enc.weights), [None] * len(enc.weights)
    for i in range(len(enc.weights) - 1, -1, -1):
        if i < len(enc.weights) - 1:
            delta = delta * (pre[i] > 0)
        inp = x if i == 0 else np.maximum(pre[i - 1], 0.0)
        grads_w[i] = inp.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ enc.weights[i].T
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out += [gw, gb]
    return out + [g_head_w, g_head_b]
