"""Encoders and projection heads built on the autograd tensor.

Parameters are plain requires-grad tensors initialized with uniform
Kaiming-style fan-in scaling from an explicit seed, so every model is
reproducible from its config.  ``forward(..., frozen=True)`` runs the same
computation with parameters wrapped as constants, which keeps attack and
probe tapes free of weight gradients.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def _kaiming_uniform(rng, fan_in: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    """Affine map x @ W + b with W of shape [in_dim, out_dim]."""

    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float64):
        self.W = Tensor(_kaiming_uniform(rng, in_dim, (in_dim, out_dim), dtype), requires_grad=True)
        self.b = Tensor(np.zeros((1, out_dim), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        w, b = (self.W.detach(), self.b.detach()) if frozen else (self.W, self.b)
        return x @ w + b

    def params(self) -> list[Tensor]:
        return [self.W, self.b]


class MLPEncoder:
    """Fully connected encoder with relu after every layer.

    Image inputs ([B, c, h, w]) are centered from [0, 1] to [-1, 1] before
    the first layer; all-positive inputs through relu stacks otherwise give
    nearly collinear embeddings and starve the contrastive losses.
    """

    def __init__(self, in_dim: int, widths, rng, dtype=np.float64, center_inputs: bool = False):
        self.layers = []
        self.center_inputs = center_inputs
        d = in_dim
        for w in widths:
            self.layers.append(Linear(d, w, rng, dtype))
            d = w
        self.out_dim = d

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        h = x
        if self.center_inputs:
            h = (h - 0.5) * 2.0
        if h.data.ndim > 2:
            h = ag.reshape(h, (h.shape[0], -1))
        for layer in self.layers:
            h = ag.relu(layer(h, frozen=frozen))
        return h

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


class ConvStemEncoder:
    """A single 3x3 conv stem followed by the MLP encoder."""

    def __init__(self, in_shape, widths, rng, stem_channels: int = 16, dtype=np.float64):
        c, h, w = in_shape
        self.kernel = Tensor(
            _kaiming_uniform(rng, c * 9, (stem_channels, c, 3, 3), dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(stem_channels, dtype=dtype), requires_grad=True)
        self.mlp = MLPEncoder(stem_channels * h * w, widths, rng, dtype)
        self.out_dim = self.mlp.out_dim

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        k, b = (self.kernel.detach(), self.bias.detach()) if frozen else (self.kernel, self.bias)
        h = ag.relu(ag.conv3x3((x - 0.5) * 2.0, k, b))
        return self.mlp(h, frozen=frozen)

    def params(self) -> list[Tensor]:
        return [self.kernel, self.bias] + self.mlp.params()


class ContrastiveModel:
    """Encoder plus a single linear projection head.

    ``forward`` returns projection outputs for the contrastive losses;
    ``features`` returns encoder outputs, which is what the linear probe
    consumes once the head is dropped.
    """

    def __init__(self, encoder, head: Linear):
        self.encoder = encoder
        self.head = head

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        return self.head(self.encoder(x, frozen=frozen), frozen=frozen)

    def features(self, x: Tensor, frozen: bool = True) -> Tensor:
        return self.encoder(x, frozen=frozen)

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        enc = self.encoder.params()
        for i, p in enumerate(enc):
            named[f"encoder.{i}"] = p
        for i, p in enumerate(self.head.params()):
            named[f"head.{i}"] = p
        return named


def build_model(
    kind: str,
    input_shape,
    widths,
    proj_dim: int,
    seed: int,
    stem_channels: int = 16,
    dtype=np.float64,
) -> ContrastiveModel:
    """Seed-deterministic model construction from an encoder spec.

    ``input_shape`` is (c, h, w) for images or (d,) for vectors.
    """
    rng = np.random.default_rng([seed, 11])
    widths = tuple(int(w) for w in widths)
    if kind == "mlp":
        in_dim = int(np.prod(input_shape))
        encoder = MLPEncoder(in_dim, widths, rng, dtype, center_inputs=len(input_shape) == 3)
    elif kind == "conv-stem-mlp":
        if len(input_shape) != 3:
            raise ValueError("conv-stem-mlp needs (c, h, w) input")
        encoder = ConvStemEncoder(input_shape, widths, rng, stem_channels, dtype)
    else:
        raise ValueError(f"unknown encoder kind: {kind!r}")
    head = Linear(encoder.out_dim, proj_dim, rng, dtype)
    return ContrastiveModel(encoder, head)
