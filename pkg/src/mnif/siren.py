"""Sine-activated MLP (SIREN) used both as a standalone INR and as the
runtime form of a collapsed mixture."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

OUTPUT_ACTIVATIONS = ("linear", "rgb_density")


@dataclass(frozen=True)
class SirenConfig:
    in_dim: int
    out_dim: int
    hidden_width: int
    hidden_depth: int
    w0: float = 30.0
    output_activation: str = "linear"
    w0_on_input: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or self.hidden_width < 1:
            raise ValueError(f"dimensions must be positive: {self}")
        if self.hidden_depth < 0:
            raise ValueError("hidden_depth must be >= 0")
        if not self.w0 > 0:
            raise ValueError("w0 must be > 0")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        if self.output_activation == "rgb_density" and self.out_dim != 4:
            raise ValueError("rgb_density output needs out_dim == 4")

    @property
    def num_layers(self) -> int:
        return self.hidden_depth + 2

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for layers 0..L+1."""
        W = self.hidden_width
        return [(W, self.in_dim)] + [(W, W)] * self.hidden_depth + [(self.out_dim, W)]


@dataclass
class SirenParams:
    """Per-layer weights and biases.

    Weights may carry a leading batch axis (``[B, out, in]``), one network per
    instance, in which case biases are ``[B, out]``.
    """

    weights: list[Tensor]
    biases: list[Tensor] = field(default_factory=list)

    def __iter__(self):
        return iter(zip(self.weights, self.biases))

    def __len__(self) -> int:
        return len(self.weights)

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def numel(self) -> int:
        return sum(t.size for t in self.tensors())


def hidden_bound(cfg: SirenConfig) -> float:
    return math.sqrt(6.0 / cfg.hidden_width) / cfg.w0


def init_siren(cfg: SirenConfig, seed, dtype=np.float32) -> SirenParams:
    """SIREN initialization; ``seed`` may be an int or a ``SeedSequence``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, (out_f, in_f) in enumerate(cfg.layer_shapes()):
        bound = 1.0 / cfg.in_dim if i == 0 else hidden_bound(cfg)
        w = rng.uniform(-bound, bound, size=(out_f, in_f)).astype(dtype)
        weights.append(nx.parameter(w))
        biases.append(nx.parameter(np.zeros(out_f, dtype=dtype)))
    return SirenParams(weights, biases)


def count_params(cfg: SirenConfig) -> int:
    W, d, k, L = cfg.hidden_width, cfg.in_dim, cfg.out_dim, cfg.hidden_depth
    return W * d + W + L * (W * W + W) + k * W + k


def _affine(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if weight.ndim == 3:
        bias = nx.reshape(bias, (bias.shape[0], 1, bias.shape[1]))
    return nx.matmul(h, nx.transpose(weight)) + bias


def apply_output_activation(raw: Tensor, cfg: SirenConfig) -> Tensor:
    if cfg.output_activation == "linear":
        return raw
    rgb = raw[..., :3]
    # elu(x) + 1 is already >= 0, so no extra clamp is needed
    density = nx.elu(raw[..., 3:]) + 1.0
    return nx.concat([rgb, density], axis=-1)


def _check_coords(coords: Tensor, cfg: SirenConfig) -> None:
    if coords.ndim not in (2, 3) or coords.shape[-1] != cfg.in_dim:
        raise DimensionError(f"coords of shape {coords.shape} do not match in_dim={cfg.in_dim}")


def forward(params: SirenParams, cfg: SirenConfig, coords, return_preactivations: bool = False):
    """Evaluate the network on ``coords`` ([n, d] or [B, n, d]).

    With ``return_preactivations`` also returns the sine arguments
    ``w0 * (W h + b)`` of every sine layer.
    """
    coords = nx.as_tensor(coords)
    _check_coords(coords, cfg)
    h = coords
    pre = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(params):
        z = _affine(h, w, b)
        if i == last:
            out = apply_output_activation(z, cfg)
            return (out, pre) if return_preactivations else out
        if i > 0 or cfg.w0_on_input:
            z = nx.scale(z, cfg.w0)
        pre.append(z)
        h = nx.sin(z)
    raise AssertionError("unreachable")
