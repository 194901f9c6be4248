"""Mixtures of neural implicit functions.

``M`` SIREN bases share one architecture. A latent vector is mapped to one
coefficient per (layer, basis) pair, and the bases are collapsed into a single
SIREN by a per-layer weighted sum of their parameters. Because every layer is
affine before its sine, evaluating the collapsed network is the same as
mixing the per-basis affine outputs, at the cost of one network per query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .siren import SirenConfig, SirenParams, count_params, forward, init_siren

COEFFICIENT_MODES = ("shared", "layer_specific", "latent_projected")


@dataclass(frozen=True)
class MnifConfig:
    siren: SirenConfig
    num_mixtures: int
    latent_dim: int
    coefficient_mode: str = "latent_projected"
    mix_output_layer: bool = True
    projection_scale: float | None = None
    basis_init: str = "matched"

    def __post_init__(self):
        if self.num_mixtures < 1:
            raise ValueError("num_mixtures must be >= 1")
        if self.coefficient_mode not in COEFFICIENT_MODES:
            raise ValueError(f"coefficient_mode must be one of {COEFFICIENT_MODES}")
        if self.coefficient_mode == "latent_projected" and self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1 for latent_projected mode")
        if self.basis_init not in ("matched", "independent"):
            raise ValueError("basis_init must be 'matched' or 'independent'")

    @property
    def num_layers(self) -> int:
        return self.siren.num_layers

    @property
    def num_coefficients(self) -> int:
        """Length of the coefficient vector alpha."""
        if self.coefficient_mode == "shared":
            return self.num_mixtures
        return self.num_mixtures * self.num_layers

    @property
    def latent_size(self) -> int:
        """Length of the per-instance latent vector phi."""
        if self.coefficient_mode == "latent_projected":
            return self.latent_dim
        return self.num_coefficients


@dataclass
class BasisBank:
    """Basis parameters stacked along a leading mixture axis.

    ``weights[i]`` has shape ``[M, out_i, in_i]`` and ``biases[i]`` ``[M, out_i]``.
    """

    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def num_mixtures(self) -> int:
        return self.weights[0].shape[0]

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def basis(self, m: int) -> SirenParams:
        return SirenParams(
            [nx.Tensor(w.data[m]) for w in self.weights],
            [nx.Tensor(b.data[m]) for b in self.biases],
        )

    @classmethod
    def from_bases(cls, bases: list[SirenParams]) -> BasisBank:
        n_layers = len(bases[0])
        weights = [nx.parameter(np.stack([b.weights[i].data for b in bases])) for i in range(n_layers)]
        biases = [nx.parameter(np.stack([b.biases[i].data for b in bases])) for i in range(n_layers)]
        return cls(weights, biases)


@dataclass
class CoefficientHead:
    """Affine map from a latent vector to mixture coefficients.

    ``projection`` is ``None`` in the shared and layer-specific modes, where
    the latent vector *is* the coefficient offset. Rows are layer-major: all
    ``M`` coefficients of layer 0, then layer 1, and so on.
    """

    projection: Tensor | None
    bias: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.bias] if self.projection is None else [self.projection, self.bias]

    def numel(self) -> int:
        return sum(t.size for t in self.tensors())


@dataclass
class CollapsedInr:
    params: SirenParams
    config: SirenConfig

    def __call__(self, coords):
        return forward(self.params, self.config, coords)


def coefficients(head: CoefficientHead, phi) -> Tensor:
    """alpha = T phi + bias, for phi of shape [H] or [B, H]."""
    phi = nx.as_tensor(phi)
    if head.projection is None:
        if phi.shape[-1] != head.bias.shape[0]:
            raise DimensionError(f"latent of size {phi.shape[-1]} does not match {head.bias.shape[0]} coefficients")
        return phi + head.bias
    H = head.projection.shape[1]
    if phi.shape[-1] != H:
        raise DimensionError(f"latent of size {phi.shape[-1]} does not match projection {head.projection.shape}")
    if phi.ndim == 1:
        out = nx.matmul(head.projection, nx.reshape(phi, (H, 1)))
        return nx.reshape(out, (head.projection.shape[0],)) + head.bias
    return nx.matmul(phi, nx.transpose(head.projection)) + head.bias


def layer_coefficients(alpha: Tensor, cfg: MnifConfig) -> list[Tensor]:
    """Split alpha into per-layer ``[..., M]`` slices (shared mode reuses one)."""
    M = cfg.num_mixtures
    if alpha.shape[-1] != cfg.num_coefficients:
        raise DimensionError(f"alpha has length {alpha.shape[-1]}, expected {cfg.num_coefficients}")
    if cfg.coefficient_mode == "shared":
        per_layer = [alpha] * cfg.num_layers
    else:
        per_layer = [alpha[..., i * M:(i + 1) * M] for i in range(cfg.num_layers)]
    if not cfg.mix_output_layer:
        lead = alpha.shape[:-1]
        per_layer[-1] = nx.Tensor(np.full(lead + (M,), 1.0 / M, dtype=alpha.dtype))
    return per_layer


def collapse(bank: BasisBank, alpha, cfg: MnifConfig) -> CollapsedInr:
    """Weighted model average of the bases, one network per alpha row."""
    alpha = nx.as_tensor(alpha)
    M = bank.num_mixtures
    if M != cfg.num_mixtures:
        raise DimensionError(f"bank holds {M} bases but config expects {cfg.num_mixtures}")
    batched = alpha.ndim == 2
    a2 = alpha if batched else nx.reshape(alpha, (1, alpha.shape[0]))
    weights, biases = [], []
    for a, w, b in zip(layer_coefficients(a2, cfg), bank.weights, bank.biases):
        out_f, in_f = w.shape[1], w.shape[2]
        wbar = nx.matmul(a, nx.reshape(w, (M, out_f * in_f)))
        bbar = nx.matmul(a, b)
        if batched:
            weights.append(nx.reshape(wbar, (a.shape[0], out_f, in_f)))
            biases.append(bbar)
        else:
            weights.append(nx.reshape(wbar, (out_f, in_f)))
            biases.append(nx.reshape(bbar, (out_f,)))
    return CollapsedInr(SirenParams(weights, biases), cfg.siren)


def mixture_forward(bank: BasisBank, head: CoefficientHead, phi, coords, cfg: MnifConfig) -> Tensor:
    """Collapse then evaluate; phi [H] with coords [n, d], or phi [B, H] with coords [B, n, d]."""
    inr = collapse(bank, coefficients(head, phi), cfg)
    return inr(coords)


def init_mnif(cfg: MnifConfig, seed, dtype=np.float32) -> tuple[BasisBank, CoefficientHead]:
    """Independent SIREN draws per basis; head bias 1/M so phi = 0 averages uniformly.

    With ``basis_init="matched"`` each basis is scaled by sqrt(M) so the uniform
    average of M independent draws has SIREN's per-layer weight variance;
    otherwise averaging shrinks the weights by 1/sqrt(M).
    """
    M = cfg.num_mixtures
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(M + 1)
    bases = [init_siren(cfg.siren, children[m], dtype=dtype) for m in range(M)]
    bank = BasisBank.from_bases(bases)
    if cfg.basis_init == "matched" and M > 1:
        gain = dtype(math.sqrt(M))
        for w in bank.weights:
            w.data *= gain

    n_coef = cfg.num_coefficients
    bias = nx.parameter(np.full(n_coef, 1.0 / M, dtype=dtype))
    if cfg.coefficient_mode != "latent_projected":
        return bank, CoefficientHead(None, bias)
    H = cfg.latent_dim
    s = cfg.projection_scale if cfg.projection_scale is not None else 1.0 / math.sqrt(H)
    rng = np.random.default_rng(children[M])
    proj = nx.parameter(rng.uniform(-s, s, size=(n_coef, H)).astype(dtype))
    return bank, CoefficientHead(proj, bias)


def inference_param_count(cfg: MnifConfig) -> int:
    return count_params(cfg.siren)


def learnable_param_count(cfg: MnifConfig) -> int:
    head = cfg.num_coefficients
    if cfg.coefficient_mode == "latent_projected":
        head += cfg.num_coefficients * cfg.latent_dim
    return cfg.num_mixtures * count_params(cfg.siren) + head


@dataclass
class MnifModel:
    """Bases, coefficient head and their configuration, trained together."""

    config: MnifConfig
    bank: BasisBank
    head: CoefficientHead

    @classmethod
    def init(cls, cfg: MnifConfig, seed) -> MnifModel:
        bank, head = init_mnif(cfg, seed)
        return cls(cfg, bank, head)

    def parameters(self) -> list[Tensor]:
        return self.bank.tensors() + self.head.tensors()

    def collapse(self, phi) -> CollapsedInr:
        return collapse(self.bank, coefficients(self.head, phi), self.config)

    def __call__(self, phi, coords) -> Tensor:
        return mixture_forward(self.bank, self.head, phi, coords, self.config)
