"""Reconstruction metrics, shape-set metrics, cost accounting, basis analysis.

FLOPs are counted as one per multiply-accumulate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mixture import BasisBank, MnifConfig, learnable_param_count
from .numerics import ContractError, DimensionError, Tensor
from .siren import count_params

log = logging.getLogger(__name__)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def mse(pred, target) -> float:
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {t.shape}")
    diff = p.astype(np.float64) - t.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def psnr(pred, target, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    return psnr_from_mse(mse(pred, target), peak)


# -- point sets -----------------------------------------------------------------


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance a->b plus b->a."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def chamfer_matrix(generated, reference) -> np.ndarray:
    return np.array([[chamfer(g, r) for r in reference] for g in generated])


def coverage_mmd(generated, reference) -> tuple[float, float]:
    """Coverage and minimum matching distance under the Chamfer distance.

    Coverage is the fraction of reference sets that are the nearest reference
    of at least one generated set (ties go to the lowest index). MMD is the
    mean over reference sets of the smallest distance to any generated set.
    """
    if len(generated) == 0 or len(reference) == 0:
        raise ContractError("coverage_mmd needs non-empty generated and reference lists")
    dist = chamfer_matrix(generated, reference)
    matched = np.unique(np.argmin(dist, axis=1))
    return len(matched) / len(reference), float(np.mean(dist.min(axis=0)))


# -- cost accounting ---------------------------------------------------------------


@dataclass
class CostReport:
    inference_params: int
    learnable_params: int
    flops_per_instance: int
    activation_evals: int
    collapse_flops: int
    peak_buffer_bytes: int

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def gflops(self) -> float:
        return self.flops_per_instance / 1e9


def cost_report(cfg: MnifConfig, queries: int) -> CostReport:
    s = cfg.siren
    W, d, k, L = s.hidden_width, s.in_dim, s.out_dim, s.hidden_depth
    macs_per_query = d * W + L * W * W + k * W
    n_inf = count_params(s)
    return CostReport(
        inference_params=n_inf,
        learnable_params=learnable_param_count(cfg),
        flops_per_instance=queries * macs_per_query,
        activation_evals=queries * (L + 1) * W,
        collapse_flops=cfg.num_mixtures * n_inf,
        # float32 collapsed weights plus two ping-pong activation buffers
        peak_buffer_bytes=4 * (n_inf + 2 * queries * max(W, d, k)),
    )


# -- basis analysis -------------------------------------------------------------


def basis_similarity(bank: BasisBank) -> tuple[list[np.ndarray], list[str]]:
    """Per-layer |cosine| between flattened basis weight matrices, zero diagonal.

    Returns the matrices and a list of warnings for zero-norm bases, whose
    entries are defined as 0.
    """
    M = bank.num_mixtures
    if M < 2:
        raise ContractError("basis_similarity needs at least two bases")
    mats, warnings = [], []
    for layer, w in enumerate(bank.weights):
        flat = w.data.reshape(M, -1).astype(np.float64)
        norms = np.linalg.norm(flat, axis=1)
        zero = norms == 0
        for m in np.flatnonzero(zero):
            warnings.append(f"layer {layer}: basis {m} has zero-norm weights")
        safe = np.where(zero, 1.0, norms)
        unit = flat / safe[:, None]
        sim = np.abs(unit @ unit.T)
        sim[zero, :] = 0.0
        sim[:, zero] = 0.0
        np.fill_diagonal(sim, 0.0)
        mats.append(np.clip(sim, 0.0, 1.0))
    for msg in warnings:
        log.warning(msg)
    return mats, warnings


def mean_offdiagonal(mat: np.ndarray) -> float:
    M = mat.shape[0]
    return float(mat.sum() / (M * (M - 1)))
