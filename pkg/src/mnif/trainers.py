"""Stage-1 context adaptation: meta-learning and auto-decoding.

Meta-learning re-initialises every instance's latent from N(0, sigma^2 I),
takes a few plain gradient steps on it, and updates the shared parameters at
the adapted latent. With ``second_order`` the outer gradient also flows
through the inner steps. Auto-decoding keeps one persistent latent per
instance and optimises it jointly with the shared parameters.

Training logs are lists of per-epoch records; :func:`log_line` renders the
``step=... epoch=... loss=... psnr=... lr=...`` text form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from . import seeding
from .metrics import psnr_from_mse
from .mixture import MnifConfig, MnifModel
from .numerics import DimensionError, Tensor
from .optim import Adam, RowAdam, schedule_lr

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message: str, step: int, last_good: dict | None = None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class MetaTrainConfig:
    inner_steps: int = 3
    inner_lr: float = 0.03
    outer_lr: float = 1e-3
    latent_init_std: float = 0.01
    second_order: bool = True
    batch_size: int = 16
    epochs: int = 100
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise ValueError("learning rates must be > 0")
        if self.latent_init_std < 0:
            raise ValueError("latent_init_std must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")


@dataclass(frozen=True)
class AutoDecodeConfig:
    lr: float = 1e-3
    latent_lr: float | None = None
    latent_init_std: float = 0.01
    latent_weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 100
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if not self.lr > 0 or (self.latent_lr is not None and not self.latent_lr > 0):
            raise ValueError("learning rates must be > 0")
        if self.latent_weight_decay < 0:
            raise ValueError("latent_weight_decay must be >= 0")
        if self.latent_init_std < 0:
            raise ValueError("latent_init_std must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")


@dataclass
class LatentTable:
    latents: np.ndarray  # [N, H]
    ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(len(self.latents)))
        if len(self.ids) != len(self.latents):
            raise DimensionError("one id per latent row is required")

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def dim(self) -> int:
        return self.latents.shape[1]

    def row(self, instance_id: int) -> np.ndarray:
        try:
            return self.latents[self.ids.index(instance_id)]
        except ValueError:
            raise KeyError(f"unknown instance id {instance_id}") from None


def log_line(rec: dict) -> str:
    return f"step={rec['step']} epoch={rec['epoch']} loss={rec['loss']:.6g} psnr={rec['psnr']:.4f} lr={rec['lr']:.6g}"


# -- losses ---------------------------------------------------------------------


def reconstruction_loss(pred, target) -> Tensor:
    """Mean squared error over every element."""
    pred = nx.as_tensor(pred)
    target = nx.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    return nx.mean(nx.square(pred - target))


def per_instance_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error per leading (instance) index, shape [B]."""
    target = nx.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    return nx.mean(nx.square(pred - target), axis=tuple(range(1, pred.ndim)))


# -- inner loop -------------------------------------------------------------------


def adapt_latent(objective: Callable[[Tensor], Tensor], phi0: Tensor, steps: int, lr: float, create_graph: bool) -> Tensor:
    """Plain gradient descent on ``phi`` for a scalar ``objective``.

    With ``create_graph`` the result stays differentiable w.r.t. whatever the
    objective depends on; otherwise each step is detached.
    """
    phi = phi0 if phi0.requires_grad else Tensor(phi0.data, requires_grad=True)
    for n in range(steps):
        loss = objective(phi)
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"non-finite inner loss at inner step {n}", step=n)
        (g,) = nx.grad(loss, [phi], create_graph=create_graph)
        if create_graph:
            phi = phi - nx.scale(g, lr)
        else:
            phi = Tensor(phi.data - lr * g.data, requires_grad=True)
    return phi


def _draw_latents(rng: np.random.Generator, n: int, dim: int, std: float) -> np.ndarray:
    return (std * rng.standard_normal((n, dim))).astype(np.float32)


def inner_adapt(model: MnifModel, batch_item, cfg: MetaTrainConfig, seed=None, phi0=None, decode=None) -> Tensor:
    """Adapt latents for a batch ``(coords [B, n, d], targets [B, n, k][, aux])``.

    ``phi0`` defaults to a N(0, sigma^2 I) draw from ``seed``.
    """
    coords, targets, *rest = batch_item
    aux = rest[0] if rest else None
    coords = np.asarray(coords, dtype=np.float32)
    if phi0 is None:
        rng = np.random.default_rng(seed)
        phi0 = _draw_latents(rng, coords.shape[0], model.config.latent_size, cfg.latent_init_std)
    phi0 = Tensor(np.asarray(phi0, dtype=np.float32), requires_grad=True)
    decode = decode or (lambda raw, _aux: raw)

    def objective(phi):
        pred = decode(model(phi, coords), aux)
        return nx.sum_(per_instance_loss(pred, targets))

    return adapt_latent(objective, phi0, cfg.inner_steps, cfg.inner_lr, create_graph=cfg.second_order)


# -- helpers ----------------------------------------------------------------------


def _snapshot(model: MnifModel) -> dict:
    return {"params": [p.data.copy() for p in model.parameters()]}


def _check_finite(params, step: int, last_good: dict | None) -> None:
    for p in params:
        if not np.isfinite(p.data).all():
            raise DivergenceError(f"non-finite parameters after step {step}", step=step, last_good=last_good)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _check_dataset(dataset, cfg: MnifConfig) -> None:
    if dataset.in_dim != cfg.siren.in_dim or dataset.out_dim != cfg.siren.out_dim:
        raise DimensionError(
            f"dataset maps {dataset.in_dim}->{dataset.out_dim} but the network is "
            f"{cfg.siren.in_dim}->{cfg.siren.out_dim}"
        )


# -- meta-learning ----------------------------------------------------------------


def meta_train(dataset, mnif_cfg: MnifConfig, cfg: MetaTrainConfig, seed: int, model: MnifModel | None = None,
               on_epoch: Callable | None = None) -> tuple[MnifModel, list[dict]]:
    """Meta-learn bases and head; outer gradients are averaged over each batch."""
    _check_dataset(dataset, mnif_cfg)
    model = model or MnifModel.init(mnif_cfg, seeding.substream(seed, "init"))
    params = model.parameters()
    opt = Adam(params, cfg.outer_lr)
    shuffle = seeding.rng(seed, "data-shuffle")
    latent_rng = seeding.rng(seed, "latent-init")
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    H = mnif_cfg.latent_size

    history: list[dict] = []
    step = 0
    last_good = _snapshot(model)
    for epoch in range(cfg.epochs):
        err_sum, count = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, shuffle):
            coords, targets, aux = dataset.batch(idx, shuffle)
            coords = np.asarray(coords, dtype=np.float32)
            phi0 = _draw_latents(latent_rng, len(idx), H, cfg.latent_init_std)
            phi = inner_adapt(model, (coords, targets, aux), cfg, phi0=phi0, decode=dataset.decode)
            per_item = per_instance_loss(dataset.decode(model(phi, coords), aux), targets)
            loss = nx.mean(per_item)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite outer loss at step {step}", step=step, last_good=last_good)
            grads = nx.grad(loss, params)
            lr = schedule_lr(cfg.lr_schedule, cfg.outer_lr, step, total)
            opt.step(grads, lr)
            _check_finite(params, step, last_good)
            err_sum += float(per_item.data.sum())
            count += len(idx)
            step += 1
        err = err_sum / count
        rec = {"step": step, "epoch": epoch, "loss": err, "psnr": psnr_from_mse(err), "lr": lr}
        history.append(rec)
        log.info(log_line(rec))
        last_good = _snapshot(model)
        if on_epoch is not None:
            on_epoch(model, rec)
    return model, history


def harvest_latents(model: MnifModel, dataset, cfg: MetaTrainConfig, seed: int, table: LatentTable | None = None,
                    batch_size: int | None = None) -> LatentTable:
    """Latents for every instance: re-adapted for meta models, copied for auto-decoded ones."""
    if table is not None:
        return LatentTable(table.latents.copy(), list(table.ids))
    rng = seeding.rng(seed, "harvest")
    first_order = MetaTrainConfig(**{**cfg.__dict__, "second_order": False})
    bs = batch_size or cfg.batch_size
    rows = []
    for lo in range(0, len(dataset), bs):
        idx = np.arange(lo, min(lo + bs, len(dataset)))
        coords, targets, aux = dataset.full_batch(idx)
        phi0 = _draw_latents(rng, len(idx), model.config.latent_size, cfg.latent_init_std)
        phi = inner_adapt(model, (coords, targets, aux), first_order, phi0=phi0, decode=dataset.decode)
        rows.append(phi.data.copy())
    return LatentTable(np.concatenate(rows).astype(np.float32))


def reconstruct(model: MnifModel, dataset, latents: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Decoded predictions for every instance, stacked along axis 0."""
    out = []
    with nx.no_grad():
        for lo in range(0, len(dataset), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(dataset)))
            coords, _, aux = dataset.full_batch(idx)
            raw = model(latents[idx], np.asarray(coords, dtype=np.float32))
            out.append(dataset.decode(raw, aux).data)
    return np.concatenate(out)


def dataset_targets(dataset) -> np.ndarray:
    return np.concatenate(
        [dataset.full_batch(np.arange(lo, min(lo + 16, len(dataset))))[1] for lo in range(0, len(dataset), 16)]
    )


# -- auto-decoding ----------------------------------------------------------------


def auto_decode_train(dataset, mnif_cfg: MnifConfig, cfg: AutoDecodeConfig, seed: int,
                      on_epoch: Callable | None = None) -> tuple[MnifModel, LatentTable, list[dict]]:
    """Jointly optimise shared parameters and one persistent latent per instance."""
    _check_dataset(dataset, mnif_cfg)
    model = MnifModel.init(mnif_cfg, seeding.substream(seed, "init"))
    params = model.parameters()
    latent_rng = seeding.rng(seed, "latent-init")
    table = nx.parameter(_draw_latents(latent_rng, len(dataset), mnif_cfg.latent_size, cfg.latent_init_std))
    opt = Adam(params, cfg.lr)
    latent_lr = cfg.latent_lr if cfg.latent_lr is not None else cfg.lr
    latent_opt = RowAdam(table, latent_lr, weight_decay=cfg.latent_weight_decay)
    shuffle = seeding.rng(seed, "data-shuffle")
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs

    history: list[dict] = []
    step = 0
    last_good = _snapshot(model)
    for epoch in range(cfg.epochs):
        err_sum, count = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, shuffle):
            coords, targets, aux = dataset.batch(idx, shuffle)
            phi = nx.getitem(table, idx)
            per_item = per_instance_loss(dataset.decode(model(phi, np.asarray(coords, np.float32)), aux), targets)
            loss = nx.mean(per_item)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at step {step}", step=step, last_good=last_good)
            *grads, g_phi = nx.grad(loss, params + [phi])
            frac = schedule_lr(cfg.lr_schedule, 1.0, step, total)
            opt.step(grads, cfg.lr * frac)
            latent_opt.step(idx, g_phi.data, latent_lr * frac)
            _check_finite(params + [table], step, last_good)
            err_sum += float(per_item.data.sum())
            count += len(idx)
            step += 1
        err = err_sum / count
        rec = {"step": step, "epoch": epoch, "loss": err, "psnr": psnr_from_mse(err), "lr": cfg.lr * frac}
        history.append(rec)
        log.info(log_line(rec))
        last_good = _snapshot(model)
        if on_epoch is not None:
            on_epoch(model, rec)
    return model, LatentTable(table.data.copy()), history
