"""Command-line entry point: ``mnif <command> [flags]``.

Every RunConfig key is settable as ``--section.key VALUE``; flags override
``--config`` file values. Commands write artifacts under ``--out`` and print
``key=value`` reports on standard output. Exit codes: 0 success,
1 runtime failure or divergence, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import datasets, diffusion, seeding
from . import numerics as nx
from .config import SECTIONS, ConfigError, RunConfig, field_types, from_dict, load_config
from .fields import (
    ImageField,
    ImageSet,
    RayBatch,
    VoxelField,
    VoxelSet,
    camera_rays,
    grid_coords,
    iou,
    render_rays,
    voxelize,
)
from .metrics import basis_similarity, chamfer, cost_report, coverage_mmd, mean_offdiagonal, mse, psnr
from .mixture import MnifModel
from .storage import (
    Checkpoint,
    StorageError,
    atomic_write,
    load_checkpoint,
    read_image,
    read_voxels,
    save_checkpoint,
    write_image,
    write_voxels,
)
from .trainers import (
    DivergenceError,
    auto_decode_train,
    dataset_targets,
    harvest_latents,
    log_line,
    meta_train,
    reconstruct,
)

log = logging.getLogger("mnif")

COMMANDS = ("train-stage1", "train-stage2", "sample", "reconstruct", "interpolate", "eval", "inspect")
SYNTH_DOMAIN = {"gradients": "image", "spheres-3d": "voxel", "lambert-scenes": "nerf"}
DOMAIN_METRICS = {"image": ("psnr", "mse"), "voxel": ("mse", "iou", "chamfer", "coverage", "mmd"),
                  "nerf": ("psnr", "mse")}
CHECKPOINT_NAME = "checkpoint.mnif"


class UsageError(Exception):
    """Bad command-line usage; exits with status 2."""


class MissingSectionError(UsageError):
    """The checkpoint lacks a section the command needs."""


class UnknownIdError(UsageError):
    pass


class MetricUnavailableError(UsageError):
    pass


# -- config resolution --------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="root seed (run.seed)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (run.threads); results are deterministic only for 1")
    grp = p.add_argument_group("config keys")
    for section, cls in SECTIONS.items():
        for key in field_types(cls):
            grp.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", metavar="V", default=argparse.SUPPRESS)


def resolve_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.threads is not None:
        overrides["run.threads"] = args.threads
    for flag, key in (("synth", "data.synth"), ("dataset", "data.path"), ("method", "run.method"),
                      ("domain", "run.domain")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    synth = overrides.get("data.synth")
    if args.config:
        cfg = load_config(args.config, overrides)
        synth = synth or cfg.data.synth
    else:
        cfg = from_dict({}, overrides)
    if synth and synth not in datasets.KINDS:
        raise ConfigError("data.synth", f"unknown synthetic dataset {synth!r}; expected one of {datasets.KINDS}")
    if synth in SYNTH_DOMAIN:
        implied = SYNTH_DOMAIN[synth]
        if "run.domain" in overrides and overrides["run.domain"] != implied:
            raise ConfigError("run.domain", f"synthetic dataset {synth!r} is a {implied} dataset")
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, domain=implied))
        cfg.mnif_config()
    if cfg.run.method not in ("meta", "autodec"):
        raise ConfigError("run.method", "must be 'meta' or 'autodec'")
    return cfg


def out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def report(pairs: dict) -> None:
    for k, v in pairs.items():
        print(f"{k}={v}")


# -- datasets -----------------------------------------------------------------------


def build_dataset(cfg: RunConfig):
    d, domain = cfg.data, cfg.run.domain
    if d.synth:
        if d.synth not in SYNTH_DOMAIN:
            raise UsageError(f"synthetic dataset {d.synth!r} cannot train an INR")
        kw = {"gradients": {"size": d.size},
              "spheres-3d": {"resolution": d.resolution, "points_per_step": d.points_per_step},
              "lambert-scenes": {"size": d.size, "n_views": d.views, "views_per_step": d.views_per_step,
                                 "pixels_per_view": d.pixels_per_view, "samples_per_ray": d.samples_per_ray}}[d.synth]
        return datasets.synth_dataset(d.synth, d.count, cfg.run.seed, **kw)
    if not d.path:
        raise UsageError("no dataset given: pass --dataset PATH or --synth KIND")
    root = Path(d.path)
    if not root.is_dir():
        raise UsageError(f"dataset path {root} is not a directory")
    if domain == "image":
        files = sorted(root.glob("*.ppm"))
        if not files:
            raise UsageError(f"no .ppm files in {root}")
        return ImageSet([ImageField(read_image(f)) for f in files], meta={"kind": "files", "path": str(root)})
    if domain == "voxel":
        files = sorted(root.glob("*.vox"))
        if not files:
            raise UsageError(f"no .vox files in {root}")
        return VoxelSet([VoxelField(read_voxels(f)) for f in files], points_per_step=d.points_per_step,
                        meta={"kind": "files", "path": str(root)})
    raise UsageError("radiance-field training reads synthetic scenes only (--synth lambert-scenes)")


def domain_metadata(dataset, cfg: RunConfig) -> dict:
    meta = {"domain": cfg.run.domain, "run_config": cfg.to_dict()}
    if cfg.run.domain == "image":
        img = dataset.images[0]
        meta["image_shape"] = [img.height, img.width]
    elif cfg.run.domain == "voxel":
        meta["resolution"] = int(dataset.voxels[0].resolution)
    else:
        scene = dataset.scenes[0]
        meta["nerf"] = {"poses": [v.pose.tolist() for v in scene.views], "focal": scene.views[0].focal,
                        "image_shape": list(scene.views[0].image.shape[:2]), "near": scene.near, "far": scene.far,
                        "samples_per_ray": dataset.samples_per_ray}
    return meta


# -- decoding ------------------------------------------------------------------------


def decode_one(ckpt: Checkpoint, phi: np.ndarray):
    """Decode one latent to the domain's native output.

    Images come back as ``[H, W, 3]`` floats, voxels as an occupancy grid and
    radiance fields as a list of rendered ``[H, W, 3]`` views.
    """
    meta = ckpt.metadata
    inr = ckpt.model().collapse(np.asarray(phi, dtype=np.float32))
    with nx.no_grad():
        if meta["domain"] == "image":
            h, w = meta["image_shape"]
            return inr(grid_coords(h, w)).data.reshape(h, w, -1)
        if meta["domain"] == "voxel":
            return voxelize(inr, meta["resolution"]).occupancy
        cam = meta["nerf"]
        h, w = cam["image_shape"]
        views = []
        for pose in cam["poses"]:
            o, d = camera_rays(np.asarray(pose), cam["focal"], h, w)
            rgb = render_rays(inr, RayBatch(o, d, cam["near"], cam["far"]), cam["samples_per_ray"])
            views.append(rgb.data.reshape(h, w, 3))
        return views


def contact_sheet(images: list[np.ndarray], cols: int | None = None) -> np.ndarray:
    n = len(images)
    cols = cols or max(1, math.ceil(math.sqrt(n)))
    rows = math.ceil(n / cols)
    h, w, c = images[0].shape
    sheet = np.zeros((rows * h, cols * w, c), dtype=np.float32)
    for i, img in enumerate(images):
        r, k = divmod(i, cols)
        sheet[r * h:(r + 1) * h, k * w:(k + 1) * w] = img
    return sheet


def write_decoded(out: Path, stem: str, decoded, domain: str) -> list[Path]:
    if domain == "image":
        path = out / f"{stem}.ppm"
        write_image(path, decoded)
        return [path]
    if domain == "voxel":
        path = out / f"{stem}.vox"
        write_voxels(path, decoded)
        return [path]
    paths = []
    for v, img in enumerate(decoded):
        path = out / stem / f"view_{v:02d}.ppm"
        write_image(path, img)
        paths.append(path)
    return paths


def preview(decoded, domain: str) -> np.ndarray | None:
    if domain == "image":
        return decoded
    if domain == "nerf":
        return decoded[0]
    return None


# -- commands ---------------------------------------------------------------------


def cmd_train_stage1(args) -> int:
    cfg = resolve_config(args)
    print("config=" + json.dumps(cfg.to_dict(), sort_keys=True))
    out = out_dir(args)
    dataset = build_dataset(cfg)
    mcfg = cfg.mnif_config()
    seed = cfg.run.seed
    meta = domain_metadata(dataset, cfg)
    history: list[dict] = []

    def on_epoch(model, rec):
        history.append(rec)
        print(log_line(rec), flush=True)

    try:
        if cfg.run.method == "meta":
            model, _ = meta_train(dataset, mcfg, cfg.meta, seed, on_epoch=on_epoch)
            table = harvest_latents(model, dataset, cfg.meta, seed)
        else:
            model, table, _ = auto_decode_train(dataset, mcfg, cfg.autodec, seed, on_epoch=on_epoch)
    except DivergenceError as exc:
        if exc.last_good is not None:
            model = MnifModel.init(mcfg, 0)
            for p, data in zip(model.parameters(), exc.last_good["params"]):
                p.data = data
            ckpt = Checkpoint(mcfg, model.bank, model.head, stage="stage1", seeds={"root": seed},
                              metadata={**meta, "diverged_at_step": exc.step})
            save_checkpoint(out / CHECKPOINT_NAME, ckpt)
        raise
    final = reconstruct(model, dataset, table.latents)
    train_psnr = psnr(final, dataset_targets(dataset))
    meta.update({"method": cfg.run.method, "train_psnr": train_psnr,
                 "final_epoch_psnr": history[-1]["psnr"] if history else None})
    ckpt = Checkpoint(mcfg, model.bank, model.head, stage="stage1", seeds={"root": seed}, metadata=meta, latents=table)
    save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    atomic_write(out / "train_log.jsonl", "".join(json.dumps(r) + "\n" for r in history).encode())
    report({"checkpoint": out / CHECKPOINT_NAME, "instances": len(table), "train_psnr": f"{train_psnr:.4f}"})
    return 0


def _load(args) -> Checkpoint:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def cmd_train_stage2(args) -> int:
    cfg = resolve_config(args)
    print("config=" + json.dumps(cfg.to_dict(), sort_keys=True))
    ckpt = _load(args)
    if ckpt.latents is None:
        raise MissingSectionError("checkpoint has no latent table; run train-stage1 first")
    out = out_dir(args)
    den, stats, history = diffusion.train_denoiser(ckpt.latents, cfg.diffusion, cfg.run.seed)
    for rec in history:
        print(log_line(rec))
    ckpt = dataclasses.replace(ckpt, stage="stage2", denoiser=den, stats=stats, diffusion=cfg.diffusion,
                               seeds={**ckpt.seeds, "stage2": cfg.run.seed})
    save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    atomic_write(out / "train_log.jsonl", "".join(json.dumps(r) + "\n" for r in history).encode())
    report({"checkpoint": out / CHECKPOINT_NAME, "final_loss": f"{history[-1]['loss']:.6g}"})
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    print("config=" + json.dumps(cfg.to_dict(), sort_keys=True))
    ckpt = _load(args)
    out = out_dir(args)
    seed = cfg.run.seed
    draws = []
    if args.sampler == "ddpm":
        if not ckpt.has_denoiser:
            raise MissingSectionError("ddpm sampling needs a stage-2 checkpoint with a denoiser section")
        latents = diffusion.sample(ckpt.denoiser, ckpt.stats, ckpt.diffusion, args.count, seed)
    else:
        if ckpt.latents is None:
            raise MissingSectionError("interpolation sampling needs a latent table")
        rows = []
        for i in range(args.count):
            phi, (a, b, alpha) = diffusion.sample_by_interpolation(
                ckpt.latents, args.k_neighbors, seeding.substream(seed, f"interp-{i}"), return_draw=True)
            rows.append(phi)
            draws.append({"index": i, "i": a, "j": b, "alpha": alpha})
        latents = np.stack(rows) if rows else np.zeros((0, ckpt.config.latent_size), np.float32)
    domain = ckpt.metadata["domain"]
    previews, written = [], []
    for i, phi in enumerate(latents):
        decoded = decode_one(ckpt, phi)
        written += write_decoded(out, f"sample_{i:03d}", decoded, domain)
        if preview(decoded, domain) is not None:
            previews.append(preview(decoded, domain))
    if previews:
        write_image(out / "contact_sheet.ppm", contact_sheet(previews))
    record = {"sampler": args.sampler, "seed": seed, "latents": np.asarray(latents).tolist(), "draws": draws}
    atomic_write(out / "samples.json", json.dumps(record).encode())
    report({"samples": len(latents), "files": len(written)})
    return 0


def _parse_ids(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--ids must be comma-separated integers, got {text!r}") from None


def _latent(ckpt: Checkpoint, instance_id: int) -> np.ndarray:
    if ckpt.latents is None:
        raise MissingSectionError("checkpoint has no latent table")
    try:
        return ckpt.latents.row(instance_id)
    except KeyError:
        raise UnknownIdError(f"unknown instance id {instance_id}") from None


def cmd_reconstruct(args) -> int:
    ckpt = _load(args)
    out = out_dir(args)
    ids = _parse_ids(args.ids)
    if ids is None:
        if ckpt.latents is None:
            raise MissingSectionError("checkpoint has no latent table")
        ids = list(ckpt.latents.ids)
    domain = ckpt.metadata["domain"]
    for i in ids:
        write_decoded(out, f"recon_{i:04d}", decode_one(ckpt, _latent(ckpt, i)), domain)
    report({"reconstructed": len(ids)})
    return 0


def bilinear_grid(corners: list[np.ndarray], g: int) -> list[list[np.ndarray]]:
    """``g x g`` latents; corners are (top-left, top-right, bottom-left, bottom-right)."""
    a, b, c, d = (np.asarray(x, np.float64) for x in corners)
    grid = []
    for r in range(g):
        v = r / (g - 1) if g > 1 else 0.0
        row = []
        for k in range(g):
            u = k / (g - 1) if g > 1 else 0.0
            phi = (1 - u) * (1 - v) * a + u * (1 - v) * b + (1 - u) * v * c + u * v * d
            row.append(phi.astype(np.float32))
        grid.append(row)
    return grid


def cmd_interpolate(args) -> int:
    ckpt = _load(args)
    out = out_dir(args)
    ids = _parse_ids(args.ids)
    if ids is None or len(ids) != 4:
        raise UsageError("--ids needs exactly four comma-separated instance ids")
    if args.grid < 1:
        raise UsageError("--grid must be >= 1")
    corners = [_latent(ckpt, i) for i in ids]
    domain = ckpt.metadata["domain"]
    cells = []
    for r, row in enumerate(bilinear_grid(corners, args.grid)):
        for k, phi in enumerate(row):
            decoded = decode_one(ckpt, phi)
            if domain == "voxel":
                write_voxels(out / f"cell_{r:02d}_{k:02d}.vox", decoded)
            else:
                cells.append(preview(decoded, domain))
    if cells:
        write_image(out / "interpolation.ppm", contact_sheet(cells, cols=args.grid))
    report({"grid": args.grid, "corners": ",".join(map(str, ids))})
    return 0


def _occupied_points(occ: np.ndarray) -> np.ndarray:
    return grid_coords(*occ.shape)[occ.reshape(-1) != 0]


def cmd_eval(args) -> int:
    ckpt = _load(args)
    out = out_dir(args)
    stored = ckpt.metadata.get("run_config", {})
    cfg = resolve_config(args) if (args.config or args.dataset or args.synth) else from_dict(stored)
    domain = ckpt.metadata["domain"]
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in names:
        if m not in DOMAIN_METRICS[domain]:
            raise MetricUnavailableError(f"metric {m!r} is not available for the {domain} domain")
    if ckpt.latents is None:
        raise MissingSectionError("checkpoint has no latent table")
    dataset = build_dataset(cfg)
    if len(dataset) != len(ckpt.latents):
        raise UsageError(f"dataset has {len(dataset)} instances but the latent table has {len(ckpt.latents)}")
    results = {}
    if {"psnr", "mse"} & set(names):
        pred = reconstruct(ckpt.model(), dataset, ckpt.latents.latents)
        target = dataset_targets(dataset)
        if "psnr" in names:
            results["psnr"] = psnr(pred, target)
        if "mse" in names:
            results["mse"] = mse(pred, target)
    if domain == "voxel" and {"iou", "chamfer", "coverage", "mmd"} & set(names):
        recon = [decode_one(ckpt, phi) for phi in ckpt.latents.latents]
        truth = [v.occupancy for v in dataset.voxels]
        if "iou" in names:
            results["iou"] = float(np.mean([iou(a, b) for a, b in zip(recon, truth)]))
        if "chamfer" in names:
            results["chamfer"] = float(np.mean([chamfer(_occupied_points(a), _occupied_points(b))
                                                for a, b in zip(recon, truth)]))
        if {"coverage", "mmd"} & set(names):
            if not ckpt.has_denoiser:
                raise MissingSectionError("coverage/mmd need generated shapes from a stage-2 checkpoint")
            gen = diffusion.sample(ckpt.denoiser, ckpt.stats, ckpt.diffusion, len(truth), cfg.run.seed)
            gen_pts = [_occupied_points(decode_one(ckpt, phi)) for phi in gen]
            gen_pts = [p for p in gen_pts if len(p)]
            if not gen_pts:
                raise RuntimeError("every generated shape is empty")
            cov, mmd_ = coverage_mmd(gen_pts, [_occupied_points(t) for t in truth])
            if "coverage" in names:
                results["coverage"] = cov
            if "mmd" in names:
                results["mmd"] = mmd_
    report(results)
    atomic_write(out / "eval.json", json.dumps(results, sort_keys=True).encode())
    return 0


def _queries(meta: dict) -> int:
    """Coordinate queries for one decoded instance; 4096 when the checkpoint does not say."""
    if "image_shape" in meta:
        h, w = meta["image_shape"]
        return h * w
    if "resolution" in meta:
        return meta["resolution"] ** 3
    if "nerf" in meta:
        cam = meta["nerf"]
        h, w = cam["image_shape"]
        return h * w * cam["samples_per_ray"]
    return 4096


def cmd_inspect(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        mcfg, bank, meta = ckpt.config, ckpt.bank, ckpt.metadata
        info = {"stage": ckpt.stage, "has_latents": ckpt.latents is not None, "has_denoiser": ckpt.has_denoiser}
    else:
        cfg = resolve_config(args)
        mcfg = cfg.mnif_config()
        model = MnifModel.init(mcfg, seeding.substream(cfg.run.seed, "init"))
        bank, meta = model.bank, {"domain": cfg.run.domain}
        info = {"stage": "untrained"}
    queries = args.queries or _queries(meta)
    cost = cost_report(mcfg, queries)
    info.update({"config": json.dumps(dataclasses.asdict(mcfg), sort_keys=True), "queries": queries})
    info.update(cost.as_dict())
    info["gflops"] = f"{cost.gflops:.6f}"
    if mcfg.num_mixtures >= 2:
        mats, warnings = basis_similarity(bank)
        for i, mat in enumerate(mats):
            info[f"basis_offdiag_cos.layer{i}"] = f"{mean_offdiagonal(mat):.6f}"
        info["basis_warnings"] = len(warnings)
    report(info)
    if args.out:
        atomic_write(out_dir(args) / "inspect.json", json.dumps(info, sort_keys=True, default=str).encode())
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnif", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-stage1", help="fit bases and latents")
    p.add_argument("--method", choices=("meta", "autodec"))
    p.add_argument("--domain", choices=("image", "voxel", "nerf"))
    p.add_argument("--synth", help=f"synthetic dataset kind {datasets.KINDS}")
    p.add_argument("--dataset", help="directory of .ppm or .vox files")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="fit the latent diffusion prior")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("sample", help="generate new instances")
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--sampler", choices=("ddpm", "interp"), default="ddpm")
    p.add_argument("--k-neighbors", type=int, default=5)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="decode stored latents")
    p.add_argument("--checkpoint")
    p.add_argument("--ids")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("interpolate", help="bilinear latent grid between four instances")
    p.add_argument("--checkpoint")
    p.add_argument("--ids", required=True)
    p.add_argument("--grid", type=int, default=5)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="metrics of a checkpoint on its dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--synth")
    p.add_argument("--metrics", default="psnr")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="config, cost report and basis similarity")
    p.add_argument("--checkpoint")
    p.add_argument("--domain", choices=("image", "voxel", "nerf"))
    p.add_argument("--queries", type=int)
    p.set_defaults(func=cmd_inspect)

    for action in sub.choices.values():
        _add_config_flags(action)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return 1
    except (StorageError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
