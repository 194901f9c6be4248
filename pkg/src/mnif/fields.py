"""Conversions between domain objects and (coordinate, target) pairs.

Coordinates use a center-of-cell convention on [-1, 1] per axis: index ``i``
of ``n`` cells maps to ``-1 + (2 i + 1) / n``. Image coordinates are ordered
(row, column); voxel coordinates follow array axis order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .mixture import CollapsedInr
from .numerics import ContractError, DimensionError, Tensor

DIRECTION_TOL = 1e-5


def cell_centers(n: int) -> np.ndarray:
    return (-1.0 + (2.0 * np.arange(n) + 1.0) / n).astype(np.float32)


def grid_coords(*sizes: int) -> np.ndarray:
    """Row-major grid of cell centers, shape ``[prod(sizes), len(sizes)]``."""
    axes = np.meshgrid(*[cell_centers(n) for n in sizes], indexing="ij")
    return np.stack([a.reshape(-1) for a in axes], axis=-1)


# -- images -------------------------------------------------------------------


@dataclass
class ImageField:
    pixels: np.ndarray  # [H, W, C] in [0, 1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def image_to_pairs(img: ImageField) -> tuple[np.ndarray, np.ndarray]:
    coords = grid_coords(img.height, img.width)
    targets = img.pixels.reshape(-1, img.channels)
    return coords, targets


def pairs_to_image(targets, height: int, width: int) -> ImageField:
    data = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if data.shape[0] != height * width:
        raise DimensionError(f"{data.shape[0]} targets cannot fill a {height}x{width} image")
    return ImageField(data.reshape(height, width, -1))


# -- voxels ---------------------------------------------------------------------


@dataclass
class VoxelField:
    occupancy: np.ndarray  # [R, R, R] of {0, 1}
    points: np.ndarray | None = None  # optional [N, 3] point set
    point_values: np.ndarray | None = None  # [N] occupancy at ``points``

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    def all_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.points is not None:
            return self.points.astype(np.float32), self.point_values.reshape(-1, 1).astype(np.float32)
        R = self.occupancy.shape
        return grid_coords(*R), self.occupancy.reshape(-1, 1).astype(np.float32)


def voxel_sample(v: VoxelField, n_points: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Uniform subsample without replacement of the point set (or grid cells)."""
    coords, targets = v.all_pairs()
    if n_points > len(coords):
        raise ContractError(f"requested {n_points} points but only {len(coords)} are available")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(coords), size=n_points, replace=False)
    return coords[idx], targets[idx]


def voxelize(inr: CollapsedInr, resolution: int, threshold: float = 0.5) -> VoxelField:
    if inr.config.out_dim != 1:
        raise DimensionError("voxelize needs a single-channel INR")
    coords = grid_coords(resolution, resolution, resolution)
    with nx.no_grad():
        out = inr(coords).data.reshape(resolution, resolution, resolution)
    return VoxelField((out >= threshold).astype(np.uint8))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


# -- radiance fields ------------------------------------------------------------


@dataclass
class View:
    pose: np.ndarray  # [3, 4] camera-to-world; camera looks down -z, +y up
    focal: float
    image: np.ndarray  # [H, W, 3]


@dataclass
class RadianceScene:
    views: list[View]
    near: float
    far: float

    def __post_init__(self):
        shapes = {v.image.shape for v in self.views}
        if len(shapes) > 1:
            raise DimensionError(f"views have mixed resolutions {shapes}")
        if not self.far > self.near:
            raise ContractError("far must exceed near")


@dataclass
class RayBatch:
    origins: np.ndarray  # [n, 3]
    directions: np.ndarray  # [n, 3]
    near: float
    far: float

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.any(np.abs(norms - 1.0) > DIRECTION_TOL):
            raise ContractError("ray directions must have unit norm")
        if not self.far > self.near:
            raise ContractError("far must exceed near")

    def __len__(self) -> int:
        return len(self.origins)


def camera_rays(pose: np.ndarray, focal: float, height: int, width: int, pixels=None) -> tuple[np.ndarray, np.ndarray]:
    """Rays through pixel centers; ``pixels`` is an optional flat index array."""
    if pixels is None:
        pixels = np.arange(height * width)
    rows, cols = np.divmod(np.asarray(pixels), width)
    x = (cols + 0.5 - width / 2.0) / focal
    y = -(rows + 0.5 - height / 2.0) / focal
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d = d_cam @ pose[:, :3].T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose[:, 3], d.shape)
    return o.astype(np.float32), d.astype(np.float32)


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    back = eye - target
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return np.concatenate([np.stack([right, true_up, back], axis=1), eye[:, None]], axis=1)


def scene_to_pairs(scene: RadianceScene, views: int, pixels_per_view: int, seed) -> tuple[RayBatch, np.ndarray]:
    """Random subset of views and pixels turned into rays and target colors."""
    h, w = scene.views[0].image.shape[:2]
    if views > len(scene.views) or pixels_per_view > h * w:
        raise ContractError(
            f"requested {views} views x {pixels_per_view} pixels from {len(scene.views)} views of {h * w} pixels"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(scene.views), size=views, replace=False))
    origins, dirs, colors = [], [], []
    for vi in chosen:
        view = scene.views[vi]
        pix = np.sort(rng.choice(h * w, size=pixels_per_view, replace=False))
        o, d = camera_rays(view.pose, view.focal, h, w, pix)
        origins.append(o)
        dirs.append(d)
        colors.append(view.image.reshape(-1, 3)[pix])
    rays = RayBatch(np.concatenate(origins), np.concatenate(dirs), scene.near, scene.far)
    return rays, np.concatenate(colors).astype(np.float32)


def sample_depths(n_rays: int, samples: int, near: float, far: float, rng=None) -> np.ndarray:
    """Stratified depths ``[n_rays, samples]``; bin midpoints when ``rng`` is None."""
    edges = np.linspace(near, far, samples + 1)
    lo, hi = edges[:-1], edges[1:]
    u = 0.5 if rng is None else rng.uniform(size=(n_rays, samples))
    return (lo + u * (hi - lo)) * np.ones((n_rays, 1))


def depth_deltas(t: np.ndarray, far: float) -> np.ndarray:
    """Spacing between consecutive samples; the last sample extends to ``far``."""
    return np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)


def composite(rgb: Tensor, sigma: Tensor, deltas) -> tuple[Tensor, Tensor]:
    """Alpha-composite samples along the last-but-one axis over black.

    ``rgb`` is ``[..., S, 3]``, ``sigma`` ``[..., S]`` and ``deltas`` ``[..., S]``.
    Returns (pixel colors ``[..., 3]``, weights ``[..., S]``).
    """
    deltas = nx.as_tensor(deltas, dtype=sigma.dtype)
    tau = sigma * deltas
    alpha = 1.0 - nx.exp(nx.neg(tau))
    # transmittance before sample i: exp(-sum_{j<i} tau_j)
    trans = nx.exp(nx.neg(nx.cumsum(tau, axis=-1) - tau))
    weights = alpha * trans
    lead = weights.shape
    color = nx.sum_(nx.reshape(weights, lead + (1,)) * rgb, axis=-2)
    return color, weights


def render_rays(inr: CollapsedInr, rays: RayBatch, samples_per_ray: int = 32, rng=None) -> Tensor:
    """Vanilla volume rendering of a 4-channel (RGB, density) INR."""
    if inr.config.out_dim != 4:
        raise DimensionError("render_rays needs an INR with 4 output channels")
    n = len(rays)
    t = sample_depths(n, samples_per_ray, rays.near, rays.far, rng)
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    raw = inr(pts.reshape(-1, 3).astype(np.float32))
    raw = nx.reshape(raw, (n, samples_per_ray, 4))
    color, _ = composite(raw[..., :3], raw[..., 3], depth_deltas(t, rays.far).astype(np.float32))
    return color


# -- training-set adapters ------------------------------------------------------
#
# Each adapter turns a list of instances into batched (coords, targets) arrays
# and maps raw network outputs to predictions comparable with the targets.


@dataclass
class ImageSet:
    images: list[ImageField]
    meta: dict = field(default_factory=dict)
    kind: str = field(default="image", init=False)

    def __post_init__(self):
        self._coords = grid_coords(self.images[0].height, self.images[0].width)
        self._targets = np.stack([image_to_pairs(im)[1] for im in self.images]).astype(np.float32)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def in_dim(self) -> int:
        return 2

    @property
    def out_dim(self) -> int:
        return self.images[0].channels

    def batch(self, indices, rng=None):
        idx = np.asarray(indices)
        coords = np.broadcast_to(self._coords, (len(idx),) + self._coords.shape)
        return coords, self._targets[idx], None

    full_batch = batch

    def decode(self, raw: Tensor, aux) -> Tensor:
        return raw


@dataclass
class VoxelSet:
    voxels: list[VoxelField]
    points_per_step: int = 4096
    meta: dict = field(default_factory=dict)
    kind: str = field(default="voxel", init=False)

    def __len__(self) -> int:
        return len(self.voxels)

    @property
    def in_dim(self) -> int:
        return 3

    @property
    def out_dim(self) -> int:
        return 1

    def batch(self, indices, rng):
        pairs = [voxel_sample(self.voxels[i], self.points_per_step, rng) for i in indices]
        return np.stack([c for c, _ in pairs]), np.stack([t for _, t in pairs]), None

    def full_batch(self, indices, rng=None):
        pairs = [self.voxels[i].all_pairs() for i in indices]
        return np.stack([c for c, _ in pairs]), np.stack([t for _, t in pairs]), None

    def decode(self, raw: Tensor, aux) -> Tensor:
        return raw


@dataclass
class SceneSet:
    scenes: list[RadianceScene]
    views_per_step: int = 4
    pixels_per_view: int = 64
    samples_per_ray: int = 32
    meta: dict = field(default_factory=dict)
    kind: str = field(default="nerf", init=False)

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def in_dim(self) -> int:
        return 3

    @property
    def out_dim(self) -> int:
        return 4

    def _points(self, rays_list, rng):
        S = self.samples_per_ray
        pts, deltas = [], []
        for rays in rays_list:
            t = sample_depths(len(rays), S, rays.near, rays.far, rng)
            p = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
            pts.append(p.reshape(-1, 3))
            deltas.append(depth_deltas(t, rays.far))
        return np.stack(pts).astype(np.float32), np.stack(deltas).astype(np.float32)

    def batch(self, indices, rng):
        rays_list, colors = [], []
        for i in indices:
            seed = int(rng.integers(2**32))
            rays, c = scene_to_pairs(self.scenes[i], self.views_per_step, self.pixels_per_view, seed)
            rays_list.append(rays)
            colors.append(c)
        coords, deltas = self._points(rays_list, rng)
        return coords, np.stack(colors), deltas

    def full_batch(self, indices, rng=None):
        rays_list, colors = [], []
        for i in indices:
            scene = self.scenes[i]
            h, w = scene.views[0].image.shape[:2]
            os_, ds, cs = [], [], []
            for view in scene.views:
                o, d = camera_rays(view.pose, view.focal, h, w)
                os_.append(o)
                ds.append(d)
                cs.append(view.image.reshape(-1, 3))
            rays_list.append(RayBatch(np.concatenate(os_), np.concatenate(ds), scene.near, scene.far))
            colors.append(np.concatenate(cs))
        coords, deltas = self._points(rays_list, None)
        return coords, np.stack(colors).astype(np.float32), deltas

    def decode(self, raw: Tensor, aux) -> Tensor:
        B, n_rays, S = aux.shape
        raw = nx.reshape(raw, (B, n_rays, S, 4))
        color, _ = composite(raw[..., :3], raw[..., 3], aux)
        return color
