"""Deterministic synthetic datasets standing in for the real benchmarks.

``gradients``
    RGB images whose channels are affine in the (row, col) coordinates:
    ``c + a * row + b * col`` with ``c ~ U(0.3, 0.7)`` and ``|a| + |b| <= 0.3``.
``spheres-3d``
    Occupancy grids of one sphere, center ``~ U(-0.3, 0.3)^3`` and radius
    ``~ U(0.3, 0.6)``; a cell is occupied when its center lies inside.
``lambert-scenes``
    One diffuse sphere lit by a directional light and viewed from a ring of
    cameras; pixels are shaded analytically at the first ray-sphere hit.
``gaussians-2d``
    Two-dimensional points from an 8-mode Gaussian mixture on a ring; used as
    a stand-in latent table for the diffusion prior.
"""

from __future__ import annotations

import numpy as np

from .fields import (
    ImageField,
    ImageSet,
    RadianceScene,
    SceneSet,
    View,
    VoxelField,
    VoxelSet,
    camera_rays,
    grid_coords,
    look_at_pose,
)
from .trainers import LatentTable

KINDS = ("gradients", "gaussians-2d", "spheres-3d", "lambert-scenes")


def gradient_images(count: int, seed: int, size: int = 16) -> ImageSet:
    rng = np.random.default_rng(seed)
    coords = grid_coords(size, size)
    images, coefs = [], []
    for _ in range(count):
        c = rng.uniform(0.3, 0.7, size=3)
        total = rng.uniform(0.0, 0.3, size=3)
        split = rng.uniform(0.0, 1.0, size=3)
        sign = rng.choice([-1.0, 1.0], size=(2, 3))
        a = sign[0] * total * split
        b = sign[1] * total * (1.0 - split)
        pix = c + coords[:, :1] * a + coords[:, 1:] * b
        images.append(ImageField(pix.reshape(size, size, 3).astype(np.float32)))
        coefs.append(np.stack([c, a, b]))
    return ImageSet(images, meta={"kind": "gradients", "coefficients": np.stack(coefs)})


def sphere_occupancy(center, radius: float, resolution: int) -> np.ndarray:
    pts = grid_coords(resolution, resolution, resolution)
    inside = np.linalg.norm(pts - np.asarray(center, dtype=np.float32), axis=-1) <= radius
    return inside.reshape(resolution, resolution, resolution).astype(np.uint8)


def sphere_voxels(count: int, seed: int, resolution: int = 16, points_per_step: int = 4096) -> VoxelSet:
    rng = np.random.default_rng(seed)
    voxels, spheres = [], []
    for _ in range(count):
        center = rng.uniform(-0.3, 0.3, size=3)
        radius = rng.uniform(0.3, 0.6)
        voxels.append(VoxelField(sphere_occupancy(center, radius, resolution)))
        spheres.append(np.append(center, radius))
    n = min(points_per_step, resolution**3)
    return VoxelSet(voxels, points_per_step=n, meta={"kind": "spheres-3d", "spheres": np.stack(spheres)})


def ray_sphere_hit(origins, dirs, center, radius):
    """Distance to the first hit per ray, ``inf`` on a miss."""
    oc = origins - center
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius**2
    disc = b * b - c
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def shade_lambert(points, center, albedo, light_dir, ambient: float):
    normals = (points - center) / np.linalg.norm(points - center, axis=-1, keepdims=True)
    diffuse = np.clip(normals @ light_dir, 0.0, None)[:, None]
    return albedo * (ambient + (1.0 - ambient) * diffuse)


def lambert_scenes(count: int, seed: int, size: int = 16, n_views: int = 8, radius: float = 2.5,
                   elevation_deg: float = 30.0, fov_deg: float = 45.0, ambient: float = 0.1,
                   views_per_step: int = 4, pixels_per_view: int = 64, samples_per_ray: int = 32) -> SceneSet:
    rng = np.random.default_rng(seed)
    focal = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2)
    elev = np.deg2rad(elevation_deg)
    scenes, params = [], []
    for _ in range(count):
        center = rng.uniform(-0.2, 0.2, size=3)
        rad = rng.uniform(0.4, 0.7)
        albedo = rng.uniform(0.3, 1.0, size=3)
        light = rng.normal(size=3)
        light[2] = abs(light[2]) + 0.5
        light /= np.linalg.norm(light)
        views = []
        for v in range(n_views):
            az = 2 * np.pi * v / n_views
            eye = radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
            pose = look_at_pose(eye)
            o, d = camera_rays(pose, focal, size, size)
            o, d = o.astype(np.float64), d.astype(np.float64)
            t = ray_sphere_hit(o, d, center, rad)
            hit = np.isfinite(t)
            img = np.zeros((size * size, 3))
            pts = o[hit] + t[hit, None] * d[hit]
            img[hit] = shade_lambert(pts, center, albedo, light, ambient)
            views.append(View(pose.astype(np.float32), float(focal), img.reshape(size, size, 3).astype(np.float32)))
        scenes.append(RadianceScene(views, near=radius - 1.5, far=radius + 1.5))
        params.append({"center": center, "radius": rad, "albedo": albedo, "light": light})
    return SceneSet(scenes, views_per_step=min(views_per_step, n_views), pixels_per_view=min(pixels_per_view, size * size),
                    samples_per_ray=samples_per_ray, meta={"kind": "lambert-scenes", "scenes": params})


def ring_gaussian_mixture(count: int, seed: int, modes: int = 8, radius: float = 4.0, std: float = 0.3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    k = rng.integers(modes, size=count)
    angles = 2 * np.pi * k / modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return (means + std * rng.standard_normal((count, 2))).astype(np.float32)


def synth_dataset(kind: str, count: int, seed: int, **kwargs):
    """Build one of the synthetic datasets listed in the module docstring."""
    if kind == "gradients":
        return gradient_images(count, seed, **kwargs)
    if kind == "spheres-3d":
        return sphere_voxels(count, seed, **kwargs)
    if kind == "lambert-scenes":
        return lambert_scenes(count, seed, **kwargs)
    if kind == "gaussians-2d":
        return LatentTable(ring_gaussian_mixture(count, seed, **kwargs))
    raise ValueError(f"unknown synthetic dataset kind {kind!r}; expected one of {KINDS}")
