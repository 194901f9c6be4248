import numpy as np
import pytest

from mnif.datasets import KINDS, ring_gaussian_mixture, synth_dataset
from mnif.fields import grid_coords, image_to_pairs
from mnif.trainers import LatentTable


@pytest.mark.parametrize("kind", KINDS)
def test_seed_stable(kind):
    kw = {"size": 8, "n_views": 2} if kind == "lambert-scenes" else {}
    a, b = synth_dataset(kind, 3, 5, **kw), synth_dataset(kind, 3, 5, **kw)
    if isinstance(a, LatentTable):
        np.testing.assert_array_equal(a.latents, b.latents)
        return
    ia, ib = np.arange(len(a)), np.arange(len(b))
    for x, y in zip(a.full_batch(ia), b.full_batch(ib)):
        if x is not None:
            np.testing.assert_array_equal(np.asarray(x), np.asarray(y))


def test_gradients_are_affine_in_coordinates():
    ds = synth_dataset("gradients", 4, 0)
    coords = grid_coords(16, 16)
    for img, (c, a, b) in zip(ds.images, ds.meta["coefficients"]):
        _, pix = image_to_pairs(img)
        np.testing.assert_allclose(pix, c + coords[:, :1] * a + coords[:, 1:] * b, atol=1e-6)
        assert pix.min() >= 0 and pix.max() <= 1


def test_spheres_agree_with_inside_test():
    ds = synth_dataset("spheres-3d", 3, 1, resolution=8)
    pts = grid_coords(8, 8, 8)
    for vox, s in zip(ds.voxels, ds.meta["spheres"]):
        inside = np.linalg.norm(pts.astype(np.float64) - s[:3], axis=1) <= s[3]
        np.testing.assert_array_equal(vox.occupancy.reshape(-1), inside.astype(np.uint8))


def test_ring_mixture_modes():
    x = ring_gaussian_mixture(4000, 0)
    angles = np.mod(np.round(np.arctan2(x[:, 1], x[:, 0]) / (2 * np.pi / 8)), 8)
    counts = np.bincount(angles.astype(int), minlength=8)
    assert (counts > 350).all()
    assert abs(np.linalg.norm(x, axis=1).mean() - 4.0) < 0.05


def test_unknown_kind():
    with pytest.raises(ValueError):
        synth_dataset("faces", 1, 0)
