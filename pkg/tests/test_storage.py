import json
import math
import struct

import numpy as np
import pytest

from mnif.datasets import sphere_occupancy
from mnif.diffusion import DenoiserMlp, DiffusionConfig, LatentStats
from mnif.mixture import MnifConfig, MnifModel
from mnif.siren import SirenConfig
from mnif.storage import (
    BadMagicError,
    BadVersionError,
    Checkpoint,
    ChecksumError,
    ParseError,
    StorageError,
    decode_ppm,
    decode_voxels,
    encode_ppm,
    encode_voxels,
    load_checkpoint,
    read_image,
    read_voxels,
    save_checkpoint,
    write_image,
    write_voxels,
)
from mnif.trainers import LatentTable

CFG = MnifConfig(SirenConfig(2, 3, 8, 1), 3, 4)


def _checkpoint(with_prior: bool) -> Checkpoint:
    model = MnifModel.init(CFG, 0)
    ck = Checkpoint(CFG, model.bank, model.head, stage="stage1", seeds={"stage1": 0}, metadata={"domain": "image"})
    if with_prior:
        rng = np.random.default_rng(1)
        ck.latents = LatentTable(rng.standard_normal((5, 4)).astype(np.float32), [3, 1, 4, 5, 9])
        ck.denoiser = DenoiserMlp(4, 8, 1, 4, seed=2)
        for p in ck.denoiser.parameters():
            p.data[:] = rng.standard_normal(p.shape)
        ck.stats = LatentStats(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4))
        ck.diffusion = DiffusionConfig(timesteps=10, denoiser_width=8, denoiser_blocks=1, embed_dim=4)
        ck.stage = "stage2"
    return ck


def _assert_same(a: Checkpoint, b: Checkpoint):
    assert a.config == b.config and a.stage == b.stage and a.seeds == b.seeds and a.metadata == b.metadata
    assert a.diffusion == b.diffusion and a.has_denoiser == b.has_denoiser
    arrs_a, arrs_b = a.arrays(), b.arrays()
    assert arrs_a.keys() == arrs_b.keys()
    for k in arrs_a:
        assert arrs_a[k].dtype == arrs_b[k].dtype
        np.testing.assert_array_equal(arrs_a[k], arrs_b[k])
    if a.latents is not None:
        assert a.latents.ids == b.latents.ids


# -- checkpoints ------------------------------------------------------------------


@pytest.mark.parametrize("with_prior", [False, True])
def test_checkpoint_round_trip_bit_exact(tmp_path, with_prior):
    ck = _checkpoint(with_prior)
    save_checkpoint(tmp_path / "a.mnif", ck)
    back = load_checkpoint(tmp_path / "a.mnif")
    _assert_same(ck, back)
    save_checkpoint(tmp_path / "b.mnif", back)
    assert (tmp_path / "a.mnif").read_bytes() == (tmp_path / "b.mnif").read_bytes()


def test_stage1_checkpoint_flags_missing_denoiser(tmp_path):
    save_checkpoint(tmp_path / "s1.mnif", _checkpoint(False))
    back = load_checkpoint(tmp_path / "s1.mnif")
    assert not back.has_denoiser and back.stats is None and back.latents is None


def test_loaded_denoiser_predicts_identically(tmp_path):
    ck = _checkpoint(True)
    save_checkpoint(tmp_path / "c.mnif", ck)
    back = load_checkpoint(tmp_path / "c.mnif")
    x, t = np.random.default_rng(0).standard_normal((3, 4)), np.array([0, 4, 9])
    np.testing.assert_array_equal(ck.denoiser.predict_noise(x, t), back.denoiser.predict_noise(x, t))


def _layout(blob: bytes):
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen])
    return header, 12 + hlen + 4


def test_truncation_names_section(tmp_path):
    path = tmp_path / "t.mnif"
    save_checkpoint(path, _checkpoint(True))
    blob = path.read_bytes()
    header, base = _layout(blob)
    last = header["sections"][-1]
    path.write_bytes(blob[:-3])
    with pytest.raises(ChecksumError) as exc:
        load_checkpoint(path)
    assert exc.value.section == last["name"] and last["name"] in str(exc.value)


def test_every_truncation_detected(tmp_path):
    path = tmp_path / "t.mnif"
    save_checkpoint(path, _checkpoint(False))
    blob = path.read_bytes()
    for n in range(len(blob)):
        path.write_bytes(blob[:n])
        with pytest.raises(StorageError):
            load_checkpoint(path)


def test_every_byte_flip_detected(tmp_path):
    path = tmp_path / "f.mnif"
    save_checkpoint(path, _checkpoint(True))
    blob = path.read_bytes()
    header, base = _layout(blob)
    owner = {}
    for sec in header["sections"]:
        for i in range(sec["length"]):
            owner[base + sec["offset"] + i] = sec["name"]
    for pos in range(len(blob)):
        bad = bytearray(blob)
        bad[pos] ^= 0x5A
        path.write_bytes(bytes(bad))
        with pytest.raises(StorageError) as exc:
            load_checkpoint(path)
        if pos in owner:
            assert isinstance(exc.value, ChecksumError) and exc.value.section == owner[pos]
        elif pos < 4:
            assert isinstance(exc.value, BadMagicError)
        elif pos < 8:
            assert isinstance(exc.value, BadVersionError)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.mnif"
    save_checkpoint(path, _checkpoint(False))
    blob = path.read_bytes()
    path.write_bytes(b"XNIF" + blob[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(path)
    path.write_bytes(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(BadVersionError):
        load_checkpoint(path)


def test_save_is_atomic_on_failure(tmp_path):
    path = tmp_path / "keep.mnif"
    save_checkpoint(path, _checkpoint(False))
    before = path.read_bytes()
    broken = _checkpoint(False)
    broken.metadata = {"bad": object()}
    with pytest.raises(TypeError):
        save_checkpoint(path, broken)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["keep.mnif"]


# -- images -------------------------------------------------------------------------


def test_white_2x2_ppm_payload():
    blob = encode_ppm(np.ones((2, 2, 3), np.float32))
    assert blob.startswith(b"P6\n2 2\n255\n")
    assert blob[len(b"P6\n2 2\n255\n"):] == b"\xff" * 12


def test_image_round_trip_byte_exact(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_image(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(read_image(tmp_path / "x.ppm", as_float=False), img)
    write_image(tmp_path / "y.ppm", read_image(tmp_path / "x.ppm"))
    assert (tmp_path / "x.ppm").read_bytes() == (tmp_path / "y.ppm").read_bytes()


def test_ppm_with_comment():
    blob = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03"
    np.testing.assert_array_equal(decode_ppm(blob, as_float=False), [[[1, 2, 3]]])


@pytest.mark.parametrize(
    "blob, offset",
    [(b"P5\n1 1\n255\n\x00", 0), (b"P6\nx 1\n255\n\x00\x00\x00", 3), (b"P6\n1 1\n255\n\x00\x00", 11),
     (b"P6\n1 1\n65535\n" + b"\x00" * 6, 7)],
)
def test_ppm_parse_errors_report_offset(blob, offset):
    with pytest.raises(ParseError) as exc:
        decode_ppm(blob)
    assert exc.value.offset == offset and f"byte {offset}" in str(exc.value)


# -- voxels -------------------------------------------------------------------------


def test_voxel_round_trip(tmp_path):
    occ = (np.random.default_rng(0).uniform(size=(4, 5, 6)) > 0.5).astype(np.uint8)
    write_voxels(tmp_path / "v.vox", occ)
    np.testing.assert_array_equal(read_voxels(tmp_path / "v.vox"), occ)
    assert encode_voxels(read_voxels(tmp_path / "v.vox")) == (tmp_path / "v.vox").read_bytes()


def test_sphere_voxel_file_matches_volume():
    R, r = 16, 0.6
    blob = encode_voxels(sphere_occupancy((0, 0, 0), r, R))
    assert len(blob) - 16 == 4096
    count = sum(blob[16:])
    h = 2 / R
    brute = sum(
        1 for i in range(R) for j in range(R) for k in range(R)
        if sum((-1 + h * (a + 0.5)) ** 2 for a in (i, j, k)) <= r * r
    )
    assert count == brute
    expected = 4 / 3 * math.pi * r**3 / h**3
    # cell-centre counting misses at most the cells cut by the surface; it stays within a few percent here
    assert abs(count - expected) <= math.ceil(0.05 * expected)


def test_voxel_parse_errors():
    with pytest.raises(ParseError) as exc:
        decode_voxels(b"VOX2" + bytes(12))
    assert exc.value.offset == 0
    with pytest.raises(ParseError):
        decode_voxels(b"VOX1" + struct.pack("<III", 2, 2, 2) + bytes(7))
    with pytest.raises(ParseError) as exc:
        decode_voxels(b"VOX1" + struct.pack("<III", 1, 1, 2) + b"\x00\x02")
    assert exc.value.offset == 17
