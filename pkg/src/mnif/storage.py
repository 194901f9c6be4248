"""Binary persistence: checkpoints, PPM images and raw voxel grids.

Checkpoint layout (all integers little-endian)::

    b"MNIF" | u32 version | u32 header_len | header (UTF-8 JSON) | u32 crc32(header)
    section payloads, back to back

The JSON header carries the configs, stage tag, seeds and metadata, plus a
section table: one entry per array with name, dtype, shape, byte offset
(from the start of the payload area), byte length and crc32. Arrays are
stored as raw little-endian bytes so a round trip is bit-exact.

Voxel grids are ``b"VOX1" | u32 R0 | u32 R1 | u32 R2 | R0*R1*R2 bytes of {0,1}``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DenoiserMlp, DiffusionConfig, LatentStats
from .mixture import BasisBank, CoefficientHead, MnifConfig, MnifModel
from .siren import SirenConfig
from .trainers import LatentTable
from . import numerics as nx

MAGIC = b"MNIF"
FORMAT_VERSION = 1
VOXEL_MAGIC = b"VOX1"


class StorageError(Exception):
    """Base class for persistence failures."""


class BadMagicError(StorageError):
    pass


class BadVersionError(StorageError):
    pass


class ChecksumError(StorageError):
    def __init__(self, section: str, detail: str = ""):
        super().__init__(f"checksum mismatch in section {section!r}" + (f": {detail}" if detail else ""))
        self.section = section


class ParseError(StorageError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: MnifConfig
    bank: BasisBank
    head: CoefficientHead
    stage: str = "stage1"
    seeds: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    latents: LatentTable | None = None
    denoiser: DenoiserMlp | None = None
    stats: LatentStats | None = None
    diffusion: DiffusionConfig | None = None

    @property
    def has_denoiser(self) -> bool:
        return self.denoiser is not None

    def model(self) -> MnifModel:
        return MnifModel(self.config, self.bank, self.head)

    def arrays(self) -> dict[str, np.ndarray]:
        """Every persisted array by section name."""
        out = {}
        for i, (w, b) in enumerate(zip(self.bank.weights, self.bank.biases)):
            out[f"bank.w{i}"] = w.data
            out[f"bank.b{i}"] = b.data
        if self.head.projection is not None:
            out["head.projection"] = self.head.projection.data
        out["head.bias"] = self.head.bias.data
        if self.latents is not None:
            out["latents.values"] = np.asarray(self.latents.latents)
            out["latents.ids"] = np.asarray(self.latents.ids, dtype=np.int64)
        if self.denoiser is not None:
            for name, p in self.denoiser.named_parameters():
                out[f"denoiser.{name}"] = p.data
        if self.stats is not None:
            out["stats.mean"] = np.asarray(self.stats.mean)
            out["stats.std"] = np.asarray(self.stats.std)
        return out


def _config_dict(cfg) -> dict | None:
    return None if cfg is None else asdict(cfg)


def mnif_config_from_dict(d: dict) -> MnifConfig:
    d = dict(d)
    return MnifConfig(siren=SirenConfig(**d.pop("siren")), **d)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = ckpt.arrays()
    table, payload, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "length": len(raw), "crc32": zlib.crc32(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "stage": ckpt.stage,
        "seeds": ckpt.seeds,
        "metadata": ckpt.metadata,
        "mnif": _config_dict(ckpt.config),
        "diffusion": _config_dict(ckpt.diffusion),
        "denoiser": None if ckpt.denoiser is None else {
            "latent_dim": ckpt.denoiser.latent_dim, "width": ckpt.denoiser.width,
            "blocks": len(ckpt.denoiser.blocks), "embed_dim": ckpt.denoiser.embed_dim},
        "sections": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes,
                     struct.pack("<I", zlib.crc32(hbytes))] + payload)
    atomic_write(path, blob)


def _read_header(blob: bytes) -> tuple[dict, int]:
    if blob[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 12:
        raise ChecksumError("header", "file too short")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    end = 12 + hlen
    if len(blob) < end + 4:
        raise ChecksumError("header", "file truncated inside header")
    hbytes = blob[12:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(hbytes) != crc:
        raise ChecksumError("header")
    return json.loads(hbytes.decode("utf-8")), end + 4


def load_checkpoint(path) -> Checkpoint:
    """Load and verify a checkpoint; raises BadMagicError, BadVersionError or ChecksumError."""
    blob = Path(path).read_bytes()
    header, base = _read_header(blob)
    arrays = {}
    for sec in header["sections"]:
        lo = base + sec["offset"]
        raw = blob[lo:lo + sec["length"]]
        if len(raw) != sec["length"]:
            raise ChecksumError(sec["name"], "section truncated")
        if zlib.crc32(raw) != sec["crc32"]:
            raise ChecksumError(sec["name"])
        arrays[sec["name"]] = np.frombuffer(raw, dtype=np.dtype(sec["dtype"])).reshape(sec["shape"]).copy()

    cfg = mnif_config_from_dict(header["mnif"])
    n_layers = cfg.num_layers
    bank = BasisBank([nx.parameter(arrays[f"bank.w{i}"]) for i in range(n_layers)],
                     [nx.parameter(arrays[f"bank.b{i}"]) for i in range(n_layers)])
    proj = arrays.get("head.projection")
    head = CoefficientHead(None if proj is None else nx.parameter(proj), nx.parameter(arrays["head.bias"]))
    latents = None
    if "latents.values" in arrays:
        latents = LatentTable(arrays["latents.values"], [int(i) for i in arrays["latents.ids"]])
    denoiser = None
    if header.get("denoiser"):
        d = header["denoiser"]
        denoiser = DenoiserMlp(d["latent_dim"], d["width"], d["blocks"], d["embed_dim"], seed=0)
        for name, p in denoiser.named_parameters():
            p.data = arrays[f"denoiser.{name}"]
    stats = None
    if "stats.mean" in arrays:
        stats = LatentStats(arrays["stats.mean"], arrays["stats.std"])
    diffusion = DiffusionConfig(**header["diffusion"]) if header.get("diffusion") else None
    return Checkpoint(cfg, bank, head, stage=header["stage"], seeds=header["seeds"], metadata=header["metadata"],
                      latents=latents, denoiser=denoiser, stats=stats, diffusion=diffusion)


# -- PPM images ---------------------------------------------------------------------


def to_bytes(pixels) -> np.ndarray:
    """Map floats in [0, 1] to bytes (round to nearest); uint8 passes through."""
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        return arr
    return np.rint(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(pixels) -> bytes:
    img = to_bytes(pixels)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an [H, W, 3] image, got shape {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_image(path, pixels) -> None:
    atomic_write(path, encode_ppm(pixels))


def _ppm_token(blob: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next whitespace-delimited header token as ``(token, start, end)``."""
    while pos < len(blob):
        c = blob[pos:pos + 1]
        if c == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PPM header", start)
    return blob[start:pos], start, pos


def decode_ppm(blob: bytes, as_float: bool = True) -> np.ndarray:
    magic, _, pos = _ppm_token(blob, 0)
    if magic != b"P6":
        raise ParseError(f"expected PPM magic b'P6', found {magic!r}", 0)
    dims = []
    for what in ("width", "height", "maxval"):
        tok, start, pos = _ppm_token(blob, pos)
        if not tok.isdigit():
            raise ParseError(f"PPM {what} is not a decimal integer: {tok!r}", start)
        dims.append(int(tok))
    w, h, maxval = dims
    if maxval != 255:
        raise ParseError(f"only 8-bit PPM (maxval 255) is supported, got {maxval}", start)
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PPM maxval", pos)
    pos += 1
    need = w * h * 3
    if len(blob) - pos != need:
        raise ParseError(f"PPM payload has {len(blob) - pos} bytes, expected {need}", pos)
    img = np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w, 3).copy()
    return img.astype(np.float32) / 255.0 if as_float else img


def read_image(path, as_float: bool = True) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), as_float=as_float)


# -- voxel grids --------------------------------------------------------------------


def encode_voxels(occupancy) -> bytes:
    occ = np.asarray(occupancy)
    if occ.ndim != 3:
        raise ValueError(f"expected a 3-D grid, got shape {occ.shape}")
    return VOXEL_MAGIC + struct.pack("<III", *occ.shape) + (occ != 0).astype(np.uint8).tobytes()


def write_voxels(path, occupancy) -> None:
    atomic_write(path, encode_voxels(occupancy))


def decode_voxels(blob: bytes) -> np.ndarray:
    if blob[:4] != VOXEL_MAGIC:
        raise ParseError(f"expected voxel magic {VOXEL_MAGIC!r}, found {blob[:4]!r}", 0)
    if len(blob) < 16:
        raise ParseError("voxel header truncated", len(blob))
    dims = struct.unpack_from("<III", blob, 4)
    need = dims[0] * dims[1] * dims[2]
    if len(blob) - 16 != need:
        raise ParseError(f"voxel payload has {len(blob) - 16} bytes, expected {need}", 16)
    occ = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(dims).copy()
    bad = np.flatnonzero(occ > 1)
    if len(bad):
        raise ParseError("voxel payload byte is not 0 or 1", 16 + int(bad[0]))
    return occ


def read_voxels(path) -> np.ndarray:
    return decode_voxels(Path(path).read_bytes())
