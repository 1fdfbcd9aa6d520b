"""On-disk formats: FGRD feature grids, TPDB template databases, EMBD
embedding checkpoints.

All multi-byte values are little-endian. Features are float32 (scan
precision, half the size); poses and calibration are float64. Writes are
atomic: a temp file in the same directory is renamed over the target.

TPDB layout: magic, version u32, H W C u32, object count u32; per object:
id u32, template count u32; per template: viewpoint direction 3xf64 +
in-plane f64, rotation 9xf64 row-major, render meta 5xf64 (t_z, bb_diag,
focal, bb_center x/y), mask H*W bytes of {0,1}, features H*W*C float32.
A pose-only codebook is the same container with H = W = C = 0.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptDataError,
    MagicError,
    ParameterError,
    TruncationError,
    ValidationError,
    VersionError,
)
from .grids import FeatureGrid
from .trainer import LinearEmbedding
from .viewsphere import Viewpoint

FGRD_MAGIC = b"FGRD"
TPDB_MAGIC = b"TPDB"
EMBD_MAGIC = b"EMBD"
FORMAT_VERSION = 1

_META_FIELDS = 5


class _Reader:
    """Sequential parser over a whole file image with length accounting."""

    def __init__(self, path: str):
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"{self.path}: expected {self.pos + n} bytes to read {what}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8", count=count)

    def f32(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4", count=count)

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic), "magic")
        if got != magic:
            raise MagicError(f"{self.path}: bad magic {got!r}, expected {magic!r}")

    def expect_version(self) -> None:
        version = self.u32("version")
        if version != FORMAT_VERSION:
            raise VersionError(
                f"{self.path}: unsupported version {version}, expected {FORMAT_VERSION}"
            )

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CorruptDataError(
                f"{self.path}: {len(self.buf) - self.pos} trailing bytes after payload"
            )


def _atomic_write(path: str, chunks) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gridpose-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# FGRD


def write_fgrd(path: str, grid: FeatureGrid) -> None:
    """Write one feature grid; float64 grids are stored at float32."""
    payload = np.ascontiguousarray(grid.data, dtype="<f4")
    header = FGRD_MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, grid.height, grid.width, grid.channels
    )
    _atomic_write(path, [header, payload.tobytes()])


def read_fgrd(path: str) -> FeatureGrid:
    r = _Reader(path)
    r.expect_magic(FGRD_MAGIC)
    r.expect_version()
    h = r.u32("height")
    w = r.u32("width")
    c = r.u32("channels")
    if min(h, w, c) < 1:
        raise CorruptDataError(f"{path}: grid dimensions must be positive, got {(h, w, c)}")
    values = r.f32(h * w * c, "feature payload")
    r.done()
    if not np.all(np.isfinite(values)):
        raise CorruptDataError(f"{path}: feature payload contains non-finite values")
    return FeatureGrid(values.reshape(h, w, c).astype(np.float32))


# --------------------------------------------------------------------------
# TPDB

@dataclass(eq=False)
class TpdbData:
    """Parsed TPDB contents, grouped as flat arrays sorted by (object id,
    position). Template indices are positional within each object."""

    height: int
    width: int
    channels: int
    object_ids: np.ndarray      # (T,) int64, one per template
    viewpoints: np.ndarray      # (T, 4) float64
    rotations: np.ndarray       # (T, 3, 3) float64
    metas: np.ndarray           # (T, 5) float64
    masks: np.ndarray           # (T, H*W) uint8
    features: np.ndarray        # (T, H*W, C) float32

    def __len__(self) -> int:
        return len(self.object_ids)

    def template_indices(self) -> np.ndarray:
        """0-based position within each object group."""
        idx = np.empty(len(self), dtype=np.int64)
        start = 0
        for oid in np.unique(self.object_ids):
            n = int((self.object_ids == oid).sum())
            idx[start : start + n] = np.arange(n)
            start += n
        return idx


def _validate_tpdb_data(data: TpdbData) -> None:
    n = len(data)
    cells = data.height * data.width
    if data.object_ids.ndim != 1 or np.any(np.diff(data.object_ids) < 0):
        raise ValidationError("object ids must be sorted ascending")
    if data.viewpoints.shape != (n, 4) or data.rotations.shape != (n, 3, 3):
        raise ValidationError("pose arrays have wrong shapes")
    if data.metas.shape != (n, _META_FIELDS):
        raise ValidationError("render meta array has wrong shape")
    if data.masks.shape != (n, cells):
        raise ValidationError("mask array has wrong shape")
    if data.features.shape != (n, cells, data.channels):
        raise ValidationError("feature array has wrong shape")


def write_tpdb(path: str, data: TpdbData) -> None:
    """Write a template database (H, W, C all positive)."""
    if min(data.height, data.width, data.channels) < 1:
        raise ParameterError("use write_pose_codebook for pose-only files")
    _validate_tpdb_data(data)
    _atomic_write(path, _tpdb_chunks(data))


def _tpdb_chunks(data: TpdbData):
    yield TPDB_MAGIC
    yield struct.pack(
        "<IIII", FORMAT_VERSION, data.height, data.width, data.channels
    )
    unique_ids, counts = np.unique(data.object_ids, return_counts=True)
    yield struct.pack("<I", len(unique_ids))
    position = 0
    for oid, count in zip(unique_ids, counts):
        yield struct.pack("<II", int(oid), int(count))
        for i in range(position, position + int(count)):
            yield data.viewpoints[i].astype("<f8").tobytes()
            yield data.rotations[i].astype("<f8").tobytes()
            yield data.metas[i].astype("<f8").tobytes()
            if data.height:
                yield data.masks[i].astype(np.uint8).tobytes()
                yield np.ascontiguousarray(data.features[i], dtype="<f4").tobytes()
        position += int(count)


def _read_tpdb_container(path: str) -> TpdbData:
    r = _Reader(path)
    r.expect_magic(TPDB_MAGIC)
    r.expect_version()
    h = r.u32("height")
    w = r.u32("width")
    c = r.u32("channels")
    n_objects = r.u32("object count")
    if n_objects < 1:
        raise CorruptDataError(f"{path}: file declares zero objects")
    cells = h * w

    object_ids: list[int] = []
    viewpoints: list[np.ndarray] = []
    rotations: list[np.ndarray] = []
    metas: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    features: list[np.ndarray] = []
    last_id = -1
    for _ in range(n_objects):
        oid = r.u32("object id")
        count = r.u32("template count")
        if oid <= last_id:
            raise CorruptDataError(
                f"{path}: object ids must be strictly ascending, got {oid} after {last_id}"
            )
        last_id = oid
        if count < 1:
            raise CorruptDataError(f"{path}: object {oid} declares zero templates")
        for _ in range(count):
            vp = r.f64(4, "viewpoint")
            rot = r.f64(9, "rotation").reshape(3, 3)
            meta = r.f64(_META_FIELDS, "render meta")
            if not (np.all(np.isfinite(vp)) and np.all(np.isfinite(rot)) and np.all(np.isfinite(meta))):
                raise CorruptDataError(f"{path}: non-finite pose or meta values")
            object_ids.append(oid)
            viewpoints.append(vp)
            rotations.append(rot)
            metas.append(meta)
            if cells:
                mask = np.frombuffer(r.take(cells, "mask"), dtype=np.uint8)
                if not np.all((mask == 0) | (mask == 1)):
                    raise CorruptDataError(f"{path}: mask bytes must be 0 or 1")
                feat = r.f32(cells * c, "features").reshape(cells, c)
                if not np.all(np.isfinite(feat)):
                    raise CorruptDataError(f"{path}: non-finite feature values")
                masks.append(mask)
                features.append(feat)
    r.done()

    n = len(object_ids)
    return TpdbData(
        height=h,
        width=w,
        channels=c,
        object_ids=np.array(object_ids, dtype=np.int64),
        viewpoints=np.stack(viewpoints),
        rotations=np.stack(rotations),
        metas=np.stack(metas),
        masks=np.stack(masks) if cells else np.zeros((n, 0), dtype=np.uint8),
        features=(
            np.stack(features).astype(np.float32)
            if cells
            else np.zeros((n, 0, c), dtype=np.float32)
        ),
    )


def read_tpdb(path: str) -> TpdbData:
    """Read a template database; rejects pose-only codebooks."""
    data = _read_tpdb_container(path)
    if min(data.height, data.width, data.channels) < 1:
        raise CorruptDataError(
            f"{path}: pose-only codebook (zero grid dimensions); use read_pose_codebook"
        )
    return data


def write_pose_codebook(path: str, viewpoints, rotations) -> None:
    """Write viewpoints and rotations only, as a TPDB container with zero
    grid dimensions (the per-template pose section without mask/features)."""
    viewpoints = list(viewpoints)
    n = len(viewpoints)
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.shape != (n, 3, 3):
        raise ParameterError(f"need {n} rotations of shape (3, 3), got {rotations.shape}")
    if n == 0:
        raise ParameterError("pose codebook cannot be empty")
    vp_rows = np.array(
        [[*vp.direction, vp.inplane_deg] for vp in viewpoints], dtype=np.float64
    )
    data = TpdbData(
        height=0,
        width=0,
        channels=0,
        object_ids=np.zeros(n, dtype=np.int64),
        viewpoints=vp_rows,
        rotations=rotations,
        metas=np.zeros((n, _META_FIELDS)),
        masks=np.zeros((n, 0), dtype=np.uint8),
        features=np.zeros((n, 0, 0), dtype=np.float32),
    )
    _atomic_write(path, _tpdb_chunks(data))


def read_pose_codebook(path: str) -> tuple[list[Viewpoint], np.ndarray]:
    """Read a pose-only codebook back as (viewpoints, rotations)."""
    data = _read_tpdb_container(path)
    if (data.height, data.width, data.channels) != (0, 0, 0):
        raise CorruptDataError(
            f"{path}: full template database; use read_tpdb"
        )
    views = [Viewpoint(row[:3], float(row[3])) for row in data.viewpoints]
    return views, data.rotations


# --------------------------------------------------------------------------
# EMBD


def write_embd(path: str, e: LinearEmbedding) -> None:
    header = EMBD_MAGIC + struct.pack("<III", FORMAT_VERSION, e.c_in, e.c_out)
    _atomic_write(
        path,
        [header, e.weight.astype("<f8").tobytes(), e.bias.astype("<f8").tobytes()],
    )


def read_embd(path: str) -> LinearEmbedding:
    r = _Reader(path)
    r.expect_magic(EMBD_MAGIC)
    r.expect_version()
    c_in = r.u32("input channels")
    c_out = r.u32("output channels")
    if c_in < 1 or c_out < 1:
        raise CorruptDataError(f"{path}: channel counts must be positive")
    weight = r.f64(c_out * c_in, "weight matrix").reshape(c_out, c_in)
    bias = r.f64(c_out, "bias vector")
    r.done()
    if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
        raise CorruptDataError(f"{path}: non-finite embedding parameters")
    return LinearEmbedding(weight.copy(), bias.copy())
