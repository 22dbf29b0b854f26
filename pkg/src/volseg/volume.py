"""Volume container, bounding-box geometry, chunk planning and file I/O.

Arrays are always indexed ``(z, y, x)`` with x fastest in memory.  Volumes
are stored as a ``name.json`` header next to a ``name.raw`` little-endian
payload.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, InvalidArgumentError, RangeError

AXES = ("z", "y", "x")

DTYPES = {
    "u8": np.dtype("<u1"),
    "u32": np.dtype("<u4"),
    "f32": np.dtype("<f4"),
}
_TAGS = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


def dtype_tag(dtype) -> str:
    try:
        return _TAGS[np.dtype(dtype).newbyteorder("=")]
    except KeyError:
        raise InvalidArgumentError(f"unsupported dtype {np.dtype(dtype)}; expected one of u8, u32, f32") from None


def _triple(value, name, cast=int) -> tuple:
    if np.isscalar(value):
        value = (value,) * 3
    value = tuple(cast(v) for v in value)
    if len(value) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components (z, y, x), got {len(value)}")
    return value


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Immutable 3D scalar grid with physical resolution in nm.

    ``data`` is ``(z, y, x)`` or, for multichannel predictions, ``(c, z, y, x)``.
    """

    data: np.ndarray
    resolution: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        dtype_tag(arr.dtype)
        if arr.ndim not in (3, 4):
            raise InvalidArgumentError(f"volume data must be 3D or 4D (channels first), got {arr.ndim}D")
        res = _triple(self.resolution, "resolution", float)
        if any(r <= 0 for r in res):
            raise InvalidArgumentError(f"resolution components must be > 0, got {res}")
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)
        object.__setattr__(self, "resolution", res)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape[-3:])

    @property
    def channels(self) -> int | None:
        return self.data.shape[0] if self.data.ndim == 4 else None

    @property
    def dtype_tag(self) -> str:
        return dtype_tag(self.data.dtype)

    def equals(self, other: "VoxelVolume") -> bool:
        return (
            self.resolution == other.resolution
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass(frozen=True)
class BoundingBox:
    origin: tuple
    extent: tuple

    def __post_init__(self):
        origin = _triple(self.origin, "origin")
        extent = _triple(self.extent, "extent")
        if any(o < 0 for o in origin):
            raise InvalidArgumentError(f"origin components must be >= 0, got {origin}")
        if any(e < 1 for e in extent):
            raise InvalidArgumentError(f"extent components must be >= 1, got {extent}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)

    @property
    def stop(self) -> tuple:
        return tuple(o + e for o, e in zip(self.origin, self.extent))

    @property
    def slices(self) -> tuple:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))

    @property
    def id(self) -> str:
        z, y, x = self.origin
        return f"z{z}-y{y}-x{x}"

    def fits_in(self, shape) -> bool:
        return all(s <= n for s, n in zip(self.stop, shape))

    def intersects(self, other: "BoundingBox") -> bool:
        return all(
            a0 < b1 and b0 < a1
            for a0, a1, b0, b1 in zip(self.origin, self.stop, other.origin, other.stop)
        )

    def to_dict(self) -> dict:
        return {"id": self.id, "origin": list(self.origin), "extent": list(self.extent)}


def check_inside(box: BoundingBox, shape) -> None:
    for axis, stop, n in zip(AXES, box.stop, shape):
        if stop > n:
            raise RangeError(f"box {box.origin}+{box.extent} exceeds volume along axis {axis}: {stop} > {n}")


def axis_origins(length: int, extent: int, stride: int) -> list:
    """Stride-spaced origins along one axis; the last one is clamped flush with the border."""
    if extent > length:
        raise InvalidArgumentError(f"extent {extent} larger than axis length {length}")
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    return list(range(0, length - extent, stride)) + [length - extent]


@dataclass(frozen=True)
class ChunkPlan:
    volume_shape: tuple
    chunk_extent: tuple
    overlap: tuple
    chunks: tuple = field(default=())

    def __iter__(self) -> Iterator[BoundingBox]:
        return iter(self.chunks)

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def ids(self) -> list:
        return [c.id for c in self.chunks]

    def to_dict(self) -> dict:
        return {
            "volume_shape": list(self.volume_shape),
            "chunk_extent": list(self.chunk_extent),
            "overlap": list(self.overlap),
            "chunks": [c.to_dict() for c in self.chunks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkPlan":
        return make_chunk_plan(d["volume_shape"], d["chunk_extent"], d["overlap"])


def make_chunk_plan(volume_shape, chunk_extent, overlap=0) -> ChunkPlan:
    shape = _triple(volume_shape, "volume_shape")
    extent = _triple(chunk_extent, "chunk_extent")
    ov = _triple(overlap, "overlap")
    for axis, n, c, o in zip(AXES, shape, extent, ov):
        if c > n:
            raise InvalidArgumentError(f"chunk extent {c} exceeds volume length {n} along axis {axis}")
        if not 0 <= o < c:
            raise InvalidArgumentError(f"overlap along axis {axis} must satisfy 0 <= {o} < {c}")
    per_axis = [axis_origins(n, c, c - o) for n, c, o in zip(shape, extent, ov)]
    chunks = tuple(
        BoundingBox((z, y, x), extent) for z in per_axis[0] for y in per_axis[1] for x in per_axis[2]
    )
    return ChunkPlan(shape, extent, ov, chunks)


def chunk_count(length: int, extent: int, overlap: int) -> int:
    stride = extent - overlap
    return -(-(length - extent) // stride) + 1


def crop(volume: VoxelVolume, box: BoundingBox) -> VoxelVolume:
    check_inside(box, volume.shape)
    data = volume.data[(Ellipsis,) + box.slices]
    return VoxelVolume(np.ascontiguousarray(data), volume.resolution)


def pad(volume: VoxelVolume, margins, mode: str = "reflect") -> VoxelVolume:
    """Pad each axis by ``(before, after)``.

    ``reflect`` mirrors about the edge voxel without repeating it, so
    ``[1, 2, 3]`` padded by one becomes ``[2, 1, 2, 3, 2]``.
    """
    margins = [tuple(int(v) for v in m) for m in margins]
    if len(margins) != 3 or any(len(m) != 2 for m in margins):
        raise InvalidArgumentError("margins must be three (before, after) pairs")
    if any(v < 0 for m in margins for v in m):
        raise InvalidArgumentError(f"margins must be non-negative, got {margins}")
    if mode == "reflect":
        for axis, n, (before, after) in zip(AXES, volume.shape, margins):
            if max(before, after) > 0 and max(before, after) >= n:
                raise InvalidArgumentError(
                    f"reflect margin {max(before, after)} must be smaller than axis {axis} length {n}"
                )
        np_mode = "reflect"
    elif mode == "zero":
        np_mode = "constant"
    else:
        raise InvalidArgumentError(f"unknown pad mode {mode!r}")
    widths = ([(0, 0)] if volume.data.ndim == 4 else []) + margins
    return VoxelVolume(np.pad(volume.data, widths, mode=np_mode), volume.resolution)


# ---------------------------------------------------------------------------
# file format


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def read_header(path) -> dict:
    header_path, _ = _paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{header_path}: invalid JSON header at byte offset {e.pos}: {e.msg}") from None
    for key in ("shape", "dtype", "resolution_nm"):
        if key not in header:
            raise FormatError(f"{header_path}: header missing field {key!r}")
    if header["dtype"] not in DTYPES:
        raise FormatError(f"{header_path}: unknown dtype tag {header['dtype']!r}")
    if len(header["shape"]) != 3 or any(int(s) < 1 for s in header["shape"]):
        raise FormatError(f"{header_path}: shape must be three positive ints, got {header['shape']}")
    return header


def read_volume(path) -> VoxelVolume:
    header = read_header(path)
    _, raw_path = _paths(path)
    dtype = DTYPES[header["dtype"]]
    shape = tuple(int(s) for s in header["shape"])
    channels = header.get("channels")
    if channels is not None:
        shape = (int(channels),) + shape
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = raw_path.read_bytes()
    if len(payload) != expected:
        what = "truncated payload" if len(payload) < expected else "trailing bytes in payload"
        raise FormatError(
            f"{raw_path}: {what}: expected {expected} bytes, found {len(payload)} "
            f"(mismatch at byte offset {min(expected, len(payload))})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return VoxelVolume(data.astype(dtype.newbyteorder("="), copy=False), header["resolution_nm"])


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_volume(volume: VoxelVolume, path, extra_header: dict | None = None) -> Path:
    """Write ``volume`` as ``path.json`` + ``path.raw``; returns the header path."""
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(volume.shape),
        "dtype": volume.dtype_tag,
        "resolution_nm": list(volume.resolution),
    }
    if volume.channels is not None:
        header["channels"] = volume.channels
    if extra_header:
        header.update(extra_header)
    data = np.ascontiguousarray(volume.data, dtype=DTYPES[volume.dtype_tag])
    _atomic_write(raw_path, data.tobytes())
    _atomic_write(header_path, (json.dumps(header, sort_keys=True) + "\n").encode())
    return header_path


# ---------------------------------------------------------------------------
# PGM slices


def write_pgm(path, raster: np.ndarray) -> None:
    raster = np.ascontiguousarray(raster, dtype=np.uint8)
    h, w = raster.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes())


def read_pgm(path) -> np.ndarray:
    payload = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(payload) and payload[pos : pos + 1].isspace():
            pos += 1
        if payload[pos : pos + 1] == b"#":
            while pos < len(payload) and payload[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at byte offset {pos}")
        tokens.append(payload[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = payload[pos:]
    if len(body) != w * h:
        raise FormatError(
            f"{path}: PGM payload expected {w * h} bytes from offset {pos}, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def to_u8(data: np.ndarray) -> np.ndarray:
    """Map u8 through unchanged; map f32 from [0, 1] to [0, 255] rounding half away from zero."""
    if data.dtype == np.uint8:
        return data
    if data.dtype != np.float32:
        raise InvalidArgumentError(f"slice export supports u8 and f32 volumes, got {data.dtype}")
    scaled = np.clip(data.astype(np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_slices(volume: VoxelVolume, directory, axis="z") -> list:
    if isinstance(axis, str):
        if axis not in AXES:
            raise InvalidArgumentError(f"axis must be one of z, y, x; got {axis!r}")
        axis = AXES.index(axis)
    if str(directory) == "":
        raise FileNotFoundError("export directory path is empty")
    if volume.channels is not None:
        raise InvalidArgumentError("slice export expects a single-channel volume")
    raster = to_u8(volume.data)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(raster.shape[axis]):
        p = out / f"slice_{i:04d}.pgm"
        write_pgm(p, np.take(raster, i, axis=axis))
        paths.append(p)
    return paths

