"""Training-window sampling, inference window grids, lazy tile assembly and splits.

Every random draw is a pure function of ``(seed, draw_index)``.  The
generator is numpy's counter-based Philox keyed by ``seed`` with the counter
block set to ``(0, 0, draw_index, stream)``, so draws can be sharded across
workers in any order and reproduce bit-for-bit.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .volume import (
    BoundingBox,
    VoxelVolume,
    _triple,
    axis_origins,
    check_inside,
    crop,
    read_pgm,
    read_volume,
)

STREAM_POSITION = 0
STREAM_REJECT = 1
STREAM_SOURCE = 2
STREAM_AUGMENT = 3


def draw_rng(seed: int, draw_index: int, stream: int = STREAM_POSITION) -> np.random.Generator:
    if seed < 0 or draw_index < 0:
        raise InvalidArgumentError("seed and draw_index must be non-negative")
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(draw_index), int(stream)]))


def enumerate_windows(volume_shape, window_extent, stride) -> list[BoundingBox]:
    """Sliding-window boxes in z-major order, last window per axis clamped to the border."""
    shape = _triple(volume_shape, "volume_shape")
    extent = _triple(window_extent, "window_extent")
    step = _triple(stride, "stride")
    per_axis = [axis_origins(n, e, s) for n, e, s in zip(shape, extent, step)]
    return [BoundingBox((z, y, x), extent) for z in per_axis[0] for y in per_axis[1] for x in per_axis[2]]


def _origins_from_uniform(u: np.ndarray, span: np.ndarray) -> np.ndarray:
    # span = number of admissible origins per axis
    return np.minimum((u * span).astype(np.int64), span - 1)


def random_position(seed: int, draw_index: int, volume_shape, window_extent) -> BoundingBox:
    shape = np.array(_triple(volume_shape, "volume_shape"))
    extent = np.array(_triple(window_extent, "window_extent"))
    if np.any(extent > shape):
        raise InvalidArgumentError(f"window {tuple(extent)} does not fit in volume {tuple(shape)}")
    u = draw_rng(seed, draw_index, STREAM_POSITION).random(3)
    return BoundingBox(tuple(_origins_from_uniform(u, shape - extent + 1)), tuple(extent))


@dataclass(frozen=True)
class SampleDraw:
    position: BoundingBox
    attempts: int
    rng_stream_id: tuple


class RejectionSampler:
    """Draws windows, rejecting foreground-free ones with probability ``reject_prob``.

    A summed-volume table of the foreground mask is built once so that each
    candidate window is tested in O(1).
    """

    def __init__(self, labels: np.ndarray, window_extent, reject_prob: float,
                 max_attempts: int = 100, min_foreground: int = 1):
        if not 0.0 <= reject_prob < 1.0:
            raise InvalidArgumentError(f"reject_prob must be in [0, 1), got {reject_prob}")
        if max_attempts < 1:
            raise InvalidArgumentError("max_attempts must be >= 1")
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise InvalidArgumentError("labels must be a 3D volume")
        self.shape = np.array(labels.shape)
        self.extent = np.array(_triple(window_extent, "window_extent"))
        if np.any(self.extent > self.shape):
            raise InvalidArgumentError(f"window {tuple(self.extent)} does not fit in volume {labels.shape}")
        self.reject_prob = float(reject_prob)
        self.max_attempts = int(max_attempts)
        self.min_foreground = int(min_foreground)
        table = np.zeros(tuple(self.shape + 1), dtype=np.int64)
        table[1:, 1:, 1:] = (labels != 0).cumsum(0).cumsum(1).cumsum(2)
        self._table = table

    def foreground_counts(self, origins: np.ndarray) -> np.ndarray:
        t = self._table
        z0, y0, x0 = origins.T
        z1, y1, x1 = (origins + self.extent).T
        return (
            t[z1, y1, x1] - t[z0, y1, x1] - t[z1, y0, x1] - t[z1, y1, x0]
            + t[z0, y0, x1] + t[z0, y1, x0] + t[z1, y0, x0] - t[z0, y0, x0]
        )

    def draw(self, seed: int, draw_index: int) -> SampleDraw:
        # Candidates come in growing blocks; consecutive draws from one stream
        # are the same numbers however they are blocked, so attempt k always
        # sees the k-th position.  Attempt 1 is exactly random_position().
        pos_rng = draw_rng(seed, draw_index, STREAM_POSITION)
        coin_rng = draw_rng(seed, draw_index, STREAM_REJECT)
        span = self.shape - self.extent + 1
        done, block = 0, 16
        while True:
            n = min(block, self.max_attempts - done)
            origins = _origins_from_uniform(pos_rng.random((n, 3)), span)
            coins = coin_rng.random(n)
            accepted = (self.foreground_counts(origins) >= self.min_foreground) | (coins >= self.reject_prob)
            if done + n == self.max_attempts:
                accepted[-1] = True
            if accepted.any():
                k = int(np.argmax(accepted))
                return SampleDraw(BoundingBox(tuple(origins[k]), tuple(self.extent)), done + k + 1,
                                  (seed, draw_index))
            done += n
            block *= 4


def rejection_sample(seed, draw_index, label_volume, window_extent, reject_prob,
                     max_attempts=100, min_foreground=1) -> SampleDraw:
    labels = label_volume.data if isinstance(label_volume, VoxelVolume) else label_volume
    return RejectionSampler(labels, window_extent, reject_prob, max_attempts, min_foreground).draw(seed, draw_index)


# ---------------------------------------------------------------------------
# tiles


class AccessRecorder:
    """Thread-safe log of opened tile paths."""

    def __init__(self):
        self._lock = threading.Lock()
        self.paths: list[str] = []

    def record(self, path) -> None:
        with self._lock:
            self.paths.append(str(path))

    @property
    def count(self) -> int:
        with self._lock:
            return len(self.paths)


@dataclass(frozen=True)
class TileSetMetadata:
    sections: tuple  # per z-section: tuple of rows, each a tuple of tile paths
    tile_extent: tuple
    resolution: tuple = (1.0, 1.0, 1.0)
    dtype: str = "u8"

    def __post_init__(self):
        grid = {(len(s), len(s[0]) if s else 0) for s in self.sections}
        if len(grid) != 1 or 0 in next(iter(grid)):
            raise FormatError("all sections must share a non-empty rows x cols tile grid")
        for s in self.sections:
            if any(len(r) != len(s[0]) for r in s):
                raise FormatError("ragged tile grid")

    @property
    def grid(self) -> tuple:
        return len(self.sections[0]), len(self.sections[0][0])

    @property
    def shape(self) -> tuple:
        rows, cols = self.grid
        return len(self.sections), rows * self.tile_extent[0], cols * self.tile_extent[1]

    @classmethod
    def from_json(cls, path) -> "TileSetMetadata":
        path = Path(path)
        meta = json.loads(path.read_text())
        base = path.parent
        sections = []
        for sec in meta["sections"]:
            if sec and isinstance(sec[0], list):
                rows = [[str(base / p) for p in row] for row in sec]
            else:
                if "grid" not in meta:
                    raise FormatError(f"{path}: flat section lists need a 'grid': [rows, cols] field")
                r, c = meta["grid"]
                if len(sec) != r * c:
                    raise FormatError(f"{path}: section has {len(sec)} tiles, grid expects {r * c}")
                rows = [[str(base / p) for p in sec[i * c:(i + 1) * c]] for i in range(r)]
            sections.append(tuple(tuple(row) for row in rows))
        return cls(tuple(sections), tuple(int(v) for v in meta["tile_extent"]),
                   tuple(meta.get("resolution_nm", (1.0, 1.0, 1.0))), meta.get("dtype", "u8"))


def read_tile(path) -> np.ndarray:
    if str(path).endswith(".pgm"):
        return read_pgm(path)
    vol = read_volume(path)
    if vol.shape[0] != 1 or vol.channels is not None:
        raise FormatError(f"{path}: tile volumes must have z == 1, got shape {vol.shape}")
    return np.asarray(vol.data[0])


def load_tile_region(meta: TileSetMetadata, box: BoundingBox,
                     recorder: AccessRecorder | None = None,
                     reader: Callable[[str], np.ndarray] = read_tile) -> VoxelVolume:
    """Assemble ``box`` from the tiles it intersects, opening nothing else."""
    check_inside(box, meta.shape)
    ty, tx = meta.tile_extent
    dtype = np.dtype({"u8": np.uint8, "u32": np.uint32, "f32": np.float32}[meta.dtype])
    out = np.zeros(box.extent, dtype=dtype)
    (z0, y0, x0), (z1, y1, x1) = box.origin, box.stop
    for z in range(z0, z1):
        for r in range(y0 // ty, (y1 - 1) // ty + 1):
            for c in range(x0 // tx, (x1 - 1) // tx + 1):
                path = meta.sections[z][r][c]
                if recorder is not None:
                    recorder.record(path)
                try:
                    tile = reader(path)
                except FileNotFoundError:
                    raise FileNotFoundError(f"missing tile {path} (section {z}, row {r}, col {c})") from None
                if tile.shape != (ty, tx):
                    raise FormatError(f"tile {path} has shape {tile.shape}, expected {(ty, tx)}")
                if tile.dtype != dtype:
                    raise FormatError(f"tile {path} has dtype {tile.dtype}, expected {dtype}")
                gy0, gx0 = max(y0, r * ty), max(x0, c * tx)
                gy1, gx1 = min(y1, (r + 1) * ty), min(x1, (c + 1) * tx)
                out[z - z0, gy0 - y0:gy1 - y0, gx0 - x0:gx1 - x0] = tile[gy0 - r * ty:gy1 - r * ty,
                                                                         gx0 - c * tx:gx1 - c * tx]
    return VoxelVolume(out, meta.resolution)


# ---------------------------------------------------------------------------
# splits and sample sources


@dataclass(frozen=True)
class DatasetSplit:
    fractions: tuple
    boxes: tuple


def split_dataset(volume_shape, fractions: Sequence[float]) -> DatasetSplit:
    """Consecutive z-ranges with boundaries at ``round(cumulative_fraction * z)``."""
    shape = _triple(volume_shape, "volume_shape")
    fractions = tuple(float(f) for f in fractions)
    if not fractions or any(f <= 0 for f in fractions):
        raise InvalidArgumentError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"fractions must sum to 1, got {sum(fractions)!r}")
    cum = np.cumsum(fractions)
    bounds = [0] + [int(np.floor(c * shape[0] + 0.5)) for c in cum[:-1]] + [shape[0]]
    boxes = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b <= a:
            raise InvalidArgumentError(f"fractions {fractions} leave an empty split for z={shape[0]}")
        boxes.append(BoundingBox((a, 0, 0), (b - a, shape[1], shape[2])))
    return DatasetSplit(fractions, tuple(boxes))


@dataclass(frozen=True, eq=False)
class SampleSource:
    image: VoxelVolume
    label: VoxelVolume | None
    tag: str = "ground_truth"  # or "pseudo"

    @property
    def size(self) -> int:
        return int(np.prod(self.image.shape))


def merge_pseudo_labeled(labeled, pseudo) -> list[SampleSource]:
    """Tag and concatenate labeled and pseudo-labeled ``(image, label)`` pairs."""
    merged = [SampleSource(i, l, "ground_truth") for i, l in labeled]
    merged += [SampleSource(i, l, "pseudo") for i, l in pseudo]
    if merged:
        ref = merged[0]
        for s in merged[1:]:
            if s.image.resolution != ref.image.resolution:
                raise InvalidArgumentError(
                    f"resolution mismatch: {s.image.resolution} vs {ref.image.resolution}")
            if s.image.data.dtype != ref.image.data.dtype:
                raise InvalidArgumentError(f"image dtype mismatch: {s.image.data.dtype} vs {ref.image.data.dtype}")
            if (s.label is None) != (ref.label is None) or (
                    s.label is not None and s.label.data.dtype != ref.label.data.dtype):
                raise InvalidArgumentError("label dtype mismatch between sources")
    return merged


def choose_source(seed: int, draw_index: int, sources: Sequence[SampleSource]) -> int:
    """Index of a source picked with probability proportional to its voxel count."""
    if not sources:
        raise InvalidArgumentError("no sample sources")
    cum = np.cumsum([s.size for s in sources])
    u = draw_rng(seed, draw_index, STREAM_SOURCE).random()
    return int(np.searchsorted(cum, u * cum[-1], side="right"))


@dataclass
class TrainingSample:
    image: np.ndarray
    label: np.ndarray | None
    source_index: int
    draw: SampleDraw
    augment_log: list = field(default_factory=list)


def draw_training_sample(seed: int, draw_index: int, sources: Sequence[SampleSource], window_extent,
                         reject_prob: float = 0.0, max_attempts: int = 100, min_foreground: int = 1,
                         samplers: dict | None = None) -> TrainingSample:
    """Pick a source by size, then a (rejection-sampled) window inside it."""
    idx = choose_source(seed, draw_index, sources)
    src = sources[idx]
    if src.label is None:
        draw = SampleDraw(random_position(seed, draw_index, src.image.shape, window_extent), 1, (seed, draw_index))
    else:
        sampler = samplers.get(idx) if samplers is not None else None
        if sampler is None:
            sampler = RejectionSampler(src.label.data, window_extent, reject_prob, max_attempts, min_foreground)
            if samplers is not None:
                samplers[idx] = sampler
        draw = sampler.draw(seed, draw_index)
    image = np.array(crop(src.image, draw.position).data)
    label = np.array(crop(src.label, draw.position).data) if src.label is not None else None
    return TrainingSample(image, label, idx, draw)
