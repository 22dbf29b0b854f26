"""Sliding-window inference with blended stitching, and chunk-parallel runs.

Window predictions are accumulated as ``sum(w * p)`` and ``sum(w)`` in
float64, always in window order, so the result does not depend on which
worker finished first.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import tta_collapse, tta_variants
from .dataset import enumerate_windows
from .errors import (
    CoverageWarning,
    FormatError,
    InvalidArgumentError,
    MissingChunksError,
    PredictionClampedWarning,
    PredictorError,
)
from .volume import BoundingBox, ChunkPlan, VoxelVolume, _triple, read_header, read_volume, write_volume

log = logging.getLogger(__name__)

BLEND_EPS = 1e-3


@dataclass(frozen=True, eq=False)
class BlendWindow:
    extent: tuple
    kind: str
    weights: np.ndarray


def cosine_profile(length: int) -> np.ndarray:
    i = np.arange(length, dtype=np.float64)
    return BLEND_EPS + (1.0 - BLEND_EPS) * np.sin(np.pi * (i + 0.5) / length) ** 2


def make_blend_window(extent, kind: str = "cosine") -> BlendWindow:
    extent = _triple(extent, "extent")
    if any(e < 1 for e in extent):
        raise InvalidArgumentError(f"blend extent must be >= 1, got {extent}")
    if kind == "uniform":
        w = np.ones(extent)
    elif kind == "cosine":
        pz, py, px = (cosine_profile(n) for n in extent)
        w = pz[:, None, None] * py[None, :, None] * px[None, None, :]
    else:
        raise InvalidArgumentError(f"unknown blend kind {kind!r}; expected uniform or cosine")
    return BlendWindow(extent, kind, w)


def stitch(windows, blend: BlendWindow, out_shape, return_coverage: bool = False):
    """Blend ``(box, prediction)`` pairs into one ``(C, z, y, x)`` float32 volume.

    Each voxel is ``sum(w * p) / sum(w)`` over the windows covering it;
    uncovered voxels are 0 and reported through :class:`CoverageWarning`.
    """
    out_shape = _triple(out_shape, "out_shape")
    num = den = None
    for box, pred in windows:
        pred = np.asarray(pred)
        if pred.ndim == 3:
            pred = pred[None]
        if tuple(pred.shape[1:]) != blend.extent or tuple(box.extent) != blend.extent:
            raise InvalidArgumentError(
                f"window at {box.origin} has shape {pred.shape[1:]}, blend extent is {blend.extent}")
        if not box.fits_in(out_shape):
            raise InvalidArgumentError(f"window {box.origin}+{box.extent} outside output {out_shape}")
        if num is None:
            num = np.zeros((pred.shape[0],) + out_shape)
            den = np.zeros(out_shape)
        elif pred.shape[0] != num.shape[0]:
            raise InvalidArgumentError(f"window at {box.origin} has {pred.shape[0]} channels, expected {num.shape[0]}")
        num[(slice(None),) + box.slices] += blend.weights * pred
        den[box.slices] += blend.weights
    if num is None:
        raise InvalidArgumentError("stitch needs at least one window")
    covered = den > 0
    out = np.divide(num, den, out=np.zeros_like(num), where=covered).astype(np.float32)
    if not covered.all():
        warnings.warn(f"{int((~covered).sum())} voxels not covered by any window",
                      CoverageWarning, stacklevel=2)
    return (out, covered) if return_coverage else out


def normalize_input(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return data.astype(np.float32) / np.float32(255.0)
    return data.astype(np.float32)


def _predict_window(predictor, window, box, tta, expected_channels):
    kwargs = {"box": box} if getattr(predictor, "wants_box", False) else {}
    if tta:
        if kwargs:
            raise InvalidArgumentError("box-addressed predictors cannot be combined with test-time augmentation")
        square = window.shape[-1] == window.shape[-2]
        pred = tta_collapse([(v, predictor.predict(v.apply(window))) for v in tta_variants(square)])
    else:
        pred = np.asarray(predictor.predict(window, **kwargs), dtype=np.float32)
    expected = (expected_channels,) + tuple(window.shape[1:])
    if pred.shape != expected:
        raise InvalidArgumentError(f"predictor returned shape {pred.shape}, expected {expected}")
    return pred


def run_sliding_inference(volume, predictor, window_extent, stride, blend_kind: str = "cosine",
                          tta: bool = False, workers: int = 1, channels: int | None = None,
                          value_ranges=None, origin=(0, 0, 0)) -> np.ndarray:
    """Predict every sliding window of ``volume`` and blend the results.

    ``volume`` is a :class:`VoxelVolume` or a ``(z, y, x)`` array; u8 input is
    scaled to [0, 1].  Axes shorter than the window are reflect-padded and
    cropped back afterwards.  ``value_ranges`` gives a ``(lo, hi)`` clamp per
    output channel (default ``(0, 1)``).  ``origin`` is the global position of
    ``volume`` and only shows up in error messages and box-addressed predictors.
    """
    data = volume.data if isinstance(volume, VoxelVolume) else np.asarray(volume)
    if data.ndim != 3:
        raise InvalidArgumentError(f"inference input must be (z, y, x), got shape {data.shape}")
    x = normalize_input(data)
    extent = _triple(window_extent, "window_extent")
    shape = x.shape
    short = [max(0, e - n) for e, n in zip(extent, shape)]
    if any(short):
        x = np.pad(x, [(s // 2, s - s // 2) for s in short], mode="reflect")
    channels = channels or predictor.channels
    boxes = enumerate_windows(x.shape, extent, stride)
    gorigin = _triple(origin, "origin")

    def run(box):
        window = x[box.slices][None]
        gbox = BoundingBox(tuple(o + g for o, g in zip(box.origin, gorigin)), box.extent) if not any(short) else box
        try:
            return _predict_window(predictor, window, gbox, tta, channels)
        except Exception as e:
            raise PredictorError(f"prediction failed for window at global origin {gbox.origin}: {e}",
                                 origin=gbox.origin) from e

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            preds = list(pool.map(run, boxes))
    else:
        preds = [run(b) for b in boxes]

    ranges = value_ranges or [(0.0, 1.0)] * channels
    if len(ranges) != channels:
        raise InvalidArgumentError(f"{len(ranges)} value ranges for {channels} channels")
    lo = np.array([r[0] for r in ranges], dtype=np.float32)[:, None, None, None]
    hi = np.array([r[1] for r in ranges], dtype=np.float32)[:, None, None, None]
    clamped = 0
    for i, p in enumerate(preds):
        bad = (p < lo) | (p > hi) | np.isnan(p)
        if bad.any():
            clamped += int(bad.sum())
            preds[i] = np.clip(np.nan_to_num(p, nan=0.0), lo, hi)
    if clamped:
        warnings.warn(f"{clamped} predicted values outside their channel range were clamped",
                      PredictionClampedWarning, stacklevel=2)

    out = stitch(zip(boxes, preds), make_blend_window(extent, blend_kind), x.shape)
    if any(short):
        out = out[(slice(None),) + tuple(slice(s // 2, s // 2 + n) for s, n in zip(short, shape))]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# chunk-parallel inference


@dataclass(frozen=True, eq=False)
class PredictionChunk:
    chunk_id: str
    box: BoundingBox
    data: np.ndarray

    def __post_init__(self):
        if self.chunk_id != self.box.id:
            raise InvalidArgumentError(f"chunk id {self.chunk_id} does not match box origin {self.box.origin}")
        if tuple(self.data.shape[-3:]) != self.box.extent:
            raise InvalidArgumentError(f"chunk {self.chunk_id} data {self.data.shape} != extent {self.box.extent}")


def chunk_path(out_dir, chunk_id: str) -> Path:
    return Path(out_dir) / f"pred_{chunk_id}"


MANIFEST_NAME = "chunks_manifest.json"


@dataclass
class ChunkRunResult:
    files: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _stat_entry(base: Path) -> dict:
    st = (base.with_name(base.name + ".raw")).stat()
    return {"size": st.st_size, "mtime_ns": st.st_mtime_ns}


def write_chunk(chunk: PredictionChunk, out_dir, resolution=(1.0, 1.0, 1.0)) -> Path:
    base = chunk_path(out_dir, chunk.chunk_id)
    write_volume(VoxelVolume(np.ascontiguousarray(chunk.data, dtype=np.float32), resolution), base,
                 extra_header={"chunk_id": chunk.chunk_id, "origin": list(chunk.box.origin)})
    return base


def read_chunk(path) -> PredictionChunk:
    vol = read_volume(path)
    header = read_header(path)
    if "chunk_id" not in header or "origin" not in header:
        raise FormatError(f"{path}: prediction header lacks chunk_id/origin")
    data = vol.data if vol.channels is not None else vol.data[None]
    return PredictionChunk(header["chunk_id"], BoundingBox(header["origin"], vol.shape), np.asarray(data))


def run_chunked_inference(plan: ChunkPlan, loader: Callable[[BoundingBox], object], predictor, out_dir,
                          window_extent, stride, blend_kind: str = "cosine", tta: bool = False,
                          workers: int = 1, channels: int | None = None, value_ranges=None,
                          resolution=(1.0, 1.0, 1.0)) -> ChunkRunResult:
    """Predict every chunk of ``plan`` into ``out_dir/pred_{chunk_id}``.

    Chunks already on disk whose size and mtime match the manifest are
    skipped, so an interrupted run can simply be restarted.  A failing chunk
    is recorded in ``result.failures`` and does not stop the others.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    lock = threading.Lock()
    result = ChunkRunResult()

    def save_manifest():
        tmp = manifest_path.with_name(MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
        os.replace(tmp, manifest_path)

    def complete(box):
        base = chunk_path(out_dir, box.id)
        entry = manifest.get(box.id)
        try:
            return entry is not None and entry == _stat_entry(base) and base.with_name(base.name + ".json").exists()
        except OSError:
            return False

    def run(box: BoundingBox):
        if complete(box):
            with lock:
                result.skipped.append(box.id)
                result.files[box.id] = chunk_path(out_dir, box.id)
            return
        try:
            region = loader(box)
            pred = run_sliding_inference(region, predictor, window_extent, stride, blend_kind, tta,
                                         channels=channels, value_ranges=value_ranges, origin=box.origin)
            base = write_chunk(PredictionChunk(box.id, box, pred), out_dir, resolution)
        except Exception as e:  # reported per chunk; others continue
            log.warning("chunk %s failed: %s", box.id, e)
            with lock:
                result.failures[box.id] = f"{type(e).__name__}: {e}"
            return
        with lock:
            manifest[box.id] = _stat_entry(base)
            save_manifest()
            result.files[box.id] = base

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, plan.chunks))
    else:
        for box in plan.chunks:
            run(box)
    result.skipped.sort()
    return result


def merge_chunks(files, plan: ChunkPlan, blend_kind: str = "cosine") -> np.ndarray:
    """Reassemble chunk predictions into a volume of ``plan.volume_shape``.

    ``files`` maps chunk ids to paths, or is the directory the chunks were
    written to.  Overlaps are blended with the same normalization as window
    stitching.
    """
    if isinstance(files, (str, os.PathLike)):
        files = {cid: chunk_path(files, cid) for cid in plan.ids
                 if Path(str(chunk_path(files, cid)) + ".raw").exists()}
    missing = [cid for cid in plan.ids if cid not in files]
    if missing:
        raise MissingChunksError(missing)
    pairs = []
    for box in plan.chunks:
        try:
            chunk = read_chunk(files[box.id])
        except FileNotFoundError:
            raise MissingChunksError([box.id]) from None
        if chunk.box != box:
            raise FormatError(f"chunk {box.id} on disk has box {chunk.box.origin}+{chunk.box.extent}, "
                              f"plan expects {box.origin}+{box.extent}")
        pairs.append((box, chunk.data))
    return stitch(pairs, make_blend_window(plan.chunk_extent, blend_kind), plan.volume_shape)
