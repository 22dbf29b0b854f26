"""Turn probability volumes into semantic masks and instance labels."""

from __future__ import annotations

import heapq
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, NoSeedsWarning


@dataclass(frozen=True)
class DecodeParams:
    seed_threshold: float = 0.90
    foreground_threshold: float = 0.85
    contour_threshold: float = 0.80
    distance_seed_threshold: float = 0.50
    min_instance_voxels: int = 128
    connectivity: int = 6

    def __post_init__(self):
        for name in ("seed_threshold", "foreground_threshold", "contour_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {v}")
        if not -1.0 <= self.distance_seed_threshold <= 1.0:
            raise InvalidArgumentError(f"distance_seed_threshold must be in [-1, 1], got {self.distance_seed_threshold}")
        if self.min_instance_voxels < 0:
            raise InvalidArgumentError("min_instance_voxels must be >= 0")
        if self.connectivity not in (6, 26):
            raise InvalidArgumentError(f"connectivity must be 6 or 26, got {self.connectivity}")

    def to_dict(self) -> dict:
        return asdict(self)


def median_filter(volume: np.ndarray, kernel_extent=(7, 7, 7)) -> np.ndarray:
    """Median over an odd-sized box; borders mirror without repeating the edge voxel."""
    kernel = tuple(int(k) for k in kernel_extent)
    if len(kernel) != 3 or any(k < 1 or k % 2 == 0 for k in kernel):
        raise InvalidArgumentError(f"median kernel extents must be odd and positive, got {kernel}")
    return ndimage.median_filter(np.asarray(volume), size=kernel, mode="mirror")


def threshold(prob: np.ndarray, theta: float) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise InvalidArgumentError(f"threshold must be in [0, 1], got {theta}")
    return (np.asarray(prob) >= theta).astype(np.uint32)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    raise InvalidArgumentError(f"connectivity must be 6 or 26, got {connectivity}")


def _renumber_by_first_voxel(labels: np.ndarray) -> tuple[np.ndarray, int]:
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(int(flat.max()) + 1 if flat.size else 1, dtype=np.uint32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.uint32)
    return lut[labels], len(order)


def connected_components(mask: np.ndarray, connectivity: int = 6) -> tuple[np.ndarray, int]:
    """Label components 1..n in order of each component's first voxel in (z, y, x) order."""
    labels, _ = ndimage.label(np.asarray(mask) != 0, structure=_structure(connectivity))
    return _renumber_by_first_voxel(labels)


def remove_small(labels: np.ndarray, min_voxels: int) -> np.ndarray:
    """Zero instances under ``min_voxels``; survivors are renumbered 1..n keeping their order.

    ``min_voxels=0`` removes nothing and leaves the ids untouched.
    """
    labels = np.asarray(labels)
    if min_voxels <= 0:
        return labels.astype(np.uint32)
    counts = np.bincount(labels.ravel().astype(np.int64))
    counts[0] = 0
    keep = counts >= max(min_voxels, 1)
    keep[0] = False
    lut = np.zeros(len(counts), dtype=np.uint32)
    lut[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.uint32)
    return lut[labels]


def _neighbor_steps(shape_p, connectivity):
    _, py, px = shape_p
    offs = np.argwhere(_structure(connectivity)) - 1
    return [int(dz * py * px + dy * px + dx) for dz, dy, dx in offs if dz or dy or dx]


def priority_flood(landscape: np.ndarray, seeds: np.ndarray, region: np.ndarray,
                   connectivity: int = 6) -> np.ndarray:
    """Grow seed labels over ``region``, highest landscape value first.

    Among frontier voxels the one with the largest value is claimed next,
    ties going to the smaller (z, y, x) index; a claimed voxel takes the
    label of whichever of its labelled neighbours was labelled first
    (seeds count as labelled in (z, y, x) order before any flooding).
    """
    pad = [(1, 1)] * 3
    lab_p = np.pad(np.asarray(seeds, dtype=np.int64), pad)
    reg_p = np.pad((np.asarray(region) != 0) | (lab_p[1:-1, 1:-1, 1:-1] != 0), pad)
    land = np.pad(np.asarray(landscape, dtype=np.float64), pad).ravel().tolist()
    steps = _neighbor_steps(lab_p.shape, connectivity)
    labels = lab_p.ravel().tolist()
    region_l = reg_p.ravel().tolist()
    heap = []
    counter = 0
    for i in np.flatnonzero(lab_p).tolist():
        lab = labels[i]
        for s in steps:
            n = i + s
            if region_l[n] and not labels[n]:
                heap.append((-land[n], n, counter, lab))
                counter += 1
    heapq.heapify(heap)
    push, pop = heapq.heappush, heapq.heappop
    while heap:
        _, i, _, lab = pop(heap)
        if labels[i]:
            continue
        labels[i] = lab
        for s in steps:
            n = i + s
            if region_l[n] and not labels[n]:
                push(heap, (-land[n], n, counter, lab))
                counter += 1
    out = np.array(labels, dtype=np.int64).reshape(lab_p.shape)[1:-1, 1:-1, 1:-1]
    return out.astype(np.uint32)


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"decode inputs must share a shape, got {sorted(shapes)}")


def _watershed(seed_mask, landscape, region, params: DecodeParams) -> np.ndarray:
    seeds, n = connected_components(seed_mask, params.connectivity)
    if n == 0:
        warnings.warn("no seeds above threshold; returning an empty labeling", NoSeedsWarning, stacklevel=3)
        return np.zeros(np.shape(seed_mask), dtype=np.uint32)
    grown = priority_flood(landscape, seeds, region, params.connectivity)
    return remove_small(grown, params.min_instance_voxels)


def bc_watershed(mask_prob, contour_prob, params: DecodeParams = DecodeParams()) -> np.ndarray:
    """Seeds are confident foreground away from contours; flood descends on ``mask_prob``."""
    _check_shapes(mask_prob, contour_prob)
    mask_prob = np.asarray(mask_prob)
    seed = (mask_prob >= params.seed_threshold) & (np.asarray(contour_prob) <= params.contour_threshold)
    return _watershed(seed, mask_prob, mask_prob >= params.foreground_threshold, params)


def bcd_watershed(mask_prob, contour_prob, distance, params: DecodeParams = DecodeParams()) -> np.ndarray:
    """Like :func:`bc_watershed` but seeds also need ``distance >= distance_seed_threshold``
    and the flood descends on the distance map."""
    _check_shapes(mask_prob, contour_prob, distance)
    mask_prob = np.asarray(mask_prob)
    distance = np.asarray(distance)
    seed = ((mask_prob >= params.seed_threshold)
            & (np.asarray(contour_prob) <= params.contour_threshold)
            & (distance >= params.distance_seed_threshold))
    return _watershed(seed, distance, mask_prob >= params.foreground_threshold, params)
