"""Training augmentations and flip/transpose test-time augmentation.

Each random op is split into a parameter draw and a deterministic core so the
drawn parameters can be logged and replayed.  Non-spatial ops
(``grayscale``, ``missing_part``) only ever see the image; spatial ops move
image and label with one shared geometric map (bilinear for the image,
nearest-neighbour for labels).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import STREAM_AUGMENT, draw_rng
from .errors import InvalidArgumentError, ReducedVariantsWarning
from .volume import VoxelVolume

KINDS = ("grayscale", "missing_part", "misalignment", "rescale", "flip", "transpose")

DEFAULT_PARAMS = {
    "grayscale": {"brightness_range": (-0.1, 0.1), "contrast_range": (0.8, 1.2),
                  "gamma_range": (0.8, 1.25), "invert_prob": 0.0},
    "missing_part": {"num_regions": 2, "max_extent_fraction": 0.5, "fill": None},
    "misalignment": {"max_shift_px": 8, "rotate": False, "max_angle_deg": 10.0},
    "rescale": {"scale_range": (0.8, 1.2), "mode_3d": False},
    "flip": {},
    "transpose": {},
}


def _range(params, key, lo=-math.inf, hi=math.inf, open_lo=False):
    a, b = (float(v) for v in params[key])
    bad = a > b or a < lo or b > hi or (open_lo and a <= lo)
    if bad:
        raise InvalidArgumentError(f"{key} must be an ordered range inside [{lo}, {hi}], got {(a, b)}")
    return a, b


def validate_params(kind: str, params: dict) -> dict:
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown augmentation kind {kind!r}")
    unknown = set(params) - set(DEFAULT_PARAMS[kind])
    if unknown:
        raise InvalidArgumentError(f"unknown {kind} parameters: {sorted(unknown)}")
    p = {**DEFAULT_PARAMS[kind], **params}
    if kind == "grayscale":
        _range(p, "brightness_range", -1.0, 1.0)
        _range(p, "contrast_range", 0.0)
        _range(p, "gamma_range", 0.0, open_lo=True)
        if not 0.0 <= p["invert_prob"] <= 1.0:
            raise InvalidArgumentError("invert_prob must be in [0, 1]")
    elif kind == "missing_part":
        if int(p["num_regions"]) < 0 or not 0.0 < float(p["max_extent_fraction"]) <= 1.0:
            raise InvalidArgumentError("missing_part needs num_regions >= 0 and 0 < max_extent_fraction <= 1")
    elif kind == "misalignment":
        if int(p["max_shift_px"]) < 0 or float(p["max_angle_deg"]) < 0:
            raise InvalidArgumentError("misalignment needs max_shift_px >= 0 and max_angle_deg >= 0")
    elif kind == "rescale":
        _range(p, "scale_range", 0.0, open_lo=True)
    return p


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    probability: float = 0.5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidArgumentError(f"probability must be in [0, 1], got {self.probability}")
        object.__setattr__(self, "params", validate_params(self.kind, dict(self.params)))


# ---------------------------------------------------------------------------
# non-spatial


def _to_unit(image: np.ndarray) -> np.ndarray:
    if image.dtype != np.uint8:
        raise InvalidArgumentError(f"grayscale augmentation expects u8 images, got {image.dtype}")
    return image.astype(np.float64) / 255.0


def _from_unit(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def grayscale_transform(x: np.ndarray, brightness=0.0, contrast=1.0, gamma=1.0, invert=False) -> np.ndarray:
    """Contrast about mid-gray, brightness shift, clamp, gamma, then optional inversion."""
    y = np.clip((x - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    if gamma != 1.0:
        y = y ** gamma
    return 1.0 - y if invert else y


def draw_grayscale(rng: np.random.Generator, params: dict) -> dict:
    p = validate_params("grayscale", params)
    return {
        "brightness": rng.uniform(*p["brightness_range"]),
        "contrast": rng.uniform(*p["contrast_range"]),
        "gamma": rng.uniform(*p["gamma_range"]),
        "invert": bool(rng.random() < p["invert_prob"]),
    }


def apply_grayscale(rng, image, params):
    return _from_unit(grayscale_transform(_to_unit(image), **draw_grayscale(rng, params)))


def draw_missing_part(rng: np.random.Generator, shape, params: dict) -> dict:
    """Pick pairwise non-adjacent slices and one rectangle per slice.

    ``k`` non-adjacent indices out of ``z`` are drawn as a sorted sample from
    ``range(z - k + 1)`` shifted by their rank, which is uniform over valid sets.
    """
    p = validate_params("missing_part", params)
    z, y, x = shape
    requested = int(p["num_regions"])
    k = min(requested, (z + 1) // 2)
    picks = np.sort(rng.choice(z - k + 1, size=k, replace=False)) + np.arange(k) if k else np.array([], int)
    max_h = max(1, int(p["max_extent_fraction"] * y))
    max_w = max(1, int(p["max_extent_fraction"] * x))
    regions = []
    for s in picks:
        h = int(rng.integers(1, max_h + 1))
        w = int(rng.integers(1, max_w + 1))
        y0 = int(rng.integers(0, y - h + 1))
        x0 = int(rng.integers(0, x - w + 1))
        regions.append((int(s), y0, y0 + h, x0, x0 + w))
    return {"regions": regions, "requested": requested, "effective": k, "fill": p["fill"]}


def mask_regions(image: np.ndarray, regions, fill=None) -> np.ndarray:
    out = np.array(image, copy=True)
    if fill is None:
        fill = np.floor(float(image.mean()) + 0.5) if image.dtype.kind in "ui" else float(image.mean())
    for s, y0, y1, x0, x1 in regions:
        out[s, y0:y1, x0:x1] = fill
    return out


def apply_missing_part(rng, image, params):
    drawn = draw_missing_part(rng, image.shape, params)
    return mask_regions(image, drawn["regions"], drawn["fill"])


# ---------------------------------------------------------------------------
# spatial


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _warp_plane(image2d, label2d, coords):
    img = ndimage.map_coordinates(image2d.astype(np.float64), coords, order=1, mode="mirror")
    if image2d.dtype.kind in "ui":
        img = np.floor(np.clip(img, np.iinfo(image2d.dtype).min, np.iinfo(image2d.dtype).max) + 0.5)
    img = img.astype(image2d.dtype)
    lab = None
    if label2d is not None:
        lab = ndimage.map_coordinates(label2d, coords, order=0, mode="constant", cval=0).astype(label2d.dtype)
    return img, lab


def misalign(image, label, pivot: int, shift=(0, 0), angle_deg: float = 0.0):
    """Translate (and rotate about the slice centre) every slice at ``z >= pivot``.

    The output voxel ``(y, x)`` samples the source at ``R(-angle)(p - c - shift) + c``.
    Out-of-frame image samples reflect; out-of-frame labels become 0.
    """
    if label is not None and label.shape != image.shape:
        raise InvalidArgumentError(f"image {image.shape} and label {label.shape} shapes differ")
    img = np.array(image, copy=True)
    lab = None if label is None else np.array(label, copy=True)
    dy, dx = (int(v) for v in shift)
    _, ny, nx = image.shape
    if pivot >= image.shape[0] or (dy == 0 and dx == 0 and angle_deg == 0):
        return img, lab
    yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    if angle_deg == 0:
        sy, sx = yy - dy, xx - dx
        img[pivot:] = image[pivot:][:, _mirror(sy, ny), _mirror(sx, nx)]
        if lab is not None:
            inside = (sy >= 0) & (sy < ny) & (sx >= 0) & (sx < nx)
            moved = label[pivot:][:, np.clip(sy, 0, ny - 1), np.clip(sx, 0, nx - 1)]
            lab[pivot:] = np.where(inside, moved, 0)
        return img, lab
    t = math.radians(angle_deg)
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    ry, rx = yy - cy - dy, xx - cx - dx
    coords = np.stack([math.cos(t) * ry - math.sin(t) * rx + cy, math.sin(t) * ry + math.cos(t) * rx + cx])
    for z in range(pivot, image.shape[0]):
        img[z], l2 = _warp_plane(image[z], None if label is None else label[z], coords)
        if lab is not None:
            lab[z] = l2
    return img, lab


def draw_misalignment(rng: np.random.Generator, shape, params: dict) -> dict:
    p = validate_params("misalignment", params)
    m = int(p["max_shift_px"])
    pivot = int(rng.integers(1, shape[0])) if shape[0] > 1 else shape[0]
    shift = (int(rng.integers(-m, m + 1)), int(rng.integers(-m, m + 1)))
    angle = float(rng.uniform(-p["max_angle_deg"], p["max_angle_deg"])) if p["rotate"] else 0.0
    return {"pivot": pivot, "shift": shift, "angle_deg": angle}


def apply_misalignment(rng, image, label, params):
    if label is not None and label.shape != image.shape:
        raise InvalidArgumentError(f"image {image.shape} and label {label.shape} shapes differ")
    return misalign(image, label, **draw_misalignment(rng, image.shape, params))


def rescale(image, label, factor: float, mode_3d: bool = False):
    """Scale about the volume centre by ``factor`` and recrop/pad to the original extent."""
    if factor <= 0:
        raise InvalidArgumentError(f"scale factor must be > 0, got {factor}")
    if label is not None and label.shape != image.shape:
        raise InvalidArgumentError(f"image {image.shape} and label {label.shape} shapes differ")
    if factor == 1.0:
        return np.array(image, copy=True), None if label is None else np.array(label, copy=True)
    nz, ny, nx = image.shape
    if mode_3d:
        grid = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        coords = np.stack([(g - (n - 1) / 2.0) / factor + (n - 1) / 2.0 for g, n in zip(grid, (nz, ny, nx))])
        img, lab = _warp_plane(image, label, coords)
        return img, lab
    yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    coords = np.stack([(yy - (ny - 1) / 2.0) / factor + (ny - 1) / 2.0,
                       (xx - (nx - 1) / 2.0) / factor + (nx - 1) / 2.0])
    img = np.empty_like(image)
    lab = None if label is None else np.empty_like(label)
    for z in range(nz):
        img[z], l2 = _warp_plane(image[z], None if label is None else label[z], coords)
        if lab is not None:
            lab[z] = l2
    return img, lab


def apply_rescale(rng, image, label, params):
    p = validate_params("rescale", params)
    return rescale(image, label, float(rng.uniform(*p["scale_range"])), bool(p["mode_3d"]))


# ---------------------------------------------------------------------------
# flips / transpose (shared with TTA)


@dataclass(frozen=True)
class TTAVariant:
    flip_z: bool = False
    flip_y: bool = False
    flip_x: bool = False
    transpose_xy: bool = False

    def _flip_axes(self):
        return tuple(a for a, f in zip((-3, -2, -1), (self.flip_z, self.flip_y, self.flip_x)) if f)

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Flip the flagged axes, then swap y and x."""
        out = np.flip(arr, self._flip_axes()) if self._flip_axes() else arr
        if self.transpose_xy:
            out = np.swapaxes(out, -1, -2)
        return np.ascontiguousarray(out)

    def invert(self, arr: np.ndarray) -> np.ndarray:
        out = np.swapaxes(arr, -1, -2) if self.transpose_xy else arr
        if self._flip_axes():
            out = np.flip(out, self._flip_axes())
        return np.ascontiguousarray(out)

    @property
    def name(self) -> str:
        flags = [n for n, f in zip(("fz", "fy", "fx", "t"), (self.flip_z, self.flip_y, self.flip_x, self.transpose_xy)) if f]
        return "+".join(flags) or "id"


def tta_variants(transpose: bool = True) -> list[TTAVariant]:
    ts = (False, True) if transpose else (False,)
    return [TTAVariant(fz, fy, fx, t) for t in ts for fz, fy, fx in itertools.product((False, True), repeat=3)]


def tta_expand(volume):
    """All flip/transpose variants of ``volume`` (16, or 8 when the xy plane is not square)."""
    arr = volume.data if isinstance(volume, VoxelVolume) else np.asarray(volume)
    square = arr.shape[-1] == arr.shape[-2]
    if not square:
        warnings.warn(f"xy extent {arr.shape[-2:]} is not square; transpose variants skipped (8 variants)",
                      ReducedVariantsWarning, stacklevel=2)
    out = []
    for v in tta_variants(square):
        t = v.apply(arr)
        if isinstance(volume, VoxelVolume):
            rz, ry, rx = volume.resolution
            t = VoxelVolume(t, (rz, rx, ry) if v.transpose_xy else volume.resolution)
        out.append((v, t))
    return out


def tta_collapse(pairs) -> np.ndarray:
    """Voxel-wise mean of predictions after undoing each variant."""
    if not pairs:
        raise InvalidArgumentError("tta_collapse needs at least one prediction")
    acc = None
    for v, pred in pairs:
        arr = pred.data if isinstance(pred, VoxelVolume) else np.asarray(pred)
        back = v.invert(arr)
        if acc is None:
            acc = back.astype(np.float64)
        elif back.shape != acc.shape:
            raise InvalidArgumentError(f"prediction for {v.name} has shape {back.shape} after inversion, expected {acc.shape}")
        else:
            acc += back
    return (acc / len(pairs)).astype(np.float32)


def draw_flip(rng: np.random.Generator) -> TTAVariant:
    fz, fy, fx = (bool(b) for b in rng.random(3) < 0.5)
    return TTAVariant(fz, fy, fx, False)


# ---------------------------------------------------------------------------
# composition


def augment(specs, seed: int, sample_index: int, image: np.ndarray, label: np.ndarray | None = None):
    """Run ``specs`` in list order; each fires with its own probability.

    Returns ``(image, label, log)`` where ``log`` records every op that fired
    together with its drawn parameters.
    """
    rng = draw_rng(seed, sample_index, STREAM_AUGMENT)
    log = []
    for spec in specs:
        if not rng.random() < spec.probability:
            continue
        entry = {"kind": spec.kind}
        if spec.kind == "grayscale":
            drawn = draw_grayscale(rng, spec.params)
            image = _from_unit(grayscale_transform(_to_unit(image), **drawn))
        elif spec.kind == "missing_part":
            drawn = draw_missing_part(rng, image.shape, spec.params)
            image = mask_regions(image, drawn["regions"], drawn["fill"])
        elif spec.kind == "misalignment":
            drawn = draw_misalignment(rng, image.shape, spec.params)
            image, label = misalign(image, label, **drawn)
        elif spec.kind == "rescale":
            drawn = {"factor": float(rng.uniform(*spec.params["scale_range"])),
                     "mode_3d": bool(spec.params["mode_3d"])}
            image, label = rescale(image, label, **drawn)
        elif spec.kind == "flip":
            v = draw_flip(rng)
            drawn = {"variant": v.name}
            image = v.apply(image)
            label = None if label is None else v.apply(label)
        else:  # transpose
            if image.shape[-1] != image.shape[-2]:
                entry["skipped"] = "non-square xy"
                log.append(entry)
                continue
            v = TTAVariant(transpose_xy=True)
            drawn = {}
            image = v.apply(image)
            label = None if label is None else v.apply(label)
        entry.update(drawn)
        log.append(entry)
    return image, label, log
