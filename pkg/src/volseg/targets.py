"""Learning-target encoders (binary, contour, signed distance, affinity) and losses."""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .edt import edt
from .errors import DegenerateInputWarning, InvalidArgumentError

TARGET_KINDS = ("binary", "contour", "signed_distance", "affinity")
LOSS_KINDS = ("weighted_bce", "dice")
DEFAULT_AFFINITY_OFFSETS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
BCE_EPS = 1e-7
DICE_EPS = 1e-6


def _shifted(a: np.ndarray, offset):
    """Views ``(a[p], a[p + offset])`` over every ``p`` with both ends in bounds, plus the index of ``p``."""
    src, dst = [], []
    for o, n in zip(offset, a.shape[-3:]):
        if o >= 0:
            src.append(slice(0, n - o))
            dst.append(slice(o, n))
        else:
            src.append(slice(-o, n))
            dst.append(slice(0, n + o))
    return a[tuple(src)], a[tuple(dst)], tuple(src)


def neighborhood_offsets(radius: int = 1, connectivity: int = 26) -> list:
    """Offsets reachable in at most ``radius`` steps of the 6- or 26-neighbourhood."""
    if connectivity not in (6, 26):
        raise InvalidArgumentError(f"connectivity must be 6 or 26, got {connectivity}")
    r = int(radius)
    if connectivity == 26:
        ok = lambda d: max(map(abs, d)) <= r
    else:
        ok = lambda d: sum(map(abs, d)) <= r
    return [d for d in itertools.product(range(-r, r + 1), repeat=3) if any(d) and ok(d)]


def encode_binary(labels: np.ndarray) -> np.ndarray:
    return (np.asarray(labels) != 0).astype(np.float32)


def encode_contour(labels: np.ndarray, radius: int = 1, connectivity: int = 26) -> np.ndarray:
    """1 on foreground voxels that have a differently-labelled voxel in their neighbourhood.

    Background counts as a different label, so touching instances get a
    contour on both sides of their shared face.  Neighbours outside the
    volume are ignored.
    """
    if radius < 1:
        raise InvalidArgumentError(f"contour radius must be >= 1, got {radius}")
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    for off in neighborhood_offsets(radius, connectivity):
        a, b, idx = _shifted(labels, off)
        edge[idx] |= a != b
    return (edge & (labels != 0)).astype(np.float32)


def _signed_distance(labels, alpha, beta, clamp, resolution):
    if alpha <= 0 or beta <= 0:
        raise InvalidArgumentError(f"alpha and beta must be > 0, got {alpha}, {beta}")
    res = tuple(float(r) for r in resolution)
    spacing = tuple(r / res[2] for r in res)
    fg = np.asarray(labels) != 0
    if fg.all() or not fg.any():
        flag = "all_foreground" if fg.all() else "all_background"
        return np.full(fg.shape, 1.0 if fg.all() else -1.0, dtype=np.float32), flag
    inside = edt(~fg, spacing)
    outside = edt(fg, spacing)
    out = np.where(fg, inside / alpha, -outside / beta)
    if clamp:
        out = np.clip(out, -1.0, 1.0)
    return out.astype(np.float32), None


def encode_signed_distance(labels, alpha: float = 8.0, beta: float = 50.0, clamp: bool = True,
                           resolution=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Signed distance map: ``+d(p, background)/alpha`` inside, ``-d(p, foreground)/beta`` outside.

    Distances are Euclidean in units of the x voxel pitch, with every axis
    scaled by its resolution relative to x.  When one of the two sets is
    empty the distance to it is undefined and the whole volume is set to the
    clamp endpoint (+1 all-foreground, -1 all-background) with a warning.
    """
    out, flag = _signed_distance(labels, alpha, beta, clamp, resolution)
    if flag:
        warnings.warn(f"signed distance undefined ({flag}); filled with clamp endpoint",
                      DegenerateInputWarning, stacklevel=2)
    return out


def encode_affinity(labels: np.ndarray, offsets=DEFAULT_AFFINITY_OFFSETS) -> np.ndarray:
    offsets = [tuple(int(v) for v in o) for o in offsets]
    if not offsets or any(len(o) != 3 or not any(o) for o in offsets):
        raise InvalidArgumentError(f"affinity offsets must be nonzero 3-vectors, got {offsets}")
    labels = np.asarray(labels)
    out = np.zeros((len(offsets),) + labels.shape, dtype=np.float32)
    for k, off in enumerate(offsets):
        if any(abs(o) >= n for o, n in zip(off, labels.shape)):
            continue
        a, b, idx = _shifted(labels, off)
        out[(k,) + idx] = (a == b) & (a != 0)
    return out


@dataclass(frozen=True)
class LossTerm:
    kind: str
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidArgumentError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.weight > 0:
            raise InvalidArgumentError(f"loss weight must be > 0, got {self.weight}")


@dataclass(frozen=True)
class TargetSpec:
    kind: str
    losses: tuple = (LossTerm("weighted_bce"),)
    target_weight: float = 1.0
    params: dict = field(default_factory=dict)
    activation: str = "sigmoid"
    weight_opt: str = "none"  # "balance": inverse class frequency BCE weights

    def __post_init__(self):
        if self.weight_opt not in ("none", "balance"):
            raise InvalidArgumentError(f"weight_opt must be 'none' or 'balance', got {self.weight_opt!r}")
        if self.kind not in TARGET_KINDS:
            raise InvalidArgumentError(f"unknown target {self.kind!r}; expected one of {TARGET_KINDS}")
        losses = tuple(l if isinstance(l, LossTerm) else LossTerm(*l) for l in self.losses)
        if not losses:
            raise InvalidArgumentError(f"target {self.kind} needs at least one loss")
        if not self.target_weight > 0:
            raise InvalidArgumentError(f"target weight must be > 0, got {self.target_weight}")
        defaults = {
            "binary": {},
            "contour": {"radius": 1, "connectivity": 26},
            "signed_distance": {"alpha": 8.0, "beta": 50.0, "clamp": True},
            "affinity": {"offsets": DEFAULT_AFFINITY_OFFSETS},
        }[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise InvalidArgumentError(f"unknown {self.kind} parameters {sorted(unknown)}")
        params = {**defaults, **self.params}
        if self.kind == "signed_distance" and not (params["alpha"] > 0 and params["beta"] > 0):
            raise InvalidArgumentError("signed_distance alpha and beta must be > 0")
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "params", params)


@dataclass
class TargetStack:
    channels: list  # (TargetSpec, f32 array); affinity arrays carry a leading channel axis
    flags: list = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        parts = [a if a.ndim == 4 else a[None] for _, a in self.channels]
        return np.concatenate(parts, axis=0)

    @property
    def num_channels(self) -> int:
        return sum(a.shape[0] if a.ndim == 4 else 1 for _, a in self.channels)


def _encode_one(labels, spec: TargetSpec, resolution):
    p = spec.params
    if spec.kind == "binary":
        return encode_binary(labels), None
    if spec.kind == "contour":
        return encode_contour(labels, p["radius"], p["connectivity"]), None
    if spec.kind == "signed_distance":
        return _signed_distance(labels, p["alpha"], p["beta"], p["clamp"], resolution)
    return encode_affinity(labels, p["offsets"]), None


def encode_targets(labels, specs, resolution=(1.0, 1.0, 1.0), workers: int = 1) -> TargetStack:
    specs = list(specs)
    if not specs:
        raise InvalidArgumentError("encode_targets needs at least one TargetSpec")
    labels = np.asarray(labels)

    def run(i):
        try:
            return _encode_one(labels, specs[i], resolution)
        except InvalidArgumentError as e:
            raise InvalidArgumentError(f"target {i} ({specs[i].kind}): {e}") from e

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(len(specs))))
    else:
        results = [run(i) for i in range(len(specs))]
    stack = TargetStack([(s, arr) for s, (arr, _) in zip(specs, results)])
    stack.flags = [f"target {i}: {flag}" for i, (_, flag) in enumerate(results) if flag]
    return stack


# ---------------------------------------------------------------------------
# losses


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def balance_weights(target: np.ndarray) -> np.ndarray:
    """Inverse-class-frequency weights so foreground and background contribute equally."""
    t = np.asarray(target) > 0.5
    n = t.size
    n_fg = int(t.sum())
    if n_fg in (0, n):
        return np.ones(t.shape, dtype=np.float32)
    return np.where(t, n / (2.0 * n_fg), n / (2.0 * (n - n_fg))).astype(np.float32)


def weighted_bce(pred, target, weight_map=None) -> float:
    pred, target = _check_pair(pred, target)
    w = np.ones_like(pred) if weight_map is None else np.asarray(weight_map, dtype=np.float64)
    if w.shape != pred.shape:
        raise InvalidArgumentError(f"weight map shape {w.shape} != prediction shape {pred.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-w * (target * np.log(p) + (1.0 - target) * np.log1p(-p))))


def dice_loss(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    inter = float(np.sum(pred * target))
    return 1.0 - (2.0 * inter + DICE_EPS) / (float(pred.sum()) + float(target.sum()) + DICE_EPS)


def _split_channels(stack, specs):
    if isinstance(stack, TargetStack):
        return [a for _, a in stack.channels]
    if isinstance(stack, np.ndarray):
        need = sum(len(s.params["offsets"]) if s.kind == "affinity" else 1 for s in specs)
        if need != stack.shape[0]:
            raise InvalidArgumentError(f"stack has {stack.shape[0]} channels, specs need {need}")
        out, c = [], 0
        for s in specs:
            k = len(s.params["offsets"]) if s.kind == "affinity" else 1
            chunk = stack[c:c + k]
            out.append(chunk if s.kind == "affinity" else chunk[0])
            c += k
        return out
    return list(stack)


def hybrid_loss(pred_stack, target_stack, specs):
    """Weighted sum of every (target, loss) term.

    Signed-distance channels live in [-1, 1]; both prediction and target are
    mapped to [0, 1] by ``(v + 1) / 2`` before BCE or Dice is applied.
    Returns ``(total, breakdown)`` where each breakdown row holds the raw
    loss value and its weighted contribution.
    """
    specs = list(specs)
    preds = _split_channels(pred_stack, specs)
    targets = _split_channels(target_stack, specs)
    if not (len(preds) == len(targets) == len(specs)):
        raise InvalidArgumentError(
            f"channel misalignment: {len(preds)} predictions, {len(targets)} targets, {len(specs)} specs")
    total = 0.0
    breakdown = []
    for i, (spec, p, t) in enumerate(zip(specs, preds, targets)):
        if np.shape(p) != np.shape(t):
            raise InvalidArgumentError(f"target {i} ({spec.kind}): prediction {np.shape(p)} vs target {np.shape(t)}")
        if spec.kind == "signed_distance":
            p = (np.asarray(p, dtype=np.float64) + 1.0) / 2.0
            t = (np.asarray(t, dtype=np.float64) + 1.0) / 2.0
        for term in spec.losses:
            if term.kind == "weighted_bce":
                w = balance_weights(t) if spec.weight_opt == "balance" else None
                value = weighted_bce(p, t, w)
            else:
                value = dice_loss(p, t)
            weighted = spec.target_weight * term.weight * value
            total += weighted
            breakdown.append({"target": i, "kind": spec.kind, "loss": term.kind, "value": value,
                              "loss_weight": term.weight, "target_weight": spec.target_weight,
                              "weighted": weighted})
    return total, breakdown
