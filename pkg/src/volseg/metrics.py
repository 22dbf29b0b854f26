"""Semantic IoU, instance AP without confidences, and CREMI distance scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .edt import edt
from .errors import InvalidArgumentError

METRIC_FIELDS = ("fg_iou", "iou", "adgt", "adf", "cremi")


def _same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def iou_semantic(pred, gt) -> tuple[float, float, list]:
    """Foreground IoU and overall IoU (mean of foreground and background IoU).

    Returns ``(fg_iou, overall_iou, flags)``.  A class absent from both masks
    scores 1.0 and is flagged.
    """
    pred, gt = _same_shape(pred, gt)
    p, g = pred != 0, gt != 0
    flags = []

    def iou(a, b, name):
        union = int(np.count_nonzero(a | b))
        if union == 0:
            flags.append(f"empty_{name}")
            return 1.0
        return np.count_nonzero(a & b) / union

    fg = iou(p, g, "foreground")
    bg = iou(~p, ~g, "background")
    return fg, (fg + bg) / 2.0, flags


@dataclass
class MatchTable:
    matches: list = field(default_factory=list)  # (gt_id, pred_id, iou)
    unmatched_gt: list = field(default_factory=list)
    unmatched_pred: list = field(default_factory=list)


def pairwise_iou(pred, gt) -> tuple[dict, list, list]:
    """IoU for every overlapping (gt_id, pred_id) pair, plus the sorted gt and pred ids."""
    pred, gt = _same_shape(pred, gt)
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    gt_ids, gt_sizes = np.unique(g[g != 0], return_counts=True)
    pr_ids, pr_sizes = np.unique(p[p != 0], return_counts=True)
    gsize = dict(zip(gt_ids.tolist(), gt_sizes.tolist()))
    psize = dict(zip(pr_ids.tolist(), pr_sizes.tolist()))
    both = (p != 0) & (g != 0)
    pairs, inter = np.unique(np.stack([g[both], p[both]]), axis=1, return_counts=True)
    out = {}
    for (gi, pi), n in zip(pairs.T.tolist(), inter.tolist()):
        out[(gi, pi)] = n / (gsize[gi] + psize[pi] - n)
    return out, sorted(gsize), sorted(psize)


def instance_ap(pred, gt, thresholds=(0.5, 0.75)):
    """Score-free AP = TP / (TP + FP + FN) at each IoU threshold.

    Instances are matched once, greedily by descending IoU (ties by
    ``(gt_id, pred_id)``); at threshold ``t`` a match counts as TP only if its
    IoU is at least ``t``, otherwise both its members count as errors.
    Returns ``(ap_by_threshold, tables_by_threshold)``.
    """
    ious, gt_ids, pred_ids = pairwise_iou(pred, gt)
    order = sorted(ious.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    used_g, used_p, greedy = set(), set(), []
    for (gi, pi), v in order:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        greedy.append((gi, pi, v))
    aps, tables = {}, {}
    for t in thresholds:
        t = float(t)
        accepted = [m for m in greedy if m[2] >= t]
        mg = {m[0] for m in accepted}
        mp = {m[1] for m in accepted}
        table = MatchTable(accepted, [g for g in gt_ids if g not in mg], [p for p in pred_ids if p not in mp])
        tp, fp, fn = len(accepted), len(table.unmatched_pred), len(table.unmatched_gt)
        aps[t] = tp / (tp + fp + fn) if tp + fp + fn else 1.0
        tables[t] = table
    return aps, tables


def distance_transform(mask, resolution=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance in nm from every voxel to the nearest nonzero voxel of ``mask``."""
    mask = np.asarray(mask) != 0
    if not mask.any():
        raise InvalidArgumentError("distance transform of an empty mask is undefined")
    return edt(mask, resolution).astype(np.float32)


def volume_diagonal(shape, resolution) -> float:
    return math.sqrt(sum((n * r) ** 2 for n, r in zip(shape, resolution)))


def cremi_scores(pred, gt, resolution=(40.0, 4.0, 4.0)):
    """``(adgt, adf, cremi, flags)``.

    ADGT averages, over predicted voxels, the distance to ground truth; ADF
    averages, over ground-truth voxels, the distance to the prediction.  When
    one side is empty, distances to it are capped at the physical volume
    diagonal and flagged.
    """
    pred, gt = _same_shape(pred, gt)
    p, g = pred != 0, gt != 0
    cap = volume_diagonal(p.shape, resolution)
    flags = []
    if not p.any() and not g.any():
        return 0.0, 0.0, 0.0, ["empty_prediction", "empty_ground_truth"]
    if not g.any():
        flags.append("empty_ground_truth")
        adgt = cap
    else:
        adgt = float(distance_transform(g, resolution).astype(np.float64)[p].mean()) if p.any() else 0.0
    if not p.any():
        flags.append("empty_prediction")
        adf = cap
    else:
        adf = float(distance_transform(p, resolution).astype(np.float64)[g].mean()) if g.any() else 0.0
    return adgt, adf, (adgt + adf) / 2.0, flags


@dataclass
class MetricReport:
    name: str = ""
    fg_iou: float | None = None
    iou: float | None = None
    ap: dict | None = None
    adgt: float | None = None
    adf: float | None = None
    cremi: float | None = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("name",) + METRIC_FIELDS}
        d["ap"] = None if self.ap is None else {f"{k:g}": v for k, v in sorted(self.ap.items())}
        d["flags"] = list(self.flags)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        ap = d.get("ap")
        return cls(d.get("name", ""), d.get("fg_iou"), d.get("iou"),
                   None if ap is None else {float(k): v for k, v in ap.items()},
                   d.get("adgt"), d.get("adf"), d.get("cremi"), list(d.get("flags", [])))


def evaluate(pred, gt, resolution=(1.0, 1.0, 1.0), metrics=("iou",), thresholds=(0.5, 0.75),
             name: str = "") -> MetricReport:
    report = MetricReport(name)
    if "iou" in metrics:
        report.fg_iou, report.iou, flags = iou_semantic(pred, gt)
        report.flags += flags
    if "ap" in metrics:
        report.ap, _ = instance_ap(pred, gt, thresholds)
    if "cremi" in metrics:
        report.adgt, report.adf, report.cremi, flags = cremi_scores(pred, gt, resolution)
        report.flags += flags
    return report


def aggregate(reports) -> MetricReport:
    """Unweighted per-metric means across volumes."""
    reports = list(reports)
    if not reports:
        raise InvalidArgumentError("aggregate needs at least one report")
    out = MetricReport("overall")
    for f in METRIC_FIELDS:
        present = [getattr(r, f) is not None for r in reports]
        if any(present) and not all(present):
            raise InvalidArgumentError(f"metric {f} present in some volumes but not others")
        if all(present):
            setattr(out, f, float(np.mean([getattr(r, f) for r in reports])))
    aps = [r.ap for r in reports]
    if any(a is not None for a in aps):
        if any(a is None for a in aps) or len({tuple(sorted(a)) for a in aps}) != 1:
            raise InvalidArgumentError("AP thresholds differ between volumes")
        out.ap = {t: float(np.mean([a[t] for a in aps])) for t in sorted(aps[0])}
    out.flags = sorted({f"{r.name}:{fl}" if r.name else fl for r in reports for fl in r.flags})
    return out


def format_table(reports, overall: MetricReport | None = None) -> str:
    """Plain-text table: one row per volume plus an overall row."""
    rows = list(reports) + ([overall] if overall is not None else [])
    cols = [f for f in METRIC_FIELDS if any(getattr(r, f) is not None for r in rows)]
    thresholds = sorted({t for r in rows if r.ap for t in r.ap})
    header = ["volume"] + [c.upper().replace("_", "-") for c in cols] + [f"AP-{round(t * 100)}" for t in thresholds]
    lines = [header]
    for r in rows:
        line = [r.name or "-"]
        line += ["-" if getattr(r, c) is None else f"{getattr(r, c):.4f}" for c in cols]
        line += ["-" if not r.ap else f"{r.ap.get(t, float('nan')):.4f}" for t in thresholds]
        lines.append(line)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(l, widths)) for l in lines)
