"""Sigmoid binarization, voxel metrics, and the binarization threshold sweep."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .voxels import VoxelGrid

OBJECTIVES = ("miou", "fscore")
F_AVERAGES = ("macro", "micro")
REPORT_FORMAT = "EVREPORT1"


def _occupancy(grid) -> np.ndarray:
    return grid.occupancy if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=bool)


def probability(logits) -> np.ndarray:
    """1 / (1 + exp(-z)) evaluated literally in float64.

    Threshold decisions sit exactly on grid values for hand-built logits, so
    the rounding of this expression matters; the two-branch stable form used
    in training can land one ulp lower.
    """
    z = np.asarray(logits, dtype=np.float64)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def binarize(logits: np.ndarray, p: float) -> np.ndarray:
    """Occupied where sigmoid(logit) > p (strict)."""
    return probability(logits) > p


def confusion(pred, gt) -> tuple[int, int, int]:
    """(TP, FP, FN) voxel counts."""
    P, G = _occupancy(pred), _occupancy(gt)
    if P.shape != G.shape:
        raise ValueError(f"resolution mismatch: prediction {P.shape} vs label {G.shape}")
    tp = int(np.count_nonzero(P & G))
    return tp, int(np.count_nonzero(P)) - tp, int(np.count_nonzero(G)) - tp


def _iou(tp, fp, fn):
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def _f(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def iou(pred, gt) -> float:
    """|P & G| / |P | G|; two empty grids score 1.0."""
    return _iou(*confusion(pred, gt))


def f_score(pred, gt) -> float:
    """2TP / (2TP + FP + FN); two empty grids score 1.0."""
    return _f(*confusion(pred, gt))


# ---------------------------------------------------------------------------
# threshold sweep


@dataclass(frozen=True)
class ThresholdSweepConfig:
    p_min: float = 0.15
    p_max: float = 0.50
    step: float = 0.01
    objective: str = "miou"
    f_average: str = "macro"

    def __post_init__(self):
        if not 0.0 < self.p_min <= self.p_max < 1.0:
            raise ValueError("need 0 < p_min <= p_max < 1")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.f_average not in F_AVERAGES:
            raise ValueError(f"f_average must be one of {F_AVERAGES}")

    @classmethod
    def parse(cls, spec: str, **kw) -> "ThresholdSweepConfig":
        """From ``"min:max:step"``."""
        try:
            lo, hi, step = (float(v) for v in spec.split(":"))
        except ValueError:
            raise ValueError(f"sweep must look like 0.15:0.50:0.01, got {spec!r}") from None
        return cls(lo, hi, step, **kw)

    def thresholds(self) -> np.ndarray:
        """Grid from p_min to p_max inclusive; built from integer steps so 0.15:0.50:0.01 has 36 points."""
        n = int(math.floor((self.p_max - self.p_min) / self.step + 1e-9)) + 1
        return np.round(self.p_min + self.step * np.arange(n), 10)


@dataclass
class EvalReport:
    thresholds: list[float]
    categories: list[str]
    # curves[k][i]: value at thresholds[i]
    miou_curve: list[float]
    fscore_curve: list[float]
    category_iou_curve: dict[str, list[float]]
    category_fscore_curve: dict[str, list[float]]
    sample_counts: dict[str, int]
    objective: str
    f_average: str
    best_index: int
    extra: dict = field(default_factory=dict)

    @property
    def p_star(self) -> float:
        return self.thresholds[self.best_index]

    @property
    def miou(self) -> float:
        return self.miou_curve[self.best_index]

    @property
    def fscore(self) -> float:
        return self.fscore_curve[self.best_index]

    def objective_at(self, p: float) -> float:
        i = int(np.argmin(np.abs(np.asarray(self.thresholds) - p)))
        if abs(self.thresholds[i] - p) > 1e-9:
            raise KeyError(f"threshold {p} is not on the sweep grid")
        return (self.miou_curve if self.objective == "miou" else self.fscore_curve)[i]

    def category_table(self, index: Optional[int] = None) -> dict[str, dict[str, float]]:
        i = self.best_index if index is None else index
        return {
            c: {"iou": self.category_iou_curve[c][i], "fscore": self.category_fscore_curve[c][i], "samples": self.sample_counts[c]}
            for c in self.categories
        }

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "objective": self.objective,
            "f_average": self.f_average,
            "p_star": self.p_star,
            "miou": self.miou,
            "fscore": self.fscore,
            "per_category": self.category_table(),
            "curve": [
                {"p": p, "miou": m, "fscore": f} for p, m, f in zip(self.thresholds, self.miou_curve, self.fscore_curve)
            ],
            "category_curves": {"iou": self.category_iou_curve, "fscore": self.category_fscore_curve},
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"not an evaluation report (format {d.get('format')!r})")
        curve = d["curve"]
        ps = [row["p"] for row in curve]
        return cls(
            thresholds=ps,
            categories=list(d["per_category"]),
            miou_curve=[row["miou"] for row in curve],
            fscore_curve=[row["fscore"] for row in curve],
            category_iou_curve=d["category_curves"]["iou"],
            category_fscore_curve=d["category_curves"]["fscore"],
            sample_counts={c: v["samples"] for c, v in d["per_category"].items()},
            objective=d["objective"],
            f_average=d["f_average"],
            best_index=ps.index(d["p_star"]),
            extra=d.get("extra", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")


def sweep_thresholds(
    logits: Sequence[np.ndarray],
    labels: Sequence,
    categories: Sequence[str],
    config: ThresholdSweepConfig = ThresholdSweepConfig(),
) -> EvalReport:
    """Score every threshold of the grid and pick the best one.

    Per-category IoU / F are means over that category's samples; mIoU and
    the macro F are unweighted means over categories. Micro F pools the
    voxel counts of all samples. Ties go to the smallest threshold.
    """
    if len(logits) == 0:
        raise ValueError("no samples to evaluate")
    if not len(logits) == len(labels) == len(categories):
        raise ValueError("logits, labels and categories must have equal length")
    ps = config.thresholds()
    cats = sorted(set(categories))
    counts = np.zeros((len(logits), len(ps), 3), dtype=np.int64)  # TP, FP, FN
    for s, (z, g) in enumerate(zip(logits, labels)):
        G = _occupancy(g)
        prob = probability(z)
        if prob.shape != G.shape:
            raise ValueError(f"resolution mismatch: prediction {prob.shape} vs label {G.shape}")
        n_gt = int(np.count_nonzero(G))
        # sort once, then count voxels above each threshold by bisection
        order = np.sort(prob.ravel())
        on_gt = np.sort(prob[G])
        above = order.size - np.searchsorted(order, ps, side="right")
        tp = on_gt.size - np.searchsorted(on_gt, ps, side="right")
        counts[s, :, 0] = tp
        counts[s, :, 1] = above - tp
        counts[s, :, 2] = n_gt - tp

    tp, fp, fn = counts[..., 0], counts[..., 1], counts[..., 2]
    union, fden = tp + fp + fn, 2 * tp + fp + fn
    ious = np.where(union == 0, 1.0, tp / np.maximum(union, 1))
    fs = np.where(fden == 0, 1.0, 2 * tp / np.maximum(fden, 1))
    cat_arr = np.asarray(categories)
    cat_iou = {c: ious[cat_arr == c].mean(axis=0) for c in cats}
    cat_f = {c: fs[cat_arr == c].mean(axis=0) for c in cats}
    miou = np.mean([cat_iou[c] for c in cats], axis=0)
    if config.f_average == "macro":
        fscore = np.mean([cat_f[c] for c in cats], axis=0)
    else:
        T, FP, FN = tp.sum(axis=0), fp.sum(axis=0), fn.sum(axis=0)
        den = 2 * T + FP + FN
        fscore = np.where(den == 0, 1.0, 2 * T / np.maximum(den, 1))
    objective = miou if config.objective == "miou" else fscore
    best = int(np.argmax(objective))  # first maximum = smallest p
    return EvalReport(
        thresholds=[float(p) for p in ps],
        categories=cats,
        miou_curve=[float(v) for v in miou],
        fscore_curve=[float(v) for v in fscore],
        category_iou_curve={c: [float(v) for v in cat_iou[c]] for c in cats},
        category_fscore_curve={c: [float(v) for v in cat_f[c]] for c in cats},
        sample_counts={c: int(np.count_nonzero(cat_arr == c)) for c in cats},
        objective=config.objective,
        f_average=config.f_average,
        best_index=best,
    )


def mean_iou(preds: Sequence, labels: Sequence, categories: Sequence[str]) -> float:
    """Category-balanced mean IoU of already binarized predictions."""
    per: dict[str, list[float]] = {}
    for P, G, c in zip(preds, labels, categories):
        per.setdefault(c, []).append(iou(P, G))
    if not per:
        raise ValueError("no samples to evaluate")
    return float(np.mean([np.mean(v) for v in per.values()]))


def evaluate_split(checkpoint, manifest, sweep: ThresholdSweepConfig = ThresholdSweepConfig(), split: str = "test") -> EvalReport:
    """Run inference on every sample of ``split`` and sweep the thresholds."""
    from .neural.train import infer_entries, load_checkpoint

    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    logits, labels = infer_entries(ckpt, entries)
    report = sweep_thresholds(logits, labels, [e.category for e in entries], sweep)
    report.extra = {"split": split, "samples": len(entries), "checkpoint_epoch": ckpt.epoch}
    return report


# ---------------------------------------------------------------------------
# export

GREEN = (40, 170, 60)
RED = (210, 40, 40)
GREY = (150, 150, 150)


def voxel_colors(pred: np.ndarray, gt: Optional[np.ndarray]) -> np.ndarray:
    """RGB per occupied voxel of ``pred`` (argwhere order): green if in the label, red if not."""
    idx = np.argwhere(pred)
    if gt is None:
        return np.tile(np.array(GREY, dtype=np.uint8), (len(idx), 1))
    ok = gt[tuple(idx.T)]
    return np.where(ok[:, None], np.array(GREEN, np.uint8), np.array(RED, np.uint8)).astype(np.uint8)


_CUBE_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
# outward-facing quads over the corner indexing above
_CUBE_FACES = np.array(
    [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]], dtype=np.int64
)


def _exposed_cubes(pred: np.ndarray):
    """Vertices and faces of the voxel faces not shared with an occupied neighbour."""
    idx = np.argwhere(pred)
    padded = np.pad(pred, 1)
    # neighbour offsets matching _CUBE_FACES order: -x, +x, -y, +y, -z, +z
    offsets = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    verts = (idx[:, None, :] + _CUBE_CORNERS[None]).reshape(-1, 3)
    faces, owners = [], []
    for f, off in enumerate(offsets):
        nb = padded[tuple((idx + 1 + np.array(off)).T)]
        keep = np.flatnonzero(~nb)
        faces.append(keep[:, None] * 8 + _CUBE_FACES[f][None])
        owners.append(keep)
    return verts, np.concatenate(faces), np.concatenate(owners)


def write_ply(path, pred, gt=None) -> None:
    """ASCII PLY cube mesh with per-vertex colours."""
    P = _occupancy(pred)
    G = None if gt is None else _occupancy(gt)
    colors = voxel_colors(P, G)
    verts, faces, _ = _exposed_cubes(P)
    vcol = np.repeat(colors, 8, axis=0)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{v[0]:g} {v[1]:g} {v[2]:g} {c[0]} {c[1]} {c[2]}" for v, c in zip(verts, vcol)]
    lines += ["4 " + " ".join(str(i) for i in f) for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def write_obj(path, pred, gt=None) -> None:
    """Wavefront OBJ cube mesh; colours use the common ``v x y z r g b`` extension."""
    P = _occupancy(pred)
    G = None if gt is None else _occupancy(gt)
    colors = voxel_colors(P, G) / 255.0
    verts, faces, _ = _exposed_cubes(P)
    vcol = np.repeat(colors, 8, axis=0)
    lines = [f"v {v[0]:g} {v[1]:g} {v[2]:g} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}" for v, c in zip(verts, vcol)]
    lines += ["f " + " ".join(str(i + 1) for i in f) for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def render_voxels(pred, gt=None, size: int = 256, azimuth_deg: float = 35.0, elevation_deg: float = 30.0) -> np.ndarray:
    """Depth-shaded orthographic RGB render (uint8, white background)."""
    from .synth import camera_axes

    P = _occupancy(pred)
    G = None if gt is None else _occupancy(gt)
    D = P.shape[0]
    colors = voxel_colors(P, G).astype(np.float64)
    idx = np.argwhere(P)
    view, right, up = camera_axes(math.radians(azimuth_deg), math.radians(elevation_deg))
    sub = 4
    offs = (np.arange(sub) + 0.5) / sub
    grid = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
    pts = (idx[:, None, :] + grid[None] - D / 2).reshape(-1, 3)
    owner = np.repeat(np.arange(len(idx)), len(grid))
    radius = D * math.sqrt(3) / 2
    scale = 0.95 * size / (2 * radius)
    col = np.floor(size / 2 + scale * (pts @ right)).astype(np.int64)
    row = np.floor(size / 2 - scale * (pts @ up)).astype(np.int64)
    depth = pts @ view
    keep = (col >= 0) & (col < size) & (row >= 0) & (row < size)
    pix, depth, owner = row[keep] * size + col[keep], depth[keep], owner[keep]
    img = np.full((size * size, 3), 255.0)
    if len(pix):
        order = np.lexsort((depth, pix))
        last = np.flatnonzero(np.r_[pix[order][1:] != pix[order][:-1], True])
        win = order[last]
        shade = 0.45 + 0.55 * (depth[win] + radius) / (2 * radius)
        img[pix[win]] = colors[owner[win]] * shade[:, None]
    return np.clip(img, 0, 255).astype(np.uint8).reshape(size, size, 3)


def write_png(path, pred, gt=None, size: int = 256) -> None:
    from PIL import Image

    Image.fromarray(render_voxels(pred, gt, size)).save(path)


EXPORTERS = {"ply": write_ply, "obj": write_obj, "png": write_png}


def export(path, pred, gt=None, fmt: Optional[str] = None) -> None:
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    if fmt not in EXPORTERS:
        raise ValueError(f"unknown export format {fmt!r}; expected one of {sorted(EXPORTERS)}")
    EXPORTERS[fmt](path, pred, gt)
