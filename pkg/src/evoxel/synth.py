"""Synthetic desk-scale dataset: voxel objects scanned by a virtual event camera.

The camera orbits the object's vertical axis at a fixed elevation and renders
an orthographic, depth-shaded silhouette. Events come from an idealised
per-pixel reference-level model with contrast threshold ``C``.

Camera convention (shared with the augmentation code): at azimuth 0 the camera
sits on the -y side of the object, image columns run along +x and image rows
run against +z. Azimuth increases counter-clockwise seen from above.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .events import CATEGORIES, EventStream
from .io import SPLITS, write_events, write_voxels
from .voxels import VoxelGrid

log = logging.getLogger(__name__)

FAMILIES = ("box", "ell", "cross", "sphere-shell", "random-union")

# (family, parameter overrides) per category; sizes are fractions of the grid edge
CATEGORY_SHAPES: dict[str, tuple[str, dict]] = {
    "airplane": ("cross", {"bars": ((0.80, 0.12, 0.12), (0.16, 0.75, 0.05))}),
    "bench": ("ell", {"base": (0.75, 0.30, 0.10), "back": 0.30, "back_thickness": 0.07}),
    "cabinet": ("box", {"size": (0.45, 0.40, 0.70)}),
    "car": ("random-union", {"boxes": ((0.70, 0.35, 0.20), (0.35, 0.30, 0.18)), "stack": True}),
    "chair": ("ell", {"base": (0.45, 0.45, 0.10), "back": 0.50, "back_thickness": 0.08}),
    "displayer": ("box", {"size": (0.65, 0.08, 0.45)}),
    "lamp": ("cross", {"bars": ((0.08, 0.08, 0.75), (0.40, 0.10, 0.08), (0.10, 0.40, 0.08))}),
    "speaker": ("box", {"size": (0.35, 0.35, 0.60)}),
    "rifle": ("box", {"size": (0.85, 0.08, 0.16)}),
    "sofa": ("ell", {"base": (0.75, 0.40, 0.22), "back": 0.42, "back_thickness": 0.14}),
    "table": ("random-union", {"boxes": ((0.70, 0.50, 0.08), (0.10, 0.10, 0.40)), "stack": True}),
    "telephone": ("box", {"size": (0.30, 0.16, 0.10)}),
    "watercraft": ("sphere-shell", {"radius": 0.36, "thickness": 0.12}),
}

JITTER = 0.15


# ---------------------------------------------------------------------------
# objects


def _extent(rng: np.random.Generator, frac: float, D: int, jitter: float, lo: int = 2) -> int:
    return int(np.clip(round(frac * D * rng.uniform(1 - jitter, 1 + jitter)), lo, D))


def _centered(length: int, D: int) -> int:
    return (D - length) // 2


def family_params(seed: int, resolution: int, family: str, overrides: Optional[dict] = None) -> dict:
    """Concrete integer geometry for one object, drawn from ``seed``.

    Exposed separately from :func:`generate_object` so tests can rebuild the
    occupancy from the parameters.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown shape family {family!r}; expected one of {FAMILIES}")
    D = resolution
    if D < 4:
        raise ValueError("resolution must be >= 4")
    o = dict(overrides or {})
    rng = np.random.default_rng([seed, D, FAMILIES.index(family)])
    j = o.get("jitter", JITTER)

    if family == "box":
        size = o.get("size") or tuple(rng.uniform(0.25, 0.7, 3))
        dims = [_extent(rng, f, D, j) for f in size]
        return {"family": family, "boxes": [(tuple(_centered(d, D) for d in dims), tuple(dims))]}

    if family == "ell":
        bx, by, bz = o.get("base") or (rng.uniform(0.4, 0.75), rng.uniform(0.3, 0.5), rng.uniform(0.08, 0.2))
        back = o.get("back") or rng.uniform(0.3, 0.5)
        back_t = o.get("back_thickness") or rng.uniform(0.06, 0.12)
        lx, ly, lz = _extent(rng, bx, D, j), _extent(rng, by, D, j), _extent(rng, bz, D, j)
        hz, ty = _extent(rng, back, D, j), min(_extent(rng, back_t, D, j), ly)
        total_z = min(lz + hz, D)
        x0, y0, z0 = _centered(lx, D), _centered(ly, D), _centered(total_z, D)
        base = ((x0, y0, z0), (lx, ly, lz))
        # back rests on the base along its +y edge
        back_box = ((x0, y0 + ly - ty, z0 + lz), (lx, ty, total_z - lz))
        boxes = [base] + ([back_box] if total_z > lz else [])
        return {"family": family, "boxes": boxes}

    if family == "cross":
        bars = o.get("bars") or ((rng.uniform(0.5, 0.85), 0.12, 0.12), (0.12, rng.uniform(0.5, 0.85), 0.12))
        boxes = []
        for bar in bars:
            dims = tuple(_extent(rng, f, D, j) for f in bar)
            boxes.append((tuple(_centered(d, D) for d in dims), dims))
        if o.get("bars") and len(bars) == 3:
            # lamp-style: the horizontal bars form a foot at the bottom of the pole
            (p0, pd) = boxes[0]
            boxes = [boxes[0]] + [((b0[0], b0[1], p0[2]), bd) for b0, bd in boxes[1:]]
        return {"family": family, "boxes": boxes}

    if family == "sphere-shell":
        r = o.get("radius") or rng.uniform(0.3, 0.45)
        t = o.get("thickness") or rng.uniform(0.12, 0.2)
        r_out = min(r * D * rng.uniform(1 - j, 1 + j), D / 2 - 0.01)
        r_in = max(r_out - max(t * D * rng.uniform(1 - j, 1 + j), 1.75), 0.0)
        return {"family": family, "center": (D / 2, D / 2, D / 2), "r_in": float(r_in), "r_out": float(r_out)}

    # random-union: a chain of boxes, each anchored inside the previous one
    if o.get("boxes"):
        specs = list(o["boxes"])
        if o.get("stack"):
            return {"family": family, "boxes": _stacked(rng, specs, D, j)}
    else:
        specs = [tuple(rng.uniform(0.15, 0.5, 3)) for _ in range(int(rng.integers(2, 5)))]
    boxes = []
    for k, spec in enumerate(specs):
        dims = tuple(_extent(rng, f, D, j) for f in spec)
        if k == 0:
            origin = tuple(_centered(d, D) for d in dims)
        else:
            (po, pd) = boxes[-1]
            anchor = [int(rng.integers(po[a], po[a] + pd[a])) for a in range(3)]
            # keep the box inside the grid while still overlapping its predecessor on every axis
            origin = tuple(
                int(np.clip(anchor[a] - rng.integers(0, dims[a]),
                            max(po[a] - dims[a] + 1, 0), min(po[a] + pd[a] - 1, D - dims[a])))
                for a in range(3)
            )
        boxes.append((origin, dims))
    return {"family": family, "boxes": boxes}


def _stacked(rng, specs, D, j):
    """Car/table layout: first box is the body or top, second sits on or under it."""
    (bx, by, bz), (sx, sy, sz) = specs[0], specs[1]
    body = tuple(_extent(rng, f, D, j) for f in (bx, by, bz))
    part = tuple(_extent(rng, f, D, j) for f in (sx, sy, sz))
    total_z = min(body[2] + part[2], D)
    x0, y0, z0 = _centered(body[0], D), _centered(body[1], D), _centered(total_z, D)
    if sz > bz:
        # table: four legs under the top slab
        top = ((x0, y0, z0 + part[2]), (body[0], body[1], total_z - part[2]))
        legs = []
        for lx in (x0, x0 + body[0] - part[0]):
            for ly in (y0, y0 + body[1] - part[1]):
                legs.append(((lx, ly, z0), (part[0], part[1], part[2] + 1)))
        return [top] + legs
    body_box = ((x0, y0, z0), (body[0], body[1], body[2]))
    cabin = ((x0 + int(rng.integers(0, max(1, body[0] - part[0]))), _centered(part[1], D), z0 + body[2]),
             (part[0], part[1], total_z - body[2]))
    return [body_box, cabin]


def occupancy_from_params(params: dict, resolution: int) -> np.ndarray:
    D = resolution
    occ = np.zeros((D, D, D), dtype=bool)
    if params["family"] == "sphere-shell":
        c = np.arange(D) + 0.5
        X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
        cx, cy, cz = params["center"]
        dist = np.sqrt((X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2)
        return (dist >= params["r_in"]) & (dist <= params["r_out"])
    for (x0, y0, z0), (lx, ly, lz) in params["boxes"]:
        occ[max(x0, 0): x0 + lx, max(y0, 0): y0 + ly, max(z0, 0): z0 + lz] = True
    return occ


def generate_object(seed: int, resolution: int, family: str, overrides: Optional[dict] = None, **meta) -> VoxelGrid:
    """Deterministic connected occupancy grid from ``(seed, resolution, family)``."""
    params = family_params(seed, resolution, family, overrides)
    return VoxelGrid(occupancy_from_params(params, resolution), **meta)


def generate_category_object(seed: int, resolution: int, category: str, object_id: Optional[str] = None) -> VoxelGrid:
    family, overrides = CATEGORY_SHAPES[category]
    return generate_object(seed, resolution, family, overrides, category=category, object_id=object_id)


# ---------------------------------------------------------------------------
# rendering and the event model


@dataclass(frozen=True)
class ScanConfig:
    seed: int
    object: VoxelGrid
    sensor_width: int = 64
    sensor_height: int = 64
    duration: float = 0.5
    frame_rate: float = 400.0
    contrast_threshold: float = 0.1
    elevation_deg: float = 30.0
    revolutions: float = 1.0
    subsamples: int = 2

    def __post_init__(self):
        if self.frame_rate * self.duration < 2:
            raise ValueError("frame_rate * duration must be >= 2")
        if not self.contrast_threshold > 0:
            raise ValueError("contrast_threshold must be positive")
        if self.sensor_width < 1 or self.sensor_height < 1:
            raise ValueError("sensor geometry must be positive")

    @property
    def render_times(self) -> np.ndarray:
        n = int(math.floor(self.frame_rate * self.duration + 1e-9))
        return np.linspace(0.0, n / self.frame_rate, n + 1)


def camera_axes(azimuth: float, elevation: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(towards-camera, image-right, image-up) unit vectors."""
    ca, sa, ce, se = math.cos(azimuth), math.sin(azimuth), math.cos(elevation), math.sin(elevation)
    view = np.array([sa * ce, -ca * ce, se])
    right = np.array([ca, sa, 0.0])
    up = np.array([-sa * se, ca * se, ce])
    return view, right, up


def surface_points(occupancy: np.ndarray, subsamples: int = 2) -> np.ndarray:
    """Sub-voxel sample points of boundary voxels, in object-centred coordinates."""
    D = occupancy.shape[0]
    padded = np.pad(occupancy, 1)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    surface = occupancy & ~interior
    centres = np.argwhere(surface).astype(np.float64) + 0.5 - D / 2
    offs = (np.arange(subsamples) + 0.5) / subsamples - 0.5
    grid = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
    return (centres[:, None, :] + grid[None, :, :]).reshape(-1, 3)


def render_intensity(points: np.ndarray, D: int, width: int, height: int, azimuth: float, elevation: float) -> np.ndarray:
    """Depth-shaded orthographic silhouette in [0, 1]; background is 0."""
    view, right, up = camera_axes(azimuth, elevation)
    radius = D * math.sqrt(3) / 2
    scale = 0.95 * min(width, height) / (2 * radius)
    col = np.floor(width / 2 + scale * (points @ right)).astype(np.int64)
    row = np.floor(height / 2 - scale * (points @ up)).astype(np.int64)
    depth = points @ view
    keep = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    zbuf = np.full(width * height, -np.inf)
    np.maximum.at(zbuf, row[keep] * width + col[keep], depth[keep])
    hit = np.isfinite(zbuf)
    img = np.zeros(width * height)
    img[hit] = 0.25 + 0.75 * (zbuf[hit] + radius) / (2 * radius)
    return img.reshape(height, width)


def events_from_intensity(frames: np.ndarray, times: np.ndarray, contrast_threshold: float, **stream_kw) -> EventStream:
    """Per-pixel reference-level event model.

    Whenever a pixel's intensity has moved ``k`` whole multiples of the
    threshold away from its reference level, ``k`` events with the sign of the
    change are emitted at the linearly interpolated crossing times, and the
    reference moves by ``k * C``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n_frames, H, W = frames.shape
    C = float(contrast_threshold)
    ref = frames[0].ravel().copy()
    ts, xs, ys, ps = [], [], [], []
    for k in range(1, n_frames):
        cur = frames[k].ravel()
        diff = cur - ref
        mag = np.abs(diff)
        # tolerance so exact multiples (0.3 / 0.1 = 2.9999999999999996) still count
        counts = np.floor(mag / C + 1e-9).astype(np.int64)
        active = np.flatnonzero(counts)
        if len(active) == 0:
            continue
        reps = counts[active]
        pix = np.repeat(active, reps)
        starts = np.cumsum(reps) - reps
        j = np.arange(len(pix)) - np.repeat(starts, reps) + 1
        t0, t1 = times[k - 1], times[k]
        frac = np.minimum(j * C / mag[pix], 1.0)
        t = t0 + (t1 - t0) * frac
        sign = np.sign(diff[pix]).astype(np.int8)
        order = np.argsort(t, kind="stable")
        ts.append(t[order])
        xs.append(pix[order] % W)
        ys.append(pix[order] // W)
        ps.append(sign[order])
        ref[active] += np.sign(diff[active]) * reps * C
    if ts:
        cat = np.concatenate
        return EventStream(cat(ts), cat(xs), cat(ys), cat(ps), W, H, float(times[-1]), **stream_kw)
    return EventStream.empty(W, H, float(times[-1]), **stream_kw)


def render_orbit(config: ScanConfig) -> tuple[np.ndarray, np.ndarray]:
    """Intensity frames along the orbit and their timestamps."""
    occ = config.object.occupancy
    pts = surface_points(occ, config.subsamples)
    times = config.render_times
    elev = math.radians(config.elevation_deg)
    frames = np.stack([
        render_intensity(
            pts, occ.shape[0], config.sensor_width, config.sensor_height,
            2 * math.pi * config.revolutions * t / config.duration, elev,
        )
        for t in times
    ])
    return frames, times


def simulate_scan(config: ScanConfig) -> EventStream:
    frames, times = render_orbit(config)
    stream = events_from_intensity(
        frames, times, config.contrast_threshold,
        category_label=config.object.category, object_id=config.object.object_id,
    )
    if stream.duration != config.duration:
        stream = EventStream(stream.t, stream.x, stream.y, stream.p, stream.sensor_width, stream.sensor_height,
                             max(config.duration, stream.duration), stream.category_label, stream.object_id)
    return stream


# ---------------------------------------------------------------------------
# dataset trees


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` samples over the split ratios."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError("split ratios must be three non-negative numbers")
    exact = n * ratios / ratios.sum()
    counts = np.floor(exact + 1e-9).astype(int)
    rem = exact - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _scan_one(job):
    out_dir, split, category, index, seed, resolution, scan_kw = job
    obj_seed = int(np.random.SeedSequence([seed, CATEGORIES.index(category), index]).generate_state(1)[0])
    object_id = f"{category}_{index:04d}"
    grid = generate_category_object(obj_seed, resolution, category, object_id)
    stream = simulate_scan(ScanConfig(seed=obj_seed, object=grid, **scan_kw))
    target = Path(out_dir) / split / category
    target.mkdir(parents=True, exist_ok=True)
    write_events(stream, target / f"{object_id}.evb")
    write_voxels(grid, target / f"{object_id}.vox.json")
    return len(stream)


def build_dataset(
    out_dir,
    count: int,
    seed: int,
    resolution: int = 32,
    split_ratios: Sequence[float] = (0.8, 0.1, 0.1),
    categories: Sequence[str] = CATEGORIES,
    workers: int = 1,
    **scan_kw,
) -> dict[str, int]:
    """Write ``count`` scanned objects per category into a split tree."""
    jobs = []
    for category in categories:
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        n_train, n_val, _ = split_counts(count, split_ratios)
        for i in range(count):
            split = SPLITS[0] if i < n_train else SPLITS[1] if i < n_train + n_val else SPLITS[2]
            jobs.append((str(out_dir), split, category, i, seed, resolution, scan_kw))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            n_events = list(pool.map(_scan_one, jobs))
    else:
        n_events = [_scan_one(j) for j in jobs]
    totals = {s: 0 for s in SPLITS}
    for job in jobs:
        totals[job[1]] += 1
    log.info("wrote %d samples (%d events) to %s", len(jobs), sum(n_events), out_dir)
    return totals
