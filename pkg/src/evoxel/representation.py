"""Event Frame stacks, the Sobel Event Frame, and network-input preparation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .events import EventStream, TimeWindowPartition, last_event_indices
from .io import read_array, write_array
from .voxels import VoxelGrid

log = logging.getLogger(__name__)

MODES = ("pos", "neg", "last", "any", "sep")
VALUE_RANGES = ("binary01", "signed1", "unit_interval", "greyscale255")
AUGMENT_OPS = ("flip_h", "flip_v", "rotate_180", "polarity_invert", "temporal_reverse")

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True, eq=False)
class FrameStack:
    """``frames`` has shape (planes, H, W); Sep stacks interleave F+_0, F-_0, F+_1, ..."""

    frames: np.ndarray
    mode: str
    value_range: str
    sobel: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.value_range not in VALUE_RANGES:
            raise ValueError(f"unknown value range {self.value_range!r}")
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3:
            raise ValueError("frames must be (planes, H, W)")
        if self.mode == "sep" and f.shape[0] % 2:
            raise ValueError("sep stacks need an even plane count")
        object.__setattr__(self, "frames", f)

    @property
    def window_count(self) -> int:
        return self.frames.shape[0] // (2 if self.mode == "sep" else 1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    def with_frames(self, frames: np.ndarray, **changes) -> "FrameStack":
        return replace(self, frames=frames, **changes)

    def check_range(self) -> bool:
        f = self.frames
        if self.value_range == "binary01":
            return bool(np.isin(f, (0.0, 1.0)).all())
        if self.value_range == "signed1":
            return bool(np.isin(f, (-1.0, 0.0, 1.0)).all())
        hi = 1.0 if self.value_range == "unit_interval" else 255.0
        return bool(((f >= 0) & (f <= hi)).all())


# ---------------------------------------------------------------------------
# event frames


def make_frames(
    stream: EventStream,
    window_length: float,
    mode: str,
    window_count: Optional[int] = None,
    start_time: float = 0.0,
) -> FrameStack:
    """Render one plane per time window (two for ``sep``).

    pos/neg: 1 where the pixel's last event in the window has that polarity.
    last: the last event's polarity. any: 1 where any event fired.
    sep: per-window F+ / F- planes, 1 where any event of that polarity fired.
    Pixels without events are 0 in every mode.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"unknown event frame mode {mode!r}; expected one of {MODES}")
    if window_count is None:
        part = TimeWindowPartition.covering(stream.duration - start_time, window_length, start_time)
    else:
        part = TimeWindowPartition(window_length, window_count, start_time)
    n, H, W = part.window_count, stream.sensor_height, stream.sensor_width
    win = part.window_index(stream.t)
    pix = stream.y * W + stream.x
    p = stream.p.astype(np.float64)

    if mode == "sep":
        out = np.zeros((n, 2, H * W))
        pos = p > 0
        out[win[pos], 0, pix[pos]] = 1.0
        out[win[~pos], 1, pix[~pos]] = 1.0
        return FrameStack(out.reshape(2 * n, H, W), mode, "binary01")

    out = np.zeros((n, H * W))
    if mode == "any":
        out[win, pix] = 1.0
        return FrameStack(out.reshape(n, H, W), mode, "binary01")

    last = last_event_indices(win * (H * W) + pix)
    lp = p[last]
    if mode == "pos":
        vals, vr = (lp > 0).astype(np.float64), "binary01"
    elif mode == "neg":
        vals, vr = (lp < 0).astype(np.float64), "binary01"
    else:
        vals, vr = lp, "signed1"
    out[win[last], pix[last]] = vals
    return FrameStack(out.reshape(n, H, W), mode, vr)


# ---------------------------------------------------------------------------
# Sobel Event Frame


def correlate3x3(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``out[y, x] = sum_{h,w} plane[y+h, x+w] * kernel[h+1, w+1]`` with zero padding."""
    H, W = plane.shape
    padded = np.pad(plane, 1)
    out = np.zeros((H, W), dtype=np.result_type(plane, np.float64))
    for h in range(3):
        for w in range(3):
            k = kernel[h, w]
            if k:
                out += k * padded[h: h + H, w: w + W]
    return out


def sobel_magnitude(plane: np.ndarray) -> np.ndarray:
    gx = correlate3x3(plane, SOBEL_X)
    gy = correlate3x3(plane, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy)


def sobel_frames(stack: FrameStack, normalization: str = "per_plane") -> FrameStack:
    """Gradient magnitude of every plane, rescaled so the maximum maps to 255.

    ``normalization="global"`` uses one maximum for the whole stack instead.
    All-zero planes stay zero.
    """
    if stack.value_range not in ("binary01", "signed1"):
        raise ValueError(f"sobel_frames expects event planes, got {stack.value_range}")
    if normalization not in ("per_plane", "global"):
        raise ValueError(f"unknown normalization {normalization!r}")
    mags = np.stack([sobel_magnitude(pl) for pl in stack.frames]) if len(stack.frames) else stack.frames.copy()
    if normalization == "per_plane":
        peak = mags.max(axis=(1, 2), keepdims=True) if mags.size else mags
    else:
        peak = np.full((1, 1, 1), mags.max() if mags.size else 0.0)
    scale = np.divide(255.0, peak, out=np.zeros_like(peak, dtype=np.float64), where=peak > 0)
    return stack.with_frames(mags * scale, value_range="greyscale255", sobel=True)


# ---------------------------------------------------------------------------
# resize / normalize


def _bins(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def resize_stack(stack: FrameStack, size: int | tuple[int, int]) -> FrameStack:
    """Downsample every plane.

    Integer factors pool blockwise: event planes keep the largest-magnitude
    value of each block (ties favour +1) so isolated events survive;
    greyscale planes take the block mean. Other sizes fall back to bilinear
    interpolation. Upscaling is rejected.
    """
    th, tw = (size, size) if isinstance(size, int) else size
    P, H, W = stack.frames.shape
    if th > H or tw > W:
        raise ValueError(f"cannot upscale {H}x{W} to {th}x{tw}")
    if (th, tw) == (H, W):
        return stack
    f = stack.frames
    event_planes = stack.value_range in ("binary01", "signed1")
    if H % th == 0 and W % tw == 0:
        fh, fw = H // th, W // tw
        blocks = f.reshape(P, th, fh, tw, fw)
        if event_planes:
            hi = blocks.max(axis=(2, 4))
            lo = blocks.min(axis=(2, 4))
            out = np.where(hi >= -lo, hi, lo)
        else:
            out = blocks.mean(axis=(2, 4))
        return stack.with_frames(out)
    if event_planes:
        rows, cols = _bins(H, th), _bins(W, tw)
        hi = np.maximum.reduceat(np.maximum.reduceat(f, rows, axis=1), cols, axis=2)
        lo = np.minimum.reduceat(np.minimum.reduceat(f, rows, axis=1), cols, axis=2)
        return stack.with_frames(np.where(hi >= -lo, hi, lo))
    from scipy.ndimage import zoom

    out = zoom(f, (1, th / H, tw / W), order=1, mode="nearest", grid_mode=True)
    hi = 255.0 if stack.value_range == "greyscale255" else 1.0
    return stack.with_frames(np.clip(out, 0.0, hi))


def normalize_unit(stack: FrameStack) -> FrameStack:
    vr = stack.value_range
    if vr == "greyscale255":
        f = stack.frames / 255.0
    elif vr == "signed1":
        f = (stack.frames + 1.0) / 2.0
    else:
        f = stack.frames
    return stack.with_frames(f, value_range="unit_interval")


# ---------------------------------------------------------------------------
# augmentation


def augment(
    stack: FrameStack,
    label: VoxelGrid,
    ops: Iterable[str],
    seed: int,
    probability: float = 0.5,
) -> tuple[FrameStack, VoxelGrid]:
    """Randomly apply label-consistent augmentations.

    Each requested op fires independently with ``probability`` using an RNG
    seeded by ``seed``. Under the scanner's camera convention image columns
    follow the object's x axis and image rows its z axis, so ``flip_h`` mirrors
    the label along x and ``flip_v`` along z (exact for a zero-elevation orbit).
    """
    ops = list(ops)
    for op in ops:
        if op not in AUGMENT_OPS:
            raise ValueError(f"unknown augmentation {op!r}")
    rng = np.random.default_rng(seed)
    fire = rng.random(len(ops)) < probability
    for op, on in zip(ops, fire):
        if on:
            stack, label = apply_op(stack, label, op)
    return stack, label


def apply_op(stack: FrameStack, label: VoxelGrid, op: str) -> tuple[FrameStack, VoxelGrid]:
    f, occ = stack.frames, label.occupancy
    if op == "flip_h":
        return stack.with_frames(f[:, :, ::-1].copy()), label.replace(occ[::-1, :, :])
    if op == "flip_v":
        return stack.with_frames(f[:, ::-1, :].copy()), label.replace(occ[:, :, ::-1])
    if op == "rotate_180":
        return apply_op(*apply_op(stack, label, "flip_h"), "flip_v")
    if op == "temporal_reverse":
        if stack.mode == "sep":
            n = stack.window_count
            rev = f.reshape(n, 2, *f.shape[1:])[::-1].reshape(f.shape)
        else:
            rev = f[::-1]
        return stack.with_frames(rev.copy()), label
    if op == "polarity_invert":
        if stack.sobel or stack.value_range not in ("binary01", "signed1"):
            log.warning("polarity_invert must run before sobel_frames/normalization; skipped")
            return stack, label
        if stack.mode == "last":
            return stack.with_frames(-f), label
        if stack.mode == "sep":
            n = stack.window_count
            swapped = f.reshape(n, 2, *f.shape[1:])[:, ::-1].reshape(f.shape)
            return stack.with_frames(swapped.copy()), label
        if stack.mode in ("pos", "neg"):
            # an inverted stream's last-positive plane is the original last-negative plane,
            # which a single-mode stack does not carry
            log.warning("polarity_invert on a %s stack needs the opposite-mode planes; skipped", stack.mode)
            return stack, label
        log.warning("polarity_invert has no effect on %s stacks; skipped", stack.mode)
        return stack, label
    raise ValueError(f"unknown augmentation {op!r}")


# ---------------------------------------------------------------------------
# pipeline + container


def represent(
    stream: EventStream,
    window_length: float,
    mode: str,
    sobel: bool = True,
    size: Optional[int] = None,
    normalization: str = "per_plane",
    window_count: Optional[int] = None,
) -> FrameStack:
    """make_frames -> (sobel_frames) -> resize_stack -> normalize_unit."""
    stack = make_frames(stream, window_length, mode, window_count=window_count)
    if sobel:
        stack = sobel_frames(stack, normalization)
    if size is not None:
        stack = resize_stack(stack, size)
    return normalize_unit(stack)


@dataclass(frozen=True)
class RepresentationConfig:
    """Knobs of the stream -> network-input pipeline.

    Training renders raw planes once (``frames``) and finishes them per batch
    (``finish``) so augmentation can sit between the two.
    """

    mode: str = "pos"
    sobel: bool = True
    window_length: float = 0.03125
    window_count: Optional[int] = 16
    size: Optional[int] = 32
    normalization: str = "per_plane"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown event frame mode {self.mode!r}")
        if not self.window_length > 0:
            raise ValueError("window_length must be positive")
        if self.normalization not in ("per_plane", "global"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def channels(self) -> int:
        return 2 if self.mode == "sep" else 1

    def frames(self, stream: EventStream) -> FrameStack:
        return make_frames(stream, self.window_length, self.mode, window_count=self.window_count)

    def finish(self, stack: FrameStack) -> np.ndarray:
        if self.sobel:
            stack = sobel_frames(stack, self.normalization)
        if self.size is not None:
            stack = resize_stack(stack, self.size)
        return stack_to_tensor(normalize_unit(stack))

    def tensor(self, stream: EventStream) -> np.ndarray:
        return self.finish(self.frames(stream))


def stack_to_tensor(stack: FrameStack) -> np.ndarray:
    """Network view (channels, time, H, W): 1 channel, or 2 (F+, F-) for sep."""
    f = stack.frames
    if stack.mode == "sep":
        n = stack.window_count
        return np.ascontiguousarray(f.reshape(n, 2, *f.shape[1:]).transpose(1, 0, 2, 3))
    return f[None]


def write_stack(stack: FrameStack, path) -> None:
    header = {
        "format": "EVFS1",
        "mode": stack.mode,
        "n": stack.window_count,
        "H": stack.frames.shape[1],
        "W": stack.frames.shape[2],
        "value_range": stack.value_range,
        "sobel": stack.sobel,
    }
    write_array(path, header, stack.frames)


def read_stack(path) -> FrameStack:
    header, arr = read_array(path)
    if header.get("format") != "EVFS1":
        raise ValueError(f"{path}: not a frame stack container")
    return FrameStack(arr.astype(np.float64), header["mode"], header["value_range"], bool(header.get("sobel")))
