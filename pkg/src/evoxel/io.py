"""On-disk formats: ``.evt`` text events, ``.evb`` binary events, bit-packed
voxel grids, JSON-headed float32 array containers and the dataset tree."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .events import CATEGORIES, EventStream
from .voxels import VoxelGrid

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

EVB_MAGIC = b"EVB1"
EVT_MAGIC = "EVT1"
VOX_FORMAT = "VOX1"
EVB_HEADER = struct.Struct("<4sHHIf")
EVB_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
SPLITS = ("train", "val", "test")

assert EVB_HEADER.size == 16 and EVB_RECORD.itemsize == 13


class FormatError(ValueError):
    """Base class for parse errors; ``line`` or ``offset`` locates the fault."""

    def __init__(self, message: str, *, path=None, line: Optional[int] = None, offset: Optional[int] = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.message = message
        self.path = path
        self.line = line
        self.offset = offset


class MalformedHeaderError(FormatError):
    pass


class MalformedRecordError(FormatError):
    pass


class OutOfBoundsError(FormatError):
    pass


class NonMonotoneError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PayloadLengthError(FormatError):
    pass


class PaddingBitsError(FormatError):
    pass


# ---------------------------------------------------------------------------
# events


def _f32_ceil(value: float) -> float:
    """Smallest float32 not below ``value``, so a stored duration still covers every event."""
    f = np.float32(value)
    if float(f) < value:
        f = np.nextafter(f, np.float32(np.inf))
    return float(f)


def write_events(stream: EventStream, path: PathLike, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "evb":
        _write_evb(stream, path)
    elif fmt == "evt":
        _write_evt(stream, path)
    else:
        raise ValueError(f"unknown event format {fmt!r}")


def read_events(path: PathLike, format: Optional[str] = None, **meta) -> EventStream:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "evb":
        return _read_evb(path, **meta)
    if fmt == "evt":
        return _read_evt(path, **meta)
    raise ValueError(f"unknown event format {fmt!r}")


def _write_evb(stream: EventStream, path: Path) -> None:
    if stream.sensor_width > 0xFFFF or stream.sensor_height > 0xFFFF:
        raise ValueError("sensor geometry does not fit in u16")
    rec = np.empty(len(stream), dtype=EVB_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    header = EVB_HEADER.pack(
        EVB_MAGIC, stream.sensor_width, stream.sensor_height, len(stream), _f32_ceil(stream.duration)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def _read_evb(path: Path, **meta) -> EventStream:
    data = path.read_bytes()
    if len(data) < EVB_HEADER.size:
        raise MalformedHeaderError(f"file shorter than the {EVB_HEADER.size}-byte header", path=path, offset=len(data))
    magic, width, height, count, duration = EVB_HEADER.unpack_from(data, 0)
    if magic != EVB_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}", path=path, offset=0)
    if width == 0 or height == 0 or not math.isfinite(duration) or duration < 0:
        raise MalformedHeaderError("invalid geometry or duration", path=path, offset=4)
    payload = len(data) - EVB_HEADER.size
    if payload != count * EVB_RECORD.itemsize:
        raise TruncatedPayloadError(
            f"header declares {count} events ({count * EVB_RECORD.itemsize} bytes), payload has {payload} bytes",
            path=path,
            offset=EVB_HEADER.size + min(payload, count * EVB_RECORD.itemsize),
        )
    rec = np.frombuffer(data, dtype=EVB_RECORD, count=count, offset=EVB_HEADER.size)
    t = rec["t"].astype(np.float64)
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    p = rec["p"].astype(np.int8)

    def rec_offset(i):
        return EVB_HEADER.size + int(i) * EVB_RECORD.itemsize

    bad = np.flatnonzero(~np.isfinite(t) | (t < 0) | (t > duration))
    if len(bad):
        raise OutOfBoundsError(f"timestamp {t[bad[0]]} outside [0, {duration}]", path=path, offset=rec_offset(bad[0]))
    bad = np.flatnonzero((x >= width) | (y >= height))
    if len(bad):
        raise OutOfBoundsError(
            f"pixel ({x[bad[0]]}, {y[bad[0]]}) outside {width}x{height}", path=path, offset=rec_offset(bad[0])
        )
    bad = np.flatnonzero((p != 1) & (p != -1))
    if len(bad):
        raise OutOfBoundsError(f"polarity {p[bad[0]]} not in {{+1, -1}}", path=path, offset=rec_offset(bad[0]))
    bad = np.flatnonzero(np.diff(t) < 0)
    if len(bad):
        raise NonMonotoneError("timestamps decrease", path=path, offset=rec_offset(bad[0] + 1))
    return EventStream(t, x, y, p, width, height, float(duration), **meta)


def _write_evt(stream: EventStream, path: Path) -> None:
    lines = [f"{EVT_MAGIC} {stream.sensor_width} {stream.sensor_height} {stream.duration:.9g}"]
    lines.extend(
        f"{t:.9g} {x} {y} {p}" for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist())
    )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_evt(path: Path, **meta) -> EventStream:
    with open(path, "r", encoding="ascii", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedHeaderError("empty file", path=path, line=1)
    head = lines[0].split(" ")
    try:
        if len(head) != 4 or head[0] != EVT_MAGIC:
            raise ValueError
        width, height, duration = int(head[1]), int(head[2]), float(head[3])
        if width <= 0 or height <= 0 or not duration >= 0:
            raise ValueError
    except ValueError:
        raise MalformedHeaderError(f"expected '{EVT_MAGIC} <width> <height> <duration_s>'", path=path, line=1) from None

    n = len(lines) - 1
    t = np.empty(n)
    x = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    p = np.empty(n, dtype=np.int8)
    prev = -math.inf
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.split(" ")
        try:
            if len(parts) != 4:
                raise ValueError
            ti, xi, yi, pi = float(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError:
            raise MalformedRecordError(f"expected '<t> <x> <y> <p>', got {line!r}", path=path, line=lineno) from None
        if not (0 <= xi < width and 0 <= yi < height):
            raise OutOfBoundsError(f"pixel ({xi}, {yi}) outside {width}x{height}", path=path, line=lineno)
        if pi not in (1, -1):
            raise OutOfBoundsError(f"polarity {pi} not in {{1, -1}}", path=path, line=lineno)
        if not (0 <= ti <= duration):
            raise OutOfBoundsError(f"timestamp {ti} outside [0, {duration}]", path=path, line=lineno)
        if ti < prev:
            raise NonMonotoneError(f"timestamp {ti} precedes {prev}", path=path, line=lineno)
        prev = ti
        t[i], x[i], y[i], p[i] = ti, xi, yi, pi
    return EventStream(t, x, y, p, width, height, duration, **meta)


# ---------------------------------------------------------------------------
# voxels


def _voxel_paths(path: PathLike) -> tuple[Path, Path]:
    s = str(path)
    for suffix in (".vox.json", ".vox.bin"):
        if s.endswith(suffix):
            s = s[: -len(suffix)]
            break
    return Path(s + ".vox.json"), Path(s + ".vox.bin")


def pack_voxels(occupancy: np.ndarray) -> bytes:
    """Bit-pack with x fastest, then y, then z; bit 0 of byte 0 is voxel (0, 0, 0)."""
    flat = np.asarray(occupancy, dtype=bool).ravel(order="F")
    return np.packbits(flat, bitorder="little").tobytes()


def unpack_voxels(payload: bytes, resolution: int) -> np.ndarray:
    n = resolution**3
    need = math.ceil(n / 8)
    if len(payload) != need:
        raise PayloadLengthError(f"payload has {len(payload)} bytes, resolution {resolution} needs {need}", offset=len(payload))
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if bits[n:].any():
        raise PaddingBitsError("nonzero padding bits after the last voxel", offset=need - 1)
    return bits[:n].astype(bool).reshape((resolution,) * 3, order="F")


def write_voxels(grid: VoxelGrid, path: PathLike) -> tuple[Path, Path]:
    meta_path, bin_path = _voxel_paths(path)
    meta = {"format": VOX_FORMAT, "resolution": grid.resolution, "category": grid.category, "object_id": grid.object_id}
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    bin_path.write_bytes(pack_voxels(grid.occupancy))
    return meta_path, bin_path


def read_voxels(path: PathLike) -> VoxelGrid:
    meta_path, bin_path = _voxel_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
        resolution = int(meta["resolution"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad voxel sidecar: {exc}", path=meta_path) from None
    if meta.get("format", VOX_FORMAT) != VOX_FORMAT:
        raise MalformedHeaderError(f"unsupported voxel format {meta.get('format')!r}", path=meta_path)
    if resolution < 1:
        raise MalformedHeaderError("resolution must be positive", path=meta_path)
    try:
        occ = unpack_voxels(bin_path.read_bytes(), resolution)
    except FormatError as exc:
        raise type(exc)(exc.message, path=bin_path, offset=exc.offset) from None
    return VoxelGrid(occ, meta.get("category"), meta.get("object_id"))


# ---------------------------------------------------------------------------
# float32 array containers (frame stacks, logit grids)

CONTAINER_MAGIC = b"EVXA"


def write_array(path: PathLike, header: dict, array: np.ndarray) -> None:
    """Write ``magic | u32 header length | JSON header | little-endian f32 data``."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = dict(header, shape=list(arr.shape))
    blob = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes())


def read_array(path: PathLike) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CONTAINER_MAGIC or len(data) < 8:
        raise MalformedHeaderError("not an array container", path=path, offset=0)
    (hlen,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8 : 8 + hlen])
        shape = tuple(int(s) for s in header["shape"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"bad container header: {exc}", path=path, offset=8) from None
    payload = data[8 + hlen :]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise TruncatedPayloadError(f"payload {len(payload)} bytes, expected {expected}", path=path, offset=8 + hlen)
    return header, np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset tree: <root>/<split>/<category>/<object_id>.{evb,vox.json,vox.bin}


@dataclass
class ManifestEntry:
    events: str
    voxels: str
    category: str
    split: str
    object_id: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(e.split for e in self.entries)
        return {s: c.get(s, 0) for s in SPLITS}

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "skipped": self.skipped, "counts": self.counts}


def scan_dataset(root: PathLike) -> Manifest:
    """Pair every ``.evb`` (or ``.evt``) with its voxel label.

    Event files without a label, and directories outside the known
    splits/categories, are skipped with a warning and counted.
    """
    root = Path(root)
    manifest = Manifest()
    if not root.is_dir():
        return manifest
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        for cat_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            files = sorted(p for p in cat_dir.iterdir() if p.suffix in (".evb", ".evt"))
            if cat_dir.name not in CATEGORIES:
                log.warning("skipping %s: unknown category", cat_dir)
                manifest.skipped += len(files)
                continue
            for ev in files:
                label = ev.with_suffix(".vox.json")
                if not (label.is_file() and ev.with_suffix(".vox.bin").is_file()):
                    log.warning("skipping %s: no voxel label", ev)
                    manifest.skipped += 1
                    continue
                manifest.entries.append(ManifestEntry(str(ev), str(label), cat_dir.name, split, ev.stem))
    return manifest
