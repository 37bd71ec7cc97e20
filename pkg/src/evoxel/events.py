"""Event, stream and time-window primitives shared by every other module."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

CATEGORIES: tuple[str, ...] = (
    "airplane",
    "bench",
    "cabinet",
    "car",
    "chair",
    "displayer",
    "lamp",
    "speaker",
    "rifle",
    "sofa",
    "table",
    "telephone",
    "watercraft",
)


class OrderingError(ValueError):
    """Raised when event timestamps are not non-decreasing."""


class EventBoundsError(ValueError):
    """Raised when an event falls outside the sensor or has an invalid polarity."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: float
    polarity: int

    def __post_init__(self):
        if self.polarity not in (1, -1):
            raise EventBoundsError(f"polarity must be +1 or -1, got {self.polarity}")
        if self.x < 0 or self.y < 0:
            raise EventBoundsError(f"negative pixel coordinate ({self.x}, {self.y})")
        if not self.t >= 0.0:
            raise EventBoundsError(f"negative or NaN timestamp {self.t}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events stored column-wise.

    Columns are read-only numpy arrays: ``t`` (float64 seconds), ``x`` and
    ``y`` (int64 pixels) and ``p`` (int8, +1/-1).
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_width: int
    sensor_height: int
    duration: float
    category_label: Optional[str] = None
    object_id: Optional[str] = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        p = np.asarray(self.p).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event columns must have equal length")
        if self.sensor_width <= 0 or self.sensor_height <= 0:
            raise ValueError("sensor geometry must be positive")
        if len(t):
            if not np.all(np.isfinite(t)) or t[0] < 0:
                raise EventBoundsError("timestamps must be finite and non-negative")
            bad = np.flatnonzero(np.diff(t) < 0)
            if len(bad):
                raise OrderingError(f"timestamps decrease at event index {bad[0] + 1}")
            if x.min() < 0 or y.min() < 0 or x.max() >= self.sensor_width or y.max() >= self.sensor_height:
                raise EventBoundsError("event coordinates outside the sensor")
            if not np.all((p == 1) | (p == -1)):
                raise EventBoundsError("polarity must be +1 or -1")
            if t[-1] > self.duration:
                raise ValueError(f"duration {self.duration} is shorter than last timestamp {t[-1]}")
        elif self.duration < 0:
            raise ValueError("duration must be non-negative")
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "p", _frozen(p.astype(np.int8)))
        object.__setattr__(self, "duration", float(self.duration))

    @classmethod
    def from_events(
        cls,
        events: Iterable[Event],
        sensor_width: int,
        sensor_height: int,
        duration: Optional[float] = None,
        **meta,
    ) -> "EventStream":
        events = list(events)
        t = np.array([e.t for e in events], dtype=np.float64)
        if duration is None:
            duration = float(t.max()) if len(t) else 0.0
        return cls(
            t=t,
            x=np.array([e.x for e in events], dtype=np.int64),
            y=np.array([e.y for e in events], dtype=np.int64),
            p=np.array([e.polarity for e in events], dtype=np.int8),
            sensor_width=sensor_width,
            sensor_height=sensor_height,
            duration=duration,
            **meta,
        )

    @classmethod
    def empty(cls, sensor_width: int, sensor_height: int, duration: float, **meta) -> "EventStream":
        z = np.zeros(0)
        return cls(z, z, z, z, sensor_width, sensor_height, duration, **meta)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self.t)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), float(self.t[i]), int(self.p[i]))

    @property
    def events(self) -> list[Event]:
        return list(self)

    def select(self, sl: slice) -> "EventStream":
        """Contiguous sub-stream sharing this stream's geometry and metadata."""
        return EventStream(
            self.t[sl], self.x[sl], self.y[sl], self.p[sl],
            self.sensor_width, self.sensor_height, self.duration,
            self.category_label, self.object_id,
        )

    def same_as(self, other: "EventStream") -> bool:
        """Exact equality of every column and every metadata field."""
        return (
            self.sensor_width == other.sensor_width
            and self.sensor_height == other.sensor_height
            and self.duration == other.duration
            and self.category_label == other.category_label
            and self.object_id == other.object_id
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class TimeWindowPartition:
    """Fixed-length half-open windows ``[start + k*w, start + (k+1)*w)``."""

    window_length: float
    window_count: int
    start_time: float = 0.0

    def __post_init__(self):
        if not self.window_length > 0:
            raise ValueError("window_length must be positive")
        if self.window_count < 1:
            raise ValueError("window_count must be at least 1")

    @classmethod
    def covering(cls, duration: float, window_length: float, start_time: float = 0.0) -> "TimeWindowPartition":
        if not window_length > 0:
            raise ValueError("window_length must be positive")
        # round() absorbs representation error such as 0.5 / 0.005 = 100.00000000000001
        # and the f32 round-up of durations read back from .evb headers
        count = max(1, math.ceil(round(duration / window_length, 6)))
        return cls(window_length, count, start_time)

    @property
    def boundaries(self) -> np.ndarray:
        return self.start_time + np.arange(self.window_count + 1) * self.window_length

    def window_index(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if t.size and t.min() < self.start_time:
            raise ValueError("event precedes the partition start time")
        idx = np.searchsorted(self.boundaries, t, side="right") - 1
        # only an event sitting exactly on the end boundary lands past the last window
        return np.minimum(idx, self.window_count - 1)


def partition(
    stream: EventStream,
    window_length: float,
    start_time: float = 0.0,
    window_count: Optional[int] = None,
) -> list[EventStream]:
    """Split a stream into consecutive fixed-length time windows.

    The number of windows is ``ceil(duration / window_length)`` unless
    ``window_count`` is given. Empty windows are returned as empty streams.
    """
    if window_count is None:
        part = TimeWindowPartition.covering(stream.duration - start_time, window_length, start_time)
    else:
        part = TimeWindowPartition(window_length, window_count, start_time)
    idx = part.window_index(stream.t)
    edges = np.searchsorted(idx, np.arange(part.window_count + 1), side="left")
    return [stream.select(slice(edges[k], edges[k + 1])) for k in range(part.window_count)]


def partition_by_count(stream: EventStream, events_per_window: int) -> list[EventStream]:
    """Count-based windows; the last group holds the remainder."""
    if events_per_window < 1:
        raise ValueError("events_per_window must be >= 1")
    n = max(1, math.ceil(len(stream) / events_per_window))
    return [stream.select(slice(k * events_per_window, (k + 1) * events_per_window)) for k in range(n)]


def last_event_indices(key: np.ndarray) -> np.ndarray:
    """Index of the final occurrence of each distinct key, in key order."""
    if len(key) == 0:
        return np.zeros(0, dtype=np.int64)
    _, first_in_reversed = np.unique(key[::-1], return_index=True)
    return len(key) - 1 - first_in_reversed


def last_event_per_pixel(group: EventStream) -> dict[tuple[int, int], Event]:
    """Map each active pixel ``(x, y)`` to its latest event; ties go to the later input."""
    key = group.y * group.sensor_width + group.x
    return {(int(group.x[i]), int(group.y[i])): group[i] for i in last_event_indices(key)}


def concatenate(groups: Sequence[EventStream]) -> EventStream:
    if not groups:
        raise ValueError("nothing to concatenate")
    g0 = groups[0]
    return EventStream(
        np.concatenate([g.t for g in groups]),
        np.concatenate([g.x for g in groups]),
        np.concatenate([g.y for g in groups]),
        np.concatenate([g.p for g in groups]),
        g0.sensor_width, g0.sensor_height, g0.duration, g0.category_label, g0.object_id,
    )
