"""
Event Core - AER events, ternary event frames and frame sequences
Equal-time binning, spurious-event injection, AER text codec and PGM dumps
"""

import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from PIL import Image

from pipeline_errors import AerParseError, DimensionError, GeometryError, TimestampRangeError

AER_HEADER_PREFIX = "# aer v1"
PGM_LEVELS = {-1: 0, 0: 128, 1: 255}
_DECIMAL = re.compile(r"-?[0-9]+")


@dataclass(frozen=True)
class Geometry:
    """Sensor resolution in pixels"""
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"Geometry must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def contains(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height


@dataclass(frozen=True)
class Event:
    """One AER tuple; x is the column, y the row, t in microseconds"""
    x: int
    y: int
    t: int
    p: int

    def __post_init__(self):
        if self.p not in (1, -1):
            raise ValueError(f"Event polarity must be +1 or -1, got {self.p}")
        if self.t < 0:
            raise TimestampRangeError(f"Event timestamp must be non-negative, got {self.t}")


@dataclass(frozen=True)
class EventFrame:
    """H x W ternary frame stored row-major with the origin at the top-left"""
    cells: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise DimensionError(f"EventFrame cells must be 2-D, got shape {cells.shape}")
        if cells.size and not np.isin(cells, (-1, 0, 1)).all():
            raise ValueError("EventFrame cells must be in {-1, 0, +1}")
        cells = cells.astype(np.int8, copy=True)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.width, self.height)

    @classmethod
    def zeros(cls, geometry: Geometry, frame_index: int = 0) -> "EventFrame":
        return cls(np.zeros(geometry.shape, dtype=np.int8), frame_index)

    def with_index(self, frame_index: int) -> "EventFrame":
        return EventFrame(self.cells, frame_index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventFrame):
            return NotImplemented
        return self.frame_index == other.frame_index and np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash((self.frame_index, self.cells.tobytes(), self.cells.shape))


@dataclass(frozen=True)
class FrameSequence:
    """Ordered event frames sharing one geometry, binned every dt microseconds"""
    frames: Tuple[EventFrame, ...]
    dt: int
    geometry: Geometry

    def __post_init__(self):
        frames = tuple(self.frames)
        if self.dt <= 0:
            raise ValueError(f"Bin interval dt must be positive, got {self.dt}")
        for i, frame in enumerate(frames):
            if frame.geometry != self.geometry:
                raise DimensionError(
                    f"Frame {i} has geometry {frame.width}x{frame.height}, "
                    f"sequence expects {self.geometry.width}x{self.geometry.height}"
                )
            if frame.frame_index != i:
                raise ValueError(f"Frame indices must be consecutive from 0, frame {i} has index {frame.frame_index}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[EventFrame]:
        return iter(self.frames)

    def __getitem__(self, item: Union[int, slice]):
        if isinstance(item, slice):
            picked = self.frames[item]
            return FrameSequence(
                tuple(f.with_index(i) for i, f in enumerate(picked)), self.dt, self.geometry
            )
        return self.frames[item]

    def as_array(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0,) + self.geometry.shape, dtype=np.int8)
        return np.stack([f.cells for f in self.frames])

    @classmethod
    def from_array(cls, cells: np.ndarray, dt: int) -> "FrameSequence":
        cells = np.asarray(cells)
        if cells.ndim != 3:
            raise DimensionError(f"Expected a (T, H, W) array, got shape {cells.shape}")
        geometry = Geometry(width=cells.shape[2], height=cells.shape[1])
        frames = tuple(EventFrame(cells[i], i) for i in range(cells.shape[0]))
        return cls(frames, dt, geometry)


@dataclass(frozen=True)
class NoiseInjection:
    """Result of inject_noise: the noisy frame plus what was added"""
    frame: EventFrame
    n_added: int
    n_requested: int
    saturated: bool = field(default=False)


def frame_event_count(frame: EventFrame) -> int:
    return int(np.count_nonzero(frame.cells))


def events_to_arrays(events: Sequence[Event]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Column arrays (x, y, t, p) for a list of events"""
    n = len(events)
    x = np.fromiter((e.x for e in events), dtype=np.int64, count=n)
    y = np.fromiter((e.y for e in events), dtype=np.int64, count=n)
    t = np.fromiter((e.t for e in events), dtype=np.int64, count=n)
    p = np.fromiter((e.p for e in events), dtype=np.int64, count=n)
    return x, y, t, p


def bin_events(
    events: Sequence[Event],
    t_start: int,
    dt: int,
    geometry: Geometry,
    t_end: Optional[int] = None,
) -> FrameSequence:
    """Group events into equal-time ternary frames.

    Each cell takes the sign of (#positive - #negative) events that hit it
    within the bin, 0 on a tie. Timestamps inside a bin are discarded and an
    event exactly on a bin boundary goes to the later bin.
    """
    if dt <= 0:
        raise ValueError(f"Bin interval dt must be positive, got {dt}")

    x, y, t, p = events_to_arrays(events)
    order = np.argsort(t, kind="stable")
    x, y, t, p = x[order], y[order], t[order], p[order]

    if t.size and t[0] < t_start:
        raise TimestampRangeError(f"Event at t={int(t[0])} precedes t_start={t_start}")
    outside = (x < 0) | (x >= geometry.width) | (y < 0) | (y >= geometry.height)
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise GeometryError(
            f"Event ({int(x[i])}, {int(y[i])}) outside {geometry.width}x{geometry.height} sensor"
        )

    bins = (t - t_start) // dt
    if t_end is not None:
        n_frames = max(0, math.ceil((t_end - t_start) / dt))
        if bins.size and bins[-1] >= n_frames:
            raise TimestampRangeError(f"Event at t={int(t[-1])} is at or beyond t_end={t_end}")
    else:
        n_frames = int(bins[-1]) + 1 if bins.size else 0

    net = np.zeros((n_frames,) + geometry.shape, dtype=np.int64)
    np.add.at(net, (bins, y, x), p)
    cells = np.sign(net).astype(np.int8)
    logger.debug(f"Binned {len(events)} events into {n_frames} frames (dt={dt})")
    return FrameSequence.from_array(cells, dt) if n_frames else FrameSequence((), dt, geometry)


def frame_to_events(frame: EventFrame, t: int) -> List[Event]:
    """Events for every nonzero cell of a frame, all stamped with t (row-major order)"""
    ys, xs = np.nonzero(frame.cells)
    return [Event(int(cx), int(cy), t, int(frame.cells[cy, cx])) for cy, cx in zip(ys, xs)]


def sequence_to_events(sequence: FrameSequence, t_start: int = 0) -> List[Event]:
    events: List[Event] = []
    for frame in sequence:
        events.extend(frame_to_events(frame, t_start + frame.frame_index * sequence.dt))
    return events


def _frame_rng(seed, frame_index: Optional[int] = None) -> np.random.Generator:
    if frame_index is None:
        return np.random.default_rng(seed)
    return np.random.default_rng([int(seed), int(frame_index)])


def inject_noise(frame: EventFrame, noise_level: float, rng_seed) -> NoiseInjection:
    """Place ceil(noise_level * nnz) spurious events on empty cells.

    Existing events are never touched. When the empty cells run out every one
    of them is filled and the result is flagged as saturated.
    """
    if noise_level < 0:
        raise ValueError(f"noise_level must be non-negative, got {noise_level}")

    cells = frame.cells
    nnz = int(np.count_nonzero(cells))
    # round() keeps 0.1 * 30 from turning into 4 spurious events
    requested = int(math.ceil(round(noise_level * nnz, 9)))
    if requested == 0:
        return NoiseInjection(frame, 0, 0, False)

    empty = np.flatnonzero(cells.ravel() == 0)
    rng = _frame_rng(rng_seed)
    saturated = requested > empty.size
    n_added = min(requested, empty.size)
    if saturated:
        logger.warning(f"Noise saturated frame {frame.frame_index}: requested {requested}, only {empty.size} empty cells")

    chosen = rng.choice(empty, size=n_added, replace=False) if n_added else empty[:0]
    polarities = rng.choice(np.array([1, -1], dtype=np.int8), size=n_added)
    noisy = cells.ravel().copy()
    noisy[chosen] = polarities
    return NoiseInjection(
        EventFrame(noisy.reshape(cells.shape), frame.frame_index), n_added, requested, saturated
    )


def inject_noise_sequence(sequence: FrameSequence, noise_level: float, seed: int) -> FrameSequence:
    """Noise every frame; frame i is seeded with (seed, i)"""
    if noise_level == 0:
        return sequence
    frames = tuple(
        inject_noise(frame, noise_level, [int(seed), frame.frame_index]).frame for frame in sequence
    )
    return FrameSequence(frames, sequence.dt, sequence.geometry)


# ---------------- AER text codec ----------------

def _decode_line(raw: bytes, line_no: int, path: str) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise AerParseError(f"non-ASCII byte at column {e.start + 1}", line_no, path) from e


def _parse_decimal(value: str, what: str, line_no: int, path: str) -> int:
    if not _DECIMAL.fullmatch(value):
        raise AerParseError(f"{what} must be a plain decimal integer, got {value!r}", line_no, path)
    return int(value)


def _parse_header(line: str, path: str) -> Geometry:
    tokens = line.strip().split()
    # expected: "#", "aer", "v1", "W=<w>", "H=<h>"
    if len(tokens) != 5 or tokens[:3] != ["#", "aer", "v1"]:
        raise AerParseError("missing '# aer v1 W=<w> H=<h>' header", 1, path)
    fields = {}
    for token in tokens[3:]:
        key, _, value = token.partition("=")
        fields[key] = value
    if set(fields) != {"W", "H"}:
        raise AerParseError(f"bad geometry in header: {line.strip()!r}", 1, path)
    width = _parse_decimal(fields["W"], "W", 1, path)
    height = _parse_decimal(fields["H"], "H", 1, path)
    try:
        return Geometry(width=width, height=height)
    except GeometryError as e:
        raise AerParseError(f"bad geometry in header: {e}", 1, path) from e


def _iter_aer(path: str) -> Iterable[Tuple[Geometry, Optional[Event]]]:
    with open(path, "rb") as f:
        geometry = _parse_header(_decode_line(f.readline(), 1, path), path)
        yield geometry, None
        for line_no, raw in enumerate(f, start=2):
            stripped = _decode_line(raw, line_no, path).strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split(",")
            if len(parts) != 4:
                raise AerParseError(f"expected 't,x,y,p', got {stripped!r}", line_no, path)
            t, x, y, p = (_parse_decimal(v, name, line_no, path) for v, name in zip(parts, "txyp"))
            if p not in (1, -1):
                raise AerParseError(f"polarity must be 1 or -1, got {p}", line_no, path)
            if t < 0:
                raise AerParseError(f"negative timestamp {t}", line_no, path)
            if not geometry.contains(x, y):
                raise AerParseError(
                    f"event ({x}, {y}) outside {geometry.width}x{geometry.height} sensor", line_no, path
                )
            yield geometry, Event(x=x, y=y, t=t, p=p)


def read_aer_geometry(path: str) -> Geometry:
    with open(path, "rb") as f:
        return _parse_header(_decode_line(f.readline(), 1, str(path)), str(path))


def read_aer(path: str) -> List[Event]:
    """Read a text AER file; raises AerParseError carrying the line number"""
    events = [event for _, event in _iter_aer(str(path)) if event is not None]
    logger.debug(f"Read {len(events)} events from {path}")
    return events


def write_aer(events: Sequence[Event], path: str, geometry: Geometry) -> None:
    """Write events in file order as 't,x,y,p' lines after the v1 header"""
    for e in events:
        if not geometry.contains(e.x, e.y):
            raise GeometryError(f"Event ({e.x}, {e.y}) outside {geometry.width}x{geometry.height} sensor")
    lines = [f"{AER_HEADER_PREFIX} W={geometry.width} H={geometry.height}\n"]
    lines.extend(f"{e.t},{e.x},{e.y},{e.p}\n" for e in events)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.writelines(lines)


# ---------------- PGM frame dumps ----------------

def frame_to_gray(frame: EventFrame) -> np.ndarray:
    gray = np.full(frame.cells.shape, PGM_LEVELS[0], dtype=np.uint8)
    gray[frame.cells > 0] = PGM_LEVELS[1]
    gray[frame.cells < 0] = PGM_LEVELS[-1]
    return gray


def write_pgm(frame: EventFrame, path: str) -> None:
    # Pillow writes mode "L" images as binary P5 graymaps
    Image.fromarray(frame_to_gray(frame), mode="L").save(path, format="PPM")


def dump_frames(sequence: FrameSequence, out_dir: str, prefix: str = "frame") -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for frame in sequence:
        path = os.path.join(out_dir, f"{prefix}_{frame.frame_index:05d}.pgm")
        write_pgm(frame, path)
        paths.append(path)
    return paths
