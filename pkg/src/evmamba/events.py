"""Event streams: container types, text/binary codecs, synthetic generators.

Timestamps are integer microseconds everywhere in this module and polarity
is stored as 0/1. The {-1, +1} sign convention only appears once a stream
is turned into frames or voxels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHHQ")  # magic, u16 width, u16 height, u64 count
RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")]
)
assert _HEADER.size == 16 and RECORD_DTYPE.itemsize == 14


class EventFormatError(ValueError):
    """Raised when event data cannot be parsed or fails validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EventPoint(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(eq=False)
class EventStream:
    """Columnar event stream.

    ``t`` is int64 microseconds, ``x``/``y`` int32 pixel indices and ``p``
    uint8 polarity. Streams compare equal when geometry and every point
    match; ``label`` is carried along but not part of equality.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.t = np.ascontiguousarray(self.t, dtype=np.int64)
        self.x = np.ascontiguousarray(self.x, dtype=np.int32)
        self.y = np.ascontiguousarray(self.y, dtype=np.int32)
        self.p = np.ascontiguousarray(self.p, dtype=np.uint8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise EventFormatError("column lengths differ")

    @classmethod
    def empty(cls, width, height, label=None):
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z, label)

    @classmethod
    def from_points(cls, width, height, points, label=None, strict=True):
        points = list(points)
        if points:
            x, y, t, p = (np.array(col) for col in zip(*points))
        else:
            x = y = t = p = np.zeros(0, dtype=np.int64)
        s = cls(width, height, t, x, y, p, label)
        return s.validated(strict=strict)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        return EventPoint(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def duration(self):
        if len(self) <= 1:
            return 0
        return int(self.t[-1] - self.t[0])

    def validated(self, strict=True):
        """Check bounds and ordering.

        In strict mode a decreasing timestamp is an error; otherwise the
        points are stably sorted by time. Returns the (possibly sorted) stream.
        """
        if self.width < 1 or self.height < 1:
            raise EventFormatError(f"bad geometry {self.width}x{self.height}")
        bad = (
            (self.x < 0) | (self.x >= self.width)
            | (self.y < 0) | (self.y >= self.height)
        )
        if bad.any():
            i = int(np.argmax(bad))
            raise EventFormatError(
                f"coordinate ({self.x[i]}, {self.y[i]}) outside {self.width}x{self.height}"
            )
        if (self.p > 1).any():
            raise EventFormatError("polarity must be 0 or 1")
        if (self.t < 0).any():
            raise EventFormatError("negative timestamp")
        if len(self) > 1 and (np.diff(self.t) < 0).any():
            if strict:
                i = int(np.argmax(np.diff(self.t) < 0)) + 1
                raise EventFormatError(f"timestamp decreases at event {i}")
            order = np.argsort(self.t, kind="stable")
            return EventStream(
                self.width, self.height, self.t[order], self.x[order],
                self.y[order], self.p[order], self.label,
            )
        return self


@dataclass
class StreamMetadata:
    sample_id: str
    category_name: str
    point_count: int
    duration: int

    @classmethod
    def of(cls, stream, sample_id, category_name):
        return cls(sample_id, category_name, len(stream), stream.duration)


# -- text codec ---------------------------------------------------------------

def _parse_header(line):
    fields = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, _, v = tok.partition("=")
            fields[k] = v
        elif tok != "evt1":
            raise EventFormatError(f"unexpected header token {tok!r}", line=1)
    try:
        return int(fields["w"]), int(fields["h"])
    except (KeyError, ValueError):
        raise EventFormatError("header needs integer w= and h=", line=1) from None


def parse_text(data, strict=True):
    """Parse the ``# evt1 w=.. h=..`` text format (one ``t,x,y,p`` per line)."""
    if isinstance(data, bytes):
        data = data.decode("ascii")
    lines = data.splitlines()
    if not lines:
        raise EventFormatError("missing header", line=1)
    width, height = _parse_header(lines[0])
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 fields, got {len(parts)}", line=lineno)
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventFormatError(f"unparseable event {line!r}", line=lineno) from None
        if not (0 <= x < width and 0 <= y < height):
            raise EventFormatError(
                f"coordinate ({x}, {y}) outside {width}x{height}", line=lineno
            )
        if p not in (0, 1):
            raise EventFormatError(f"polarity {p} not in {{0, 1}}", line=lineno)
        if t < 0:
            raise EventFormatError("negative timestamp", line=lineno)
        if strict and rows and t < rows[-1][0]:
            raise EventFormatError("timestamp decreases", line=lineno)
        rows.append((t, x, y, p))
    if rows:
        t, x, y, p = (np.array(c, dtype=np.int64) for c in zip(*rows))
    else:
        t = x = y = p = np.zeros(0, dtype=np.int64)
    return EventStream(width, height, t, x, y, p).validated(strict=strict)


def write_text(stream):
    out = [f"# evt1 w={stream.width} h={stream.height}"]
    out.extend(
        f"{t},{x},{y},{p}"
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(),
                              stream.y.tolist(), stream.p.tolist())
    )
    return ("\n".join(out) + "\n").encode("ascii")


# -- binary codec -------------------------------------------------------------

def write_binary(stream):
    if stream.width > 0xFFFF or stream.height > 0xFFFF:
        raise EventFormatError("binary format limits width and height to 65535")
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    return _HEADER.pack(MAGIC, stream.width, stream.height, len(stream)) + rec.tobytes()


def parse_binary(data, strict=True):
    if len(data) < _HEADER.size:
        raise EventFormatError("truncated header")
    magic, width, height, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise EventFormatError(f"bad magic {magic!r}")
    body = len(data) - _HEADER.size
    need = count * RECORD_DTYPE.itemsize
    if body < need:
        raise EventFormatError(
            f"truncated record: header declares {count} events, "
            f"found {body // RECORD_DTYPE.itemsize}"
        )
    if body > need:
        raise EventFormatError(
            f"count mismatch: header declares {count} events, found {body / RECORD_DTYPE.itemsize:g}"
        )
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=_HEADER.size)
    if (rec["pad"] != 0).any():
        raise EventFormatError("nonzero pad byte")
    s = EventStream(width, height, rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])
    return s.validated(strict=strict)


def read_stream(path, strict=True):
    """Read a stream file, choosing the codec from the leading bytes."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] == MAGIC:
        return parse_binary(data, strict=strict)
    return parse_text(data, strict=strict)


def write_stream(path, stream, binary=True):
    with open(path, "wb") as f:
        f.write(write_binary(stream) if binary else write_text(stream))


# -- synthetic generators -----------------------------------------------------
#
# Each generator maps normalized time u in [0, 1) to event positions in
# normalized [0, 1] coordinates. Per-sample randomness (direction, speed,
# size) comes from ``rng`` so categories differ by motion, not placement.

def _translating_bar(rng, u, n):
    x0, x1 = rng.uniform(0.1, 0.25), rng.uniform(0.75, 0.9)
    if rng.random() < 0.5:
        x0, x1 = 1 - x0, 1 - x1
    half = rng.uniform(0.2, 0.35)
    xc = x0 + (x1 - x0) * u
    x = xc + rng.normal(0, 0.015, n)
    y = 0.5 + rng.uniform(-half, half, n)
    return x, y


def _rotating_dot(rng, u, n):
    r = rng.uniform(0.2, 0.35)
    phase = rng.uniform(0, 2 * np.pi)
    turns = rng.uniform(0.75, 1.25) * (1 if rng.random() < 0.5 else -1)
    a = phase + 2 * np.pi * turns * u
    x = 0.5 + r * np.cos(a) + rng.normal(0, 0.025, n)
    y = 0.5 + r * np.sin(a) + rng.normal(0, 0.025, n)
    return x, y


def _expanding_ring(rng, u, n):
    r0, r1 = rng.uniform(0.03, 0.08), rng.uniform(0.35, 0.45)
    cx, cy = rng.uniform(0.45, 0.55, 2)
    r = r0 + (r1 - r0) * u + rng.normal(0, 0.01, n)
    a = rng.uniform(0, 2 * np.pi, n)
    return cx + r * np.cos(a), cy + r * np.sin(a)


def _zigzag_point(rng, u, n):
    x0, x1 = rng.uniform(0.1, 0.2), rng.uniform(0.8, 0.9)
    if rng.random() < 0.5:
        x0, x1 = x1, x0
    teeth = rng.uniform(2.0, 3.0)
    amp = rng.uniform(0.2, 0.3)
    tri = 2 * np.abs(2 * ((u * teeth) % 1.0) - 1) - 1
    x = x0 + (x1 - x0) * u + rng.normal(0, 0.02, n)
    y = 0.5 + amp * tri + rng.normal(0, 0.02, n)
    return x, y


def _two_body_crossing(rng, u, n):
    ya, yb = rng.uniform(0.3, 0.45), rng.uniform(0.55, 0.7)
    if rng.random() < 0.5:
        ya, yb = yb, ya
    which = rng.random(n) < 0.5
    xa = 0.1 + 0.8 * u
    xb = 0.9 - 0.8 * u
    x = np.where(which, xa, xb) + rng.normal(0, 0.02, n)
    y = np.where(which, ya, yb) + rng.normal(0, 0.02, n)
    return x, y


GENERATORS = {
    "translating_bar": _translating_bar,
    "rotating_dot": _rotating_dot,
    "expanding_ring": _expanding_ring,
    "zigzag_point": _zigzag_point,
    "two_body_crossing": _two_body_crossing,
}
CATEGORY_NAMES = tuple(GENERATORS)


def expected_event_count(duration_us, rate):
    """Exact number of events ``synthesize_stream`` emits (rate in events/ms)."""
    return int(round(rate * duration_us / 1000.0))


def synthesize_stream(category, seed, width=64, height=64, duration_us=200_000,
                      rate=10.0, noise_fraction=0.1, label=None):
    """Generate a deterministic synthetic stream for one motion category.

    ``category`` is a generator name or an index into ``CATEGORY_NAMES``.
    The stream holds exactly ``expected_event_count(duration_us, rate)``
    events: a ``noise_fraction`` share uniform over the sensor, the rest on
    the category's motion pattern. Polarity is a fair coin for every event.
    """
    if isinstance(category, (int, np.integer)):
        if not 0 <= category < len(CATEGORY_NAMES):
            raise KeyError(f"unknown generator index {category}")
        category = CATEGORY_NAMES[category]
    if category not in GENERATORS:
        raise KeyError(f"unknown generator {category!r}")
    if width < 8 or height < 8:
        raise ValueError("width and height must be >= 8")
    if duration_us <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")

    rng = np.random.default_rng(seed)
    n = expected_event_count(duration_us, rate)
    t = np.sort(rng.integers(0, duration_us, n))
    u = t / duration_us
    noise = rng.random(n) < noise_fraction
    gx, gy = GENERATORS[category](rng, u, n)
    p = rng.integers(0, 2, n)
    nx = rng.random(n)
    ny = rng.random(n)
    fx = np.where(noise, nx, gx)
    fy = np.where(noise, ny, gy)
    x = np.clip(np.floor(fx * width), 0, width - 1).astype(np.int64)
    y = np.clip(np.floor(fy * height), 0, height - 1).astype(np.int64)
    if label is None:
        label = CATEGORY_NAMES.index(category)
    return EventStream(width, height, t, x, y, p, label)
