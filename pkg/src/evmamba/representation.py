"""Frame stacks and voxel grids built from an event stream."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .events import EventStream


class EmptyStreamError(ValueError):
    pass


@dataclass
class EventFrameStack:
    """Per-clip polarity histograms.

    ``frames`` has shape (T', 2, H', W') and holds raw event counts; channel
    0 collects p=0 events and channel 1 collects p=1 events. ``boundaries``
    holds the T'+1 clip edges in microseconds (the last edge is exclusive).
    """

    frames: np.ndarray
    boundaries: np.ndarray

    @property
    def shape(self):
        return self.frames.shape

    def normalized(self, dtype=np.float32):
        """Counts divided by each frame's maximum (1 for empty frames)."""
        f = self.frames.astype(dtype)
        peak = f.reshape(len(f), -1).max(axis=1)
        peak[peak == 0] = 1
        return f / peak[:, None, None, None]

    def to_pgm(self, frame, channel):
        img = self.frames[frame, channel]
        peak = max(int(img.max()), 1)
        h, w = img.shape
        pix = (img.astype(np.float64) * (255.0 / peak)).round().astype(np.uint8)
        return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def _clip_index(t, t0, span_ticks, n):
    # Integer floor of (t - t0) * n / span_ticks; boundary events go to the later bin.
    return ((t - t0) * n) // span_ticks


def stack_frames(stream: EventStream, n_frames=8, out_height=None, out_width=None):
    """Accumulate events into ``n_frames`` equal-duration polarity frames.

    The time axis covers ``t_last - t_first + 1`` microsecond ticks so that
    the last event falls inside the final clip. Pixels are downscaled with
    ``floor(x * W' / W)``.
    """
    if len(stream) == 0:
        raise EmptyStreamError("cannot stack frames for an empty stream")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    out_height = out_height or stream.height
    out_width = out_width or stream.width
    t0 = int(stream.t[0])
    ticks = int(stream.t[-1]) - t0 + 1
    k = _clip_index(stream.t, t0, ticks, n_frames)
    px = stream.x.astype(np.int64) * out_width // stream.width
    py = stream.y.astype(np.int64) * out_height // stream.height
    flat = ((k * 2 + stream.p) * out_height + py) * out_width + px
    counts = np.bincount(flat, minlength=n_frames * 2 * out_height * out_width)
    frames = counts.reshape(n_frames, 2, out_height, out_width)
    boundaries = t0 + np.arange(n_frames + 1) * (ticks / n_frames)
    return EventFrameStack(frames, boundaries)


@dataclass
class VoxelGrid:
    """Cubic voxelization of a stream.

    Cell edges are ``a`` x ``b`` pixels and ``c`` microseconds. Arrays are
    indexed ``[cx, cy, ct]``. The per-event cell and micro-bin assignments
    are kept so descriptors can be computed on demand.
    """

    a: int
    b: int
    c: int
    t0: int
    counts: np.ndarray
    polarity: np.ndarray
    event_cell: np.ndarray
    event_micro: np.ndarray
    event_sign: np.ndarray
    micro: int = 2

    @property
    def dims(self):
        return self.counts.shape

    @property
    def size(self):
        return self.counts.size

    def flat_index(self, cell):
        """Flat index of ``(cx, cy, ct)``; orders time-major, then row, then column."""
        nx, ny, _ = self.dims
        cx, cy, ct = cell
        return (ct * ny + cy) * nx + cx

    def unflatten(self, flat):
        nx, ny, _ = self.dims
        flat = int(flat)
        return flat % nx, (flat // nx) % ny, flat // (nx * ny)

    def to_csv(self):
        buf = io.StringIO()
        buf.write("cx,cy,ct,count,polarity_sum\n")
        for cx, cy, ct in zip(*np.nonzero(self.counts)):
            buf.write(f"{cx},{cy},{ct},{self.counts[cx, cy, ct]},{self.polarity[cx, cy, ct]}\n")
        return buf.getvalue()


def voxelize(stream: EventStream, a, b, c, micro=2):
    """Assign every event to cell ``(x // a, y // b, (t - t_first) // c)``.

    The temporal extent is ``t_last - t_first + 1`` ticks, so a stream
    spanning ``n * c`` ticks has exactly ``n`` cells along time.
    """
    if len(stream) == 0:
        raise EmptyStreamError("cannot voxelize an empty stream")
    if a < 1 or b < 1 or c < 1:
        raise ValueError("cell edges must be >= 1")
    t0 = int(stream.t[0])
    ticks = int(stream.t[-1]) - t0 + 1
    nx = -(-stream.width // a)
    ny = -(-stream.height // b)
    nt = -(-ticks // c)
    x = stream.x.astype(np.int64)
    y = stream.y.astype(np.int64)
    dt = stream.t - t0
    cx, cy, ct = x // a, y // b, dt // c
    cell = (ct * ny + cy) * nx + cx
    sign = 2 * stream.p.astype(np.int64) - 1

    size = nx * ny * nt
    counts = np.bincount(cell, minlength=size)
    pol = np.bincount(cell, weights=sign, minlength=size).astype(np.int64)
    # (ct, cy, cx) flat order -> [cx, cy, ct] arrays
    counts = counts.reshape(nt, ny, nx).transpose(2, 1, 0)
    pol = pol.reshape(nt, ny, nx).transpose(2, 1, 0)

    s = micro
    mx = (x % a) * s // a
    my = (y % b) * s // b
    mt = (dt % c) * s // c
    event_micro = (mt * s + my) * s + mx
    return VoxelGrid(a, b, c, t0, counts, pol, cell, event_micro, sign, micro)


def default_cell_size(stream: EventStream, n_clips, cells_across=16):
    """Default (a, b, c): 1/16 of the sensor width and one clip per time layer."""
    a = max(1, -(-stream.width // cells_across))
    ticks = int(stream.t[-1]) - int(stream.t[0]) + 1 if len(stream) else 1
    c = max(1, -(-ticks // n_clips))
    return a, a, c


def descriptor_length(micro=2):
    return micro ** 3 + 2


def cell_descriptors(grid: VoxelGrid, flat_cells):
    """Descriptors for many cells at once, one row per entry of ``flat_cells``.

    Each row is the s*s*s micro-histogram of the cell's events followed by
    ``[count, polarity_sum]``.
    """
    flat_cells = np.asarray(flat_cells, dtype=np.int64)
    s3 = grid.micro ** 3
    out = np.zeros((len(flat_cells), s3 + 2), dtype=np.float64)
    if len(flat_cells) == 0:
        return out
    order = np.argsort(flat_cells, kind="stable")
    sorted_cells = flat_cells[order]
    pos = np.searchsorted(sorted_cells, grid.event_cell)
    pos = np.minimum(pos, len(sorted_cells) - 1)
    hit = sorted_cells[pos] == grid.event_cell
    rows = order[pos[hit]]
    np.add.at(out, (rows, grid.event_micro[hit]), 1.0)
    np.add.at(out[:, s3 + 1], rows, grid.event_sign[hit].astype(np.float64))
    out[:, s3] = out[:, :s3].sum(axis=1)
    return out


def voxel_descriptor(grid: VoxelGrid, cell):
    """Descriptor of a single cell given as ``(cx, cy, ct)`` or a flat index."""
    flat = grid.flat_index(cell) if isinstance(cell, tuple) else int(cell)
    if not 0 <= flat < grid.size:
        raise IndexError(f"cell {cell} outside grid {grid.dims}")
    return cell_descriptors(grid, [flat])[0]
