"""Temporal voxel scanning.

Voxels of each clip that hold enough events are chained across consecutive
clips by picking, in the next clip, the voxel whose descriptor has the
highest cosine similarity with the current one. The resulting trajectories
are filtered by length and laid out as a (trajectory x clip) token grid.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .events import EventStream
from .representation import (
    VoxelGrid, cell_descriptors, default_cell_size, descriptor_length, voxelize,
)


@dataclass
class InformativeVoxelSet:
    """Cells of one clip with at least ``eps_min`` events.

    Ordered by descending count, ties by ascending flat cell index.
    """

    clip: int
    cells: np.ndarray
    counts: np.ndarray
    descriptors: np.ndarray

    def __len__(self):
        return len(self.cells)


@dataclass
class VoxelTrajectory:
    start_clip: int
    steps: List[tuple] = field(default_factory=list)
    descriptors: List[np.ndarray] = field(default_factory=list)
    similarities: List[Optional[float]] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def total_count(self):
        # descriptor layout: micro-bins..., count, polarity_sum
        return float(sum(d[-2] for d in self.descriptors))

    def append(self, clip, cell, descriptor, similarity=None):
        self.steps.append((clip, int(cell)))
        self.descriptors.append(descriptor)
        self.similarities.append(similarity)


@dataclass
class VoxelTokenSequence:
    tokens: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.tokens.shape


def clip_of_layer(n_layers, n_clips):
    """Map each time layer of a grid onto one of ``n_clips`` contiguous clips."""
    return np.arange(n_layers) * n_clips // n_layers


def filter_informative(grid: VoxelGrid, n_clips, eps_min=1, max_voxels=64):
    """Per clip, keep cells with count >= ``eps_min`` (at most ``max_voxels``)."""
    if eps_min < 1:
        raise ValueError("eps_min must be >= 1")
    nx, ny, nt = grid.dims
    layer_clip = clip_of_layer(nt, n_clips)
    # flat order is (ct, cy, cx), matching VoxelGrid.flat_index
    counts = grid.counts.transpose(2, 1, 0).reshape(-1)
    flat = np.arange(counts.size)
    clip_of_cell = layer_clip[flat // (nx * ny)]
    sets = []
    for k in range(n_clips):
        keep = np.flatnonzero((clip_of_cell == k) & (counts >= eps_min))
        order = np.lexsort((keep, -counts[keep]))
        keep = keep[order][:max_voxels]
        sets.append(InformativeVoxelSet(
            k, keep, counts[keep], cell_descriptors(grid, keep)
        ))
    return sets


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(u @ v) / (nu * nv)


def _similarities(query, descriptors):
    q = np.asarray(query, dtype=np.float64)
    nq = math.sqrt(float(q @ q))
    if nq == 0:
        raise ValueError("query descriptor has zero norm")
    nc = np.sqrt(np.einsum("ij,ij->i", descriptors, descriptors))
    return (descriptors @ q) / (nc * nq)


def _best(query, candidates, available, s_min):
    if len(candidates) == 0:
        return None, None
    sims = _similarities(query, candidates.descriptors)
    sims = np.where(available, sims, -np.inf)
    j = int(np.argmax(sims))
    if not available[j] or sims[j] < s_min:
        return None, None
    return j, float(sims[j])


def match_next(query, candidates: InformativeVoxelSet, s_min=-1.0):
    """Flat cell index of the most similar candidate, or None.

    Ties go to the earlier candidate in the set's order.
    """
    j, _ = _best(query, candidates, np.ones(len(candidates), bool), s_min)
    return None if j is None else int(candidates.cells[j])


def build_trajectories(sets, s_min=-1.0):
    """Greedy forward chaining with seed absorption.

    Seeds are visited clip by clip in set order. A voxel that already sits
    on a trajectory is neither re-seeded nor matched again, so trajectories
    are disjoint. A chain ends at the first clip with no eligible match.
    """
    absorbed = [np.zeros(len(s), bool) for s in sets]
    out = []
    for k, seeds in enumerate(sets):
        for i in range(len(seeds)):
            if absorbed[k][i]:
                continue
            absorbed[k][i] = True
            traj = VoxelTrajectory(k)
            traj.append(k, seeds.cells[i], seeds.descriptors[i])
            cur = seeds.descriptors[i]
            for nxt in range(k + 1, len(sets)):
                j, sim = _best(cur, sets[nxt], ~absorbed[nxt], s_min)
                if j is None:
                    break
                absorbed[nxt][j] = True
                traj.append(nxt, sets[nxt].cells[j], sets[nxt].descriptors[j], sim)
                cur = sets[nxt].descriptors[j]
            out.append(traj)
    return out


def filter_by_length(trajectories, delta=1):
    if delta < 1:
        raise ValueError("delta must be >= 1")
    return [t for t in trajectories if len(t) >= delta]


def to_token_sequence(trajectories, n_tokens, n_clips, dim=None):
    """Lay the ``n_tokens`` heaviest trajectories out on a (K, L, d_v) grid."""
    if n_tokens < 1:
        raise ValueError("token budget must be >= 1")
    if dim is None:
        dim = len(trajectories[0].descriptors[0]) if trajectories else descriptor_length()
    tokens = np.zeros((n_tokens, n_clips, dim), dtype=np.float64)
    mask = np.zeros((n_tokens, n_clips), dtype=bool)
    totals = [-t.total_count for t in trajectories]
    order = np.argsort(totals, kind="stable")[:n_tokens]
    for row, i in enumerate(order):
        for (clip, _), d in zip(trajectories[i].steps, trajectories[i].descriptors):
            tokens[row, clip] = d
            mask[row, clip] = True
    return VoxelTokenSequence(tokens, mask)


def trajectories_to_csv(trajectories, grid: VoxelGrid):
    buf = io.StringIO()
    buf.write("traj_id,clip,cx,cy,ct,similarity_to_prev\n")
    for i, traj in enumerate(trajectories):
        for (clip, cell), sim in zip(traj.steps, traj.similarities):
            cx, cy, ct = grid.unflatten(cell)
            s = "" if sim is None else repr(sim)
            buf.write(f"{i},{clip},{cx},{cy},{ct},{s}\n")
    return buf.getvalue()


@dataclass
class ScanResult:
    grid: Optional[VoxelGrid]
    sets: list
    trajectories: list
    kept: list
    tokens: VoxelTokenSequence


def scan_stream(stream: EventStream, n_clips=8, n_tokens=16, eps_min=1,
                max_voxels=64, delta=1, s_min=-1.0, micro=2, cells_across=16):
    """Voxelize a stream and run the whole temporal scan."""
    dim = descriptor_length(micro)
    if len(stream) == 0:
        empty = VoxelTokenSequence(
            np.zeros((n_tokens, n_clips, dim)), np.zeros((n_tokens, n_clips), bool)
        )
        return ScanResult(None, [], [], [], empty)
    a, b, c = default_cell_size(stream, n_clips, cells_across)
    grid = voxelize(stream, a, b, c, micro=micro)
    sets = filter_informative(grid, n_clips, eps_min, max_voxels)
    trajs = build_trajectories(sets, s_min)
    kept = filter_by_length(trajs, delta)
    tokens = to_token_sequence(kept, n_tokens, n_clips, dim)
    return ScanResult(grid, sets, trajs, kept, tokens)
