"""
Event streams, frames and voxel trajectories
============================================

Walks one synthetic sample through the input side of the model: the raw
stream, its frame stack, the voxel grid and the chained trajectories that
become the temporal branch's tokens. Run with ``python3`` from the repo
root; everything prints to the terminal.
"""

# %%
import numpy as np

from evmamba.events import (
    CATEGORY_NAMES, parse_binary, synthesize_stream, write_binary, write_text,
)
from evmamba.representation import default_cell_size, stack_frames, voxelize
from evmamba.voxel_scan import filter_by_length, scan_stream, trajectories_to_csv

# %% [markdown]
# Five generators stand in for action categories. Each draws a fixed number
# of events (rate x duration) along a moving shape plus uniform noise.

# %%
for name in CATEGORY_NAMES:
    s = synthesize_stream(name, seed=0)
    print(f"{name:18s} {len(s):5d} events over {s.duration} us, "
          f"{s.p.mean():.2f} positive")

s = synthesize_stream("translating_bar", seed=0)

# %% [markdown]
# The binary codec is a 16-byte header plus 14 bytes per event; the text
# codec is a header line and one ``x,y,t,p`` line per event.

# %%
blob = write_binary(s)
print(len(blob), "bytes =", 16, "+ 14 *", len(s))
print(write_text(s).decode().splitlines()[:3])
assert parse_binary(blob) == s

# %% [markdown]
# ## Frames
# Eight equal time slices, two polarity channels, binned down to 32x32.
# Every event lands in exactly one bin.

# %%
fs = stack_frames(s, 8, 32, 32)
print(fs.frames.shape, fs.frames.sum(), "==", len(s))


def show(img, width=32):
    # coarse terminal rendering, darker glyph = more events
    ramp = " .:-=+*#%@"
    img = img / max(img.max(), 1)
    for row in img[:: max(1, img.shape[0] // 16)]:
        print("".join(ramp[int(v * 9)] for v in row[:width]))


for k in (0, 4, 7):
    print(f"frame {k}, on-events")
    show(fs.frames[k, 1])

# %% [markdown]
# ## Voxels
# Cells are a x b pixels by c microseconds. Each cell carries a small
# descriptor: a 2x2x2 micro-histogram of its events plus the count and
# the net polarity.

# %%
a, b, c = default_cell_size(s, 8)
grid = voxelize(s, a, b, c)
print("cell", (a, b, c), "grid", grid.dims, "occupied", int((grid.counts > 0).sum()))

# %% [markdown]
# ## Trajectories
# Per clip the busiest cells are kept, then each one is chained forward to
# its most similar free cell in the next clip. Short chains are dropped.

# %%
scan = scan_stream(s)
lengths = sorted((len(t) for t in scan.trajectories), reverse=True)
print("informative voxels per clip", [len(v) for v in scan.sets])
print("longest chains", lengths[:10])
print(trajectories_to_csv(scan.kept[:1], scan.grid))

for delta in (1, 3, 9):
    print(f"delta={delta}: {len(filter_by_length(scan.trajectories, delta))} kept")

# %% [markdown]
# The kept chains are packed into a K x L grid of descriptors (trajectory
# by clip) with a mask over empty slots.

# %%
tok = scan.tokens
print(tok.tokens.shape, "filled slots", int(tok.mask.sum()))
print(np.where(tok.mask[:4], "#", ".").astype(object).sum(axis=1))
