"""
The selective scan and the 2D block
===================================

Small numeric experiments with the state-space pieces: discretization,
the recurrence, the four scan orders and the residual block.
"""

# %%
import math

import numpy as np

from evmamba.ssm import (
    VSSBlock, cross_merge, cross_scan, discretize, scan_orders, scan_reference,
    selective_scan_op,
)
from evmamba.tensor import Tensor, no_grad

# %% [markdown]
# A negative diagonal state matrix decays by exp(step * A) per token. With
# A = -1 and a step of ln 2 the state halves each step.

# %%
a_bar, b_bar = discretize([-1.0], [1.0], math.log(2))
print(a_bar, b_bar)

u = np.array([[[1.0], [0.0], [0.0], [0.0]]])
step = np.full_like(u, math.log(2))
ones = np.ones((1, 4, 1))
with no_grad():
    y = selective_scan_op(Tensor(u), Tensor(step), Tensor(np.array([-1.0])),
                          Tensor(ones), Tensor(ones), Tensor(np.zeros(1))).data
print("impulse response", y.ravel())  # ln2, ln2/2, ln2/4, ...

# %% [markdown]
# The compiled kernel and a plain Python loop agree to round-off.

# %%
rng = np.random.default_rng(0)
L, d, N = 24, 3, 6
u = rng.standard_normal((1, L, d))
step = rng.uniform(0.01, 1, (1, L, d))
A = -np.arange(1.0, N + 1)
B, C = rng.standard_normal((1, L, N)), rng.standard_normal((1, L, N))
D = rng.standard_normal(d)
with no_grad():
    fast = selective_scan_op(*(Tensor(x) for x in (u, step, A, B, C, D))).data[0]
print("max diff", np.abs(fast - scan_reference(u[0], step[0], A, B[0], C[0], D)).max())

# %% [markdown]
# ## Four scan orders
# Row-major and column-major, each forwards and backwards. Undoing each
# order and summing gives back four copies of the grid.

# %%
for order in scan_orders(2, 3):
    print(f"{order.name:13s}", order.permutation)

x = rng.standard_normal((1, 3, 4, 2))
merged = cross_merge(cross_scan(Tensor(x)), 3, 4).data
print("merge(scan(x)) == 4x:", np.array_equal(merged, 4 * x))

# %% [markdown]
# ## Residual block
# With the output projection zeroed the block passes its input through
# unchanged, whatever the rest of its weights are.

# %%
blk = VSSBlock(8, 4, rng, dtype=np.float64)
x = rng.standard_normal((1, 4, 4, 8))
with no_grad():
    print("change with random weights", np.abs(blk(Tensor(x)).data - x).max())
    blk.proj_out.weight.data[...] = 0
    blk.proj_out.bias.data[...] = 0
    print("change with zeroed output", np.abs(blk(Tensor(x)).data - x).max())
