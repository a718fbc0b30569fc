"""
Blockwise attention at the coarsest scale
=========================================

Channels are cut into N blocks; each block attends over the spatial tokens
independently.  This script checks the vectorised path against explicit
loops and shows that a block never sees its neighbours.
"""

import numpy as np

from featenhancer.enhancer import attend_blocks
from featenhancer.tensor import Tensor

rng = np.random.default_rng(2)
c, h, w, n = 8, 3, 3, 4
q, k = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))

weights = []
out = attend_blocks(Tensor(q), Tensor(k), n, weights_out=weights).data
print(f"{len(weights)} attention maps of shape {weights[0].shape}")
print("row sums of block 0:", np.round(weights[0].sum(axis=1), 12))

# %% the same thing with loops
d = c // n
loops = np.zeros_like(q)
for b in range(n):
    qt = q[b * d:(b + 1) * d].reshape(d, -1).T
    kt = k[b * d:(b + 1) * d].reshape(d, -1).T
    for i in range(len(qt)):
        s = np.array([qt[i] @ kt[j] for j in range(len(kt))])
        a = np.exp(s - s.max())
        a /= a.sum()
        loops[b * d:(b + 1) * d].reshape(d, -1)[:, i] = a @ kt
print("max |vectorised - loops|:", np.abs(out - loops).max())

# %% perturb block 3 only
q2 = q.copy()
q2[3 * d:] += 5.0
out2 = attend_blocks(Tensor(q2), Tensor(k), n).data
changed = [bool(np.any(out2[b * d:(b + 1) * d] != out[b * d:(b + 1) * d])) for b in range(n)]
print("blocks changed by touching block 3:", changed)
