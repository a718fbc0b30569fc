"""
Following an image through the enhancer
=======================================

Prints every intermediate for a 64x64 input under each scale pair, then the
parameter breakdown of the default configuration.
"""

import numpy as np

from featenhancer import EnhancerConfig, enhance, init_params, param_count
from featenhancer.enhancer import layer_specs
from featenhancer.tensor import Tensor

image = Tensor(np.random.default_rng(1).random((3, 64, 64)))

for pair in [(2, 4), (4, 8), (4, 16), (8, 16)]:
    cfg = EnhancerConfig(scale_pair=pair)
    stages = {}
    enhance(image, init_params(cfg, np.random.default_rng(0)), cfg, stages)
    shapes = "  ".join(f"{k}={'x'.join(map(str, v.shape))}" for k, v in stages.items())
    print(f"scale pair {pair}: {shapes}")

# %% where the parameters live
cfg = EnhancerConfig()
groups = {}
for name, spec in layer_specs(cfg, include_projection=True).items():
    groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + spec.num_params
print("\nparameters by group:", groups)
print("core count (no RGB projection):", param_count(cfg))
print("with three separate FENs:", param_count(cfg.replace(share_fen_across_scales=False)))
