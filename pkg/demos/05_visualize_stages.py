"""
Stage pictures
==============

Writes one PPM per enhancer stage for a single dark sample.  RGB stages are
stretched per channel; feature maps become channel-mean heat maps.
"""

import sys
from pathlib import Path

import numpy as np

from featenhancer import EnhancerConfig, enhance, init_params
from featenhancer.data import DatasetSpec, generate_split, tensor_to_image, write_ppm
from featenhancer.tensor import Tensor

out = Path(sys.argv[1] if len(sys.argv) > 1 else "stage_pictures")
out.mkdir(exist_ok=True)

sample = generate_split(DatasetSpec(train_count=1, val_count=4), "val")[0]
cfg = EnhancerConfig()
stages = {}
enhance(Tensor(sample.image), init_params(cfg, np.random.default_rng(0)), cfg, stages)

write_ppm(sample.image, out / "input_raw.ppm")
for name, t in stages.items():
    write_ppm(tensor_to_image(t.data), out / f"stage_{name}.ppm")
    print(f"{name:4s} {str(t.shape):>14s} -> {out / f'stage_{name}.ppm'}")
print(f"gamma={sample.gamma:.2f} brightness={sample.brightness:.3f} label={sample.label}")
