"""Hierarchical feature enhancement for low-light images.

Submodules:

- ``tensor``: float64 tensors with a define-by-run reverse-mode tape
- ``gradcheck``: central finite differences and relative-error reports
- ``enhancer``: multi-scale construction, FEN, SAFA attention and fusion
- ``head``: small classification head and cross-entropy
- ``data``: synthetic low-light shapes, FELD archives and PPM images
- ``train``: optimizers, training loop, checkpoints
- ``ablation``: design-choice grids
- ``cli``: the ``featenhancer`` command
"""

from .enhancer import EnhancerConfig, enhance, init_params, param_count
from .tensor import Tape, Tensor

__all__ = ["EnhancerConfig", "Tape", "Tensor", "enhance", "init_params", "param_count"]
__version__ = "0.1.0"
