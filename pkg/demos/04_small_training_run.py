"""
A small enhancer-versus-baseline run
====================================

Trains the head alone and the head behind the default enhancer on a 32x32
version of the dark-shapes task.  Takes about eight minutes on one core;
the full-size comparison lives in ``tests/test_acceptance.py``.
"""

from featenhancer import EnhancerConfig
from featenhancer.data import DatasetSpec, generate_dataset
from featenhancer.train import TrainConfig, train

spec = DatasetSpec(image_size=32, train_count=1200, val_count=300, seed=7)
train_set, val_set = generate_dataset(spec)
print("mean pixel value of the dark training images:", round(float(train_set.images.mean()), 4))

for label, enh in (("baseline", None), ("enhanced", EnhancerConfig())):
    cfg = TrainConfig(epochs=8, enhancer=enh, label=label, seed=0)
    ckpt = train(cfg, train_set, val_set)
    curve = " ".join(f"{r.val_acc:.3f}" for r in ckpt.rows)
    print(f"{label:9s} val_acc per epoch: {curve}")
