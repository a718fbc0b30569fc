"""Small CNN classifier standing in for a detector, plus its cross-entropy loss."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .enhancer import EnhancerConfig, Params, enhance
from .tensor import ConvSpec, ShapeError, Tensor

CONV1 = ConvSpec(16, 3, 3)
CONV2 = ConvSpec(32, 16, 3)


def init_head(num_classes: int, image_size: int | tuple[int, int], rng: np.random.Generator) -> Params:
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    if h % 4 or w % 4:
        raise ShapeError(f"head needs H, W divisible by 4, got {h}x{w}")
    params: Params = {}
    for name, spec in (("head.conv1", CONV1), ("head.conv2", CONV2)):
        fan_in = spec.in_channels * spec.kernel_size ** 2
        params[f"{name}.weight"] = Tensor(rng.standard_normal(spec.weight_shape) * math.sqrt(2.0 / fan_in),
                                          requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True, name=f"{name}.bias")
    d = CONV2.out_channels * (h // 4) * (w // 4)
    params["head.fc.weight"] = Tensor(rng.standard_normal((num_classes, d)) / math.sqrt(d),
                                      requires_grad=True, name="head.fc.weight")
    params["head.fc.bias"] = Tensor(np.zeros(num_classes), requires_grad=True, name="head.fc.bias")
    return params


def head_forward(x: Tensor, head: Params) -> Tensor:
    """Logits of shape (num_classes,) or (B, num_classes) for a (B x) 3 x H x W input."""
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ShapeError(f"head expects a 3-channel image, got {x.shape}")
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f"head needs H, W divisible by 4, got {h}x{w}")
    y = T.relu(T.conv2d(x, head["head.conv1.weight"], head["head.conv1.bias"], CONV1))
    y = T.max_pool2d(y, 2)
    y = T.relu(T.conv2d(y, head["head.conv2.weight"], head["head.conv2.bias"], CONV2))
    y = T.max_pool2d(y, 2)
    flat = T.reshape(y, (*y.shape[:-3], -1))
    if flat.shape[-1] != head["head.fc.weight"].shape[1]:
        raise ShapeError(
            f"head fc expects {head['head.fc.weight'].shape[1]} features, got {flat.shape[-1]}")
    return T.linear(flat, head["head.fc.weight"], head["head.fc.bias"])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (or a single sample)."""
    z = logits.data if logits.ndim == 2 else logits.data[None]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but {lab.size} labels")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, lab]))
    probs = np.exp(shifted - logsum[:, None])

    def vjp(g):
        d = probs.copy()
        d[rows, lab] -= 1.0
        d *= g / n
        return (d if logits.ndim == 2 else d[0],)

    return T._op("cross_entropy", (logits,), np.asarray(loss), vjp)


def model_logits(images: Tensor, head: Params, enhancer: Params | None = None,
                 cfg: EnhancerConfig | None = None) -> Tensor:
    x = images if enhancer is None else enhance(images, enhancer, cfg)
    return head_forward(x, head)


def predict(images: np.ndarray, head: Params, enhancer: Params | None = None,
            cfg: EnhancerConfig | None = None, batch_size: int = 32) -> np.ndarray:
    """Logits for an (N, 3, H, W) array, evaluated without recording a tape."""
    out = []
    for start in range(0, len(images), batch_size):
        batch = Tensor(images[start:start + batch_size])
        out.append(model_logits(batch, head, enhancer, cfg).data)
    return np.concatenate(out, axis=0)


def evaluate(head: Params, images: np.ndarray, labels: np.ndarray, enhancer: Params | None = None,
             cfg: EnhancerConfig | None = None, batch_size: int = 32) -> float:
    """Fraction of samples whose argmax logit equals the label.

    Passing ``enhancer=None`` evaluates the head directly on raw images.
    """
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(images, head, enhancer, cfg, batch_size)
    correct = int(np.count_nonzero(logits.argmax(axis=1) == np.asarray(labels)))
    return correct / len(images)
