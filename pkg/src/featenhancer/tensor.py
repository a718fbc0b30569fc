"""Dense float64 tensors with a define-by-run reverse-mode tape.

Image-like tensors are laid out channels x height x width, optionally with a
leading batch axis.  Every operation runs eagerly on numpy arrays; when a
:class:`Tape` is active and at least one input is tracked, the operation is
appended to the tape together with a closure computing its vector-Jacobian
product.

    >>> w = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(relu(w))
    >>> tape.backward(loss)
    >>> w.grad
    array([1., 0.])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class TapeError(RuntimeError):
    """Raised on misuse of the differentiation tape."""


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``requires_grad=True`` marks a parameter: a leaf whose total derivative is
    written to ``grad`` by :meth:`Tape.backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node(NamedTuple):
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended as operations execute, so the sequence is
    topologically sorted by construction.  A tape can be replayed backward
    once (its nodes are freed during the pass); call :meth:`reset` to reuse
    it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._counter = itertools.count()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._leaves.clear()
        self._consumed = False

    def _track(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.node_id
        if t.requires_grad:
            t.node_id = next(self._counter)
            t._tape = self
            self._leaves[t.node_id] = t
            return t.node_id
        return None

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, vjp) -> Tensor:
        ids = tuple(self._track(t) for t in inputs)
        if all(i is None for i in ids):
            return out
        out.node_id = next(self._counter)
        out._tape = self
        self.nodes.append(Node(kind, ids, out.node_id, vjp))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked parameter."""
        if self._consumed:
            raise TapeError("tape already replayed; call reset() before a second backward")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss is detached from this tape (no tracked inputs reach it)")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        # nodes are released as they are consumed so cached im2col buffers
        # do not outlive the step
        while self.nodes:
            node = self.nodes.pop()
            g = grads.pop(node.output, None)
            if g is None:
                continue
            for i, gi in zip(node.inputs, node.vjp(g)):
                if i is None or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        for i, leaf in self._leaves.items():
            g = grads.get(i)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        for leaf in self._leaves.values():
            leaf._tape = None
        self._leaves.clear()


def _op(kind: str, inputs: Sequence[Tensor], data: np.ndarray, vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        tape.record(kind, inputs, out, vjp)
    return out


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN visible to the trainer's finiteness check
    return _op("relu", (a,), np.maximum(a.data, 0.0), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op("scale", (a,), a.data * c, lambda g: (g * c,))


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch ``relu``, ``add``, ``mul`` or ``scale`` by name."""
    if kind == "relu":
        return relu(a)
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# shape plumbing
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose_last needs at least two axes")
    data = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _op("transpose", (a,), data, lambda g: (np.swapaxes(g, -1, -2),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 3 or a.ndim != b.ndim:
        raise ShapeError(f"concat_channels: incompatible ranks {a.shape} and {b.shape}")
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(
            f"concat_channels: spatial/batch dims differ, {a.shape} vs {b.shape}")
    ca = a.shape[-3]
    data = np.concatenate([a.data, b.data], axis=-3)
    return _op("concat", (a, b), data, lambda g: (g[..., :ca, :, :], g[..., ca:, :, :]))


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    c = t.shape[-3]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: need 0 <= {start} < {stop} <= {c}")
    src = t.shape

    def vjp(g):
        full = np.zeros(src)
        full[..., start:stop, :, :] = g
        return (full,)

    return _op("slice", (t,), t.data[..., start:stop, :, :].copy(), vjp)


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _op("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, src).copy(),))


def mean_all(a: Tensor) -> Tensor:
    src, n = a.shape, a.size
    return _op("mean", (a,), np.asarray(a.data.mean()),
               lambda g: (np.broadcast_to(g / n, src).copy(),))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape[-1]} and {b.shape[-2]} differ")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _op("matmul", (a, b), ad @ bd, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (..., in)."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape} mismatch")
    xd, wd = x.data, weight.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return g @ wd, g2.T @ x2, g2.sum(axis=0)

    return _op("linear", (x, weight, bias), xd @ wd.T + bias.data, vjp)


def softmax_last_dim(t: Tensor) -> Tensor:
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _op("softmax", (t,), y,
               lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel_size: int
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel_size // 2)
        for field in ("out_channels", "in_channels", "kernel_size", "stride"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec.{field} must be positive")

    def output_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel_size) // self.stride + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels, k, k)

    @property
    def num_params(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_size ** 2 + self.out_channels


def _columns(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    # (B, C, Hp, Wp) -> (C*k*k, B*ho*wo); inner axis stays spatially contiguous
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    win = as_strided(xp, (c, k, k, b, ho, wo), (sc, sh, sw, sb, sh * s, sw * s), writeable=False)
    return win.reshape(c * k * k, b * ho * wo)


def _pad(xd: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return xd
    b, c, h, w = xd.shape
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = xd
    return xp


def _correlate(xd: np.ndarray, wmat: np.ndarray, k: int, s: int, p: int, ho: int, wo: int):
    xp = _pad(xd, p)
    cols = _columns(xp, k, s, ho, wo)
    out = (wmat @ cols).reshape(wmat.shape[0], xd.shape[0], ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols, xp.shape


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with zero padding, as in every CNN framework."""
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be CxHxW or BxCxHxW, got {x.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    b, c, h, w = xd.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input channels {c} != spec in_channels {spec.in_channels}")
    if h < 1 or w < 1:
        raise ShapeError("conv2d: input spatial dims must be >= 1")
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_size(h), spec.output_size(w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: zero-size output for input {h}x{w} with K={k} S={s} P={p}")
    wmat = weight.data.reshape(spec.out_channels, -1)
    out, cols, padded_shape = _correlate(xd, wmat, k, s, p, ho, wo)
    out += bias.data[:, None, None]
    same = s == 1 and 2 * p == k - 1

    def vjp(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
        dw = (g2 @ cols.T).reshape(weight.shape)
        db = g2.sum(axis=1)
        if same:
            # input gradient of a "same" convolution is a correlation with the flipped kernel
            flipped = weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1].reshape(c, -1)
            dx = _correlate(np.ascontiguousarray(g4), flipped, k, 1, p, h, w)[0]
        else:
            dcols = (wmat.T @ g2).reshape(c, k, k, b, ho, wo)
            dxp = np.zeros(padded_shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, p:p + h, p:p + w]
        return (dx if batched else dx[0]), dw, db

    return _op("conv2d", (x, weight, bias), out if batched else out[0], vjp)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of half-pixel bilinear weights with edge clamp."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"bilinear resize: sizes must be positive, got {n_in}->{n_out}")
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def adaptive_avg_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix for the standard adaptive binning rule."""
    if not 1 <= n_out <= n_in:
        raise ShapeError(f"adaptive_avg: target {n_out} must be in [1, {n_in}]")
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _separable(kind: str, t: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    # out = rows @ X @ cols.T over the last two axes
    data = rows @ t.data @ cols.T
    return _op(kind, (t,), data, lambda g: (rows.T @ g @ cols,))


def bilinear_resize(t: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear resize: zero target size {out_h}x{out_w}")
    h, w = t.shape[-2:]
    return _separable("bilinear", t, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w))


def bilinear_upsample(t: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = t.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample: zero target size {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than {h}x{w}")
    return bilinear_resize(t, out_h, out_w)


def adaptive_avg_pool2d(t: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = t.shape[-2:]
    return _separable("adaptive_avg", t, adaptive_avg_matrix(h, out_h), adaptive_avg_matrix(w, out_w))


def max_pool2d(t: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first maximum."""
    h, w = t.shape[-2:]
    if window < 1 or h % window or w % window:
        raise ShapeError(f"max_pool2d: window {window} does not tile {h}x{w}")
    lead = t.shape[:-2]
    ho, wo = h // window, w // window
    blocks = t.data.reshape(*lead, ho, window, wo, window)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, ho, wo, window, window)
        return (np.moveaxis(gb, -2, -3).reshape(t.shape),)

    return _op("max_pool", (t,), out, vjp)


def pool2d(kind: str, t: Tensor, target) -> Tensor:
    """``kind='max'`` takes a window size; ``kind='adaptive_avg'`` a (h, w) target."""
    if kind == "max":
        return max_pool2d(t, int(target))
    if kind == "adaptive_avg":
        oh, ow = (target, target) if np.isscalar(target) else target
        return adaptive_avg_pool2d(t, int(oh), int(ow))
    raise ValueError(f"unknown pool kind {kind!r}")


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)
