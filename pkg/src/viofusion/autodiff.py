"""Tape-based reverse-mode differentiation over dense float64 arrays.

The engine records forward operations on an explicit :class:`Tape` (a
Wengert list: execution order is already topological). Running an op with
no active tape just computes values, which is what inference uses.

Supported shapes are exactly what the fusion network needs: tensors of any
rank, matmul between equal-rank stacks or against an unbatched weight
matrix, and trailing-axis broadcasting for bias-style adds. Anything
fancier is out of scope on purpose.

Gradient checking (`finite_diff_check`) is the correctness oracle for every
op and for whole networks; it relies on float64 throughout.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_LN_EPS = 1e-5


class Tensor:
    """A dense float64 array plus the bookkeeping backward needs.

    ``grad`` is populated by :meth:`Tape.backward`; it is overwritten (not
    accumulated) across backward calls, so replaying a tape is idempotent.
    """

    __slots__ = ("data", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed ops; backward replays it exactly once in
    reverse. A tape is confined to one thread; independent tapes may run
    concurrently."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active in this thread")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``output`` into every tensor on the tape.

        Without a seed the output must be scalar and is seeded with 1. A
        seed of the output's shape supports vector-Jacobian products (used
        to splice externally computed loss gradients into the graph).
        Gradients from previous backward calls are cleared first, so two
        replays of the same tape produce bitwise-identical results.
        """
        for node in self._nodes:
            node.grad = None
            for p in node._parents:
                p.grad = None
        if seed is None:
            if output.data.ndim != 0:
                raise ValueError(
                    f"backward needs a scalar loss, got shape {output.data.shape}"
                )
            output.grad = np.ones((), dtype=np.float64)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ValueError(
                    f"seed shape {seed.shape} != output shape {output.data.shape}"
                )
            output.grad = seed
        for node in reversed(self._nodes):
            if node.grad is None or node._vjp is None:
                continue
            node._vjp(node.grad)


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _ACTIVE_TAPE is not None:
        out._parents = parents
        out._vjp = vjp
        _ACTIVE_TAPE._nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the leading axes a trailing broadcast introduced."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _trailing_broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    return len(b) <= len(a) and a[len(a) - len(b):] == b


def add(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    """Elementwise a + b; b may be lower-rank and broadcasts over leading
    axes (bias vectors, positional encodings), or a raw array constant."""
    const = not isinstance(b, Tensor)
    bd = np.asarray(b, dtype=np.float64) if const else b.data
    if a.data.shape != bd.shape and not _trailing_broadcast_ok(a.data.shape, bd.shape):
        raise ValueError(f"broadcast mismatch: {a.data.shape} + {bd.shape}")
    out = Tensor(a.data + bd)

    def vjp(g):
        _accum(a, g)
        if not const:
            _accum(b, _reduce_to(g, bd.shape))

    return _record(out, (a,) if const else (a, b), vjp)


def sub(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    const = not isinstance(b, Tensor)
    bd = np.asarray(b, dtype=np.float64) if const else b.data
    if a.data.shape != bd.shape and not _trailing_broadcast_ok(a.data.shape, bd.shape):
        raise ValueError(f"broadcast mismatch: {a.data.shape} - {bd.shape}")
    out = Tensor(a.data - bd)

    def vjp(g):
        _accum(a, g)
        if not const:
            _accum(b, -_reduce_to(g, bd.shape))

    return _record(out, (a,) if const else (a, b), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.data * s)

    def vjp(g):
        _accum(x, g * s)

    return _record(out, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands carry identical leading batch axes, or ``b`` is a
    plain 2-D weight matrix shared across the batch.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs matrices, got {ad.shape} @ {bd.shape}")
    weight_style = bd.ndim == 2
    if not weight_style and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"batch mismatch: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    def vjp(g):
        _accum(a, g @ np.swapaxes(bd, -1, -2))
        if weight_style and ad.ndim > 2:
            k, n = bd.shape
            _accum(b, ad.reshape(-1, k).T @ g.reshape(-1, n))
        else:
            _accum(b, np.swapaxes(ad, -1, -2) @ g)

    return _record(out, (a, b), vjp)


def transpose_last2(x: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(x.data, -1, -2))

    def vjp(g):
        _accum(x, np.swapaxes(g, -1, -2))

    return _record(out, (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.data.shape
    out = Tensor(x.data.reshape(shape))

    def vjp(g):
        _accum(x, g.reshape(orig))

    return _record(out, (x,), vjp)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))

    def vjp(g):
        _accum(x, np.transpose(g, inverse))

    return _record(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def vjp(g):
        _accum(x, g * mask)

    return _record(out, (x,), vjp)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction.

    ``mask`` is an optional additive constant (0 for allowed entries, -inf
    for forbidden ones) applied before normalization; forbidden entries come
    out exactly 0. Each row must keep at least one allowed entry.
    """
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (eps 1e-5), then
    apply the elementwise affine (gain, bias)."""
    d = x.data.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs feature width >= 2")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"gain/bias shapes {gain.data.shape}/{bias.data.shape} != ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def vjp(g):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))

    return _record(out, (x, gain, bias), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def vjp(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _record(out, (x,), vjp)


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6
) -> float:
    """Max relative error between tape gradients of f and central differences.

    ``f`` must build a scalar Tensor from ``x`` using ops from this module.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    element; the max over elements is returned.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    with Tape() as tape:
        loss = f(x)
    tape.backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
