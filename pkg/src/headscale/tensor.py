"""
Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable op builds its output through ``_result``; when any
input requires a gradient the output remembers its parents and a closure
mapping the upstream gradient to one gradient per parent. ``backward``
walks the recorded graph in reverse topological order and accumulates
into the ``grad`` slot of leaf tensors only.

Ops are batched: leading axes are treated as independent batch axes, which
is what keeps a 4-layer model trainable on a single CPU core.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError, ParameterError, TokenIndexError

_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Temporarily switch NaN/Inf detection at op boundaries on or off."""
    previous = _CHECK_FINITE
    set_check_finite(enabled)
    try:
        yield
    finally:
        set_check_finite(previous)


def _assert_finite(arr: np.ndarray, where: str) -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        _assert_finite(self.data, name or "Tensor()")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _assert_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() on a tensor with no recorded graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may match a exactly or broadcast over a's leading axes."""
    if b.shape != a.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    lead = tuple(range(a.ndim - b.ndim))

    def _bw(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _result(a.data + b.data, (a, b), _bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), _bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),), "mean")


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def _bw(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _result(out, (a,), _bw, "silu")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing; the slice is copied."""
    out = np.array(a.data[index], dtype=np.float64)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), _bw, "take")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either batched with exactly the same leading axes as ``a`` or a
    plain 2-D matrix shared across all of ``a``'s leading axes (a weight).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")
    if shared:
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def _bw(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), _bw, "matmul")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / rms(x) * weight over the last axis."""
    if weight.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm: weight {weight.shape} does not match input {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * inv

    def _bw(g):
        gw = None
        gx = None
        if weight.requires_grad:
            gw = (g * normed).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gn = g * weight.data
            gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return _result(normed * weight.data, (x, weight), _bw, "rms_norm")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TokenIndexError(f"token ids must be integers, got dtype {ids.dtype}")
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenIndexError(f"token id out of range [0, {vocab}): min={ids.min()}, max={ids.max()}")

    def _bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), _bw, "embedding")


# ---------------------------------------------------------------------------
# attention pieces


@lru_cache(maxsize=32)
def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where query row i may attend to key j <= i."""
    mask = np.tril(np.ones((n, n), dtype=bool))
    mask.setflags(write=False)
    return mask


def _valid_mask(shape: tuple[int, ...], mask) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, (int, np.integer)):
        n = shape[-1]
        if mask < 1:
            raise ParameterError("softmax_temp: empty mask (prefix length < 1)")
        if mask > n:
            raise ParameterError(f"softmax_temp: mask length {mask} exceeds row length {n}")
        return np.arange(n) < mask
    mask = np.asarray(mask, dtype=bool)
    if not np.broadcast_to(mask, shape).any(axis=-1).all():
        raise ParameterError("softmax_temp: a row has an empty mask")
    return mask


def softmax_temp(z: Tensor, lam, mask=None) -> Tensor:
    """Temperature softmax over the last axis: exp(lam*z_j) / sum_k exp(lam*z_k).

    Args:
        z: logits, shape (..., n).
        lam: positive float, or a Tensor broadcastable against ``z`` (for
            per-head temperatures use shape (H, 1, 1)). Gradients flow into
            it when it requires them.
        mask: None (all valid), an int prefix length, or a boolean array
            broadcastable to ``z`` marking valid entries. Masked entries come
            out exactly 0.
    """
    lam_t = lam if isinstance(lam, Tensor) else None
    lam_arr = lam_t.data if lam_t is not None else np.asarray(lam, dtype=np.float64)
    if not np.all(lam_arr > 0):
        raise ParameterError(f"softmax_temp: temperature must be > 0, got min {lam_arr.min()}")
    valid = _valid_mask(z.shape, mask)

    scaled = lam_arr * z.data
    if valid is not None:
        scaled = np.where(valid, scaled, -np.inf)
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    p = np.exp(scaled)
    p /= p.sum(axis=-1, keepdims=True)

    def _bw(g):
        du = p * (g - (g * p).sum(axis=-1, keepdims=True))
        gz = du * lam_arr if z.requires_grad else None
        glam = None
        if lam_t is not None and lam_t.requires_grad:
            full = du * np.where(p > 0, z.data, 0.0)
            glam = _sum_to_shape(full, lam_t.shape)
        return (gz, glam) if lam_t is not None else (gz,)

    parents = (z, lam_t) if lam_t is not None else (z,)
    return _result(p, parents, _bw, "softmax_temp")


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def rope_angles(positions, d: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    if d % 2:
        raise ConfigError(f"rotary encoding needs an even head width, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = positions[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate dimension pairs (2j, 2j+1) of the row at position p by p * base**(-2j/d).

    ``x`` has shape (..., T, d); ``positions`` has length T.
    """
    d = x.shape[-1]
    cos, sin = rope_angles(positions, d, base)
    if cos.shape[0] != x.shape[-2]:
        raise DimensionError(f"rope: {cos.shape[0]} positions for {x.shape[-2]} rows")

    def _rotate(arr, s):
        even, odd = arr[..., 0::2], arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = even * cos - odd * s
        out[..., 1::2] = even * s + odd * cos
        return out

    return _result(_rotate(x.data, sin), (x,), lambda g: (_rotate(g, -sin),), "rope")


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_targets(targets: np.ndarray, vocab: int, lead_shape: tuple[int, ...]) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != lead_shape:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {lead_shape} + (V,)")
    if targets.dtype.kind not in "iu":
        raise TokenIndexError(f"targets must be integers, got dtype {targets.dtype}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f"target id out of range [0, {vocab}): min={targets.min()}, max={targets.max()}")
    return targets


def token_nll(logits: np.ndarray, targets) -> np.ndarray:
    """Per-position negative log-likelihood, no graph recorded."""
    targets = _check_targets(targets, logits.shape[-1], logits.shape[:-1])
    logp = log_softmax(logits)
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits)."""
    vocab = logits.shape[-1]
    targets = _check_targets(targets, vocab, logits.shape[:-1])
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    n = targets.size
    loss = -picked.sum() / n

    def _bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (g / n),)

    return _result(np.asarray(loss), (logits,), _bw, "cross_entropy")
