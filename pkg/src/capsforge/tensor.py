"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.

Broadcasting is deliberately absent: binary ops require identical shapes and
callers use :func:`expand` (whose backward sums) when they need a broadcast.
The one exception is the bias term of :func:`conv2d` and :func:`dense`.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, routing constants)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class BackwardError(RuntimeError):
    pass


class Tensor:
    """An n-d float64 array plus optional gradient bookkeeping."""

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = ""):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable | None = _backward
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- reverse pass -----------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        The loss must be a scalar. A graph can be differentiated once; running
        backward again, or into leaves whose gradient was never reset with
        :meth:`zero_grad`, raises :class:`BackwardError`.
        """
        if self.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise BackwardError("backward already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise BackwardError("loss does not depend on any tensor with requires_grad=True")
        order = _topological_order(self)
        for node in order:
            if node.is_leaf and node.requires_grad and node.grad is not None:
                raise BackwardError("leaf gradient already populated; call zero_grad() before a second backward")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        owned: set[int] = set()  # accumulators allocated here, safe to add into in place
        for node in reversed(order):
            g = grads.pop(id(node), None)
            owned.discard(id(node))
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key not in grads:
                    grads[key] = pg
                elif key in owned:
                    grads[key] += pg
                else:
                    grads[key] = grads[key] + pg
                    owned.add(key)
        for node in order:
            node._consumed = True


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t._op = ""
    t._consumed = False
    return t


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = _wrap(np.asarray(data))
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (use expand() to broadcast)")


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), f"pow{p:g}")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def gate(a: Tensor, mask) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``mask``.

    ``mask`` broadcasts against ``a`` (typically one weight per sample), so a
    zero entry stops that sample's gradient from reaching upstream tensors.
    """
    m = np.asarray(mask, dtype=DTYPE)
    return _make(a.data, (a,), lambda g: (g * m,), "gate")


# -- activations ------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (np.where(out > 0, g, 0.0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# -- reductions and shape ops ----------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor, start: int = 1) -> Tensor:
    """Collapse every axis from ``start`` onward into one."""
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape``; backward sums the broadcast axes."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0:
        raise ValueError(f"cannot expand {src} to {shape}")
    out = np.broadcast_to(a.data, shape)

    def backward(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), backward, "expand")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = a.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose gradients are themselves einsums.

    Each index of an operand must appear in the other operand or in the
    output, otherwise the gradient is not expressible this way.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    for own, other in ((a_sub, b_sub), (b_sub, a_sub)):
        if len(set(own)) != len(own):
            raise ValueError(f"einsum: repeated index in {own!r}")
        missing = set(own) - set(other) - set(out_sub)
        if missing:
            raise ValueError(f"einsum: index {sorted(missing)} of {own!r} summed in one operand only")
    ad, bd = a.data, b.data
    out = np.einsum(subscripts, ad, bd, optimize=True)

    def backward(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, bd, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, ad, optimize=True) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, f"einsum[{subscripts}]")


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """``out[..., i] = sum_j weights[i, j] * x[..., j] + bias[i]``.

    ``x`` is either a single vector ``[n]`` or a batch ``[B, n]``.
    """
    if weights.ndim != 2:
        raise ValueError(f"dense: weights must be [m, n], got {weights.shape}")
    m, n = weights.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise ValueError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if bias is not None and bias.shape != (m,):
        raise ValueError(f"dense: bias {bias.shape} does not match {m} outputs")
    xd, wd = x.data, weights.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = (np.outer(g, xd) if g.ndim == 1 else g.T @ xd) if weights.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "dense")


# -- convolution and pooling -----------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    pad = kernel - 1 if padding == "same" else 0
    return (size + pad - kernel) // stride + 1


def _same_pads(kernel: int) -> tuple[int, int]:
    total = kernel - 1
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation of ``x`` [C,H,W] or [B,C,H,W] with ``kernels`` [F,C,kh,kw].

    ``same`` padding adds ``kernel - 1`` zeros per axis, the odd one going to
    the bottom/right edge; with stride 1 this preserves the spatial size.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding not in ("valid", "same"):
        raise ValueError(f"conv2d: padding must be 'valid' or 'same', got {padding!r}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d: expected input [C,H,W]/[B,C,H,W] and kernels [F,C,kh,kw], got {x.shape}, {kernels.shape}")
    B, C, H, W = xd.shape
    F, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise ValueError(f"conv2d: input has {C} channels but kernels expect {Ck}")
    if bias is not None and bias.shape != (F,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match {F} filters")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        pt = pl = 0
        xp = xd
    Hp, Wp = xp.shape[2], xp.shape[3]
    if kh > Hp or kw > Wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    K = C * kh * kw

    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    # cols[b, (c, i, j), (y, x)]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(B, K, Ho * Wo)
    wmat = kernels.data.reshape(F, K)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, F, Ho, Wo)
    if single:
        out = out[0]
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        g3 = (g[None] if single else g).reshape(B, F, Ho * Wo)
        gw = None
        if kernels.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(F, C, kh, kw)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros((B, C, Hp, Wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pt : pt + H, pl : pl + W]
            if single:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes (trailing remainder dropped).

    Ties send the gradient to the first maximum in row-major window order.
    """
    shape = x.shape
    Ho, Wo = shape[-2] // size, shape[-1] // size
    views = [x.data[..., i : i + size * Ho : size, j : j + size * Wo : size] for i in range(size) for j in range(size)]
    out = views[0].copy()
    winner = np.zeros(out.shape, dtype=np.int8)
    for k, v in enumerate(views[1:], start=1):
        better = v > out
        np.copyto(out, v, where=better)
        winner[better] = k

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        for k in range(size * size):
            i, j = divmod(k, size)
            full[..., i : i + size * Ho : size, j : j + size * Wo : size] = np.where(winner == k, g, 0.0)
        return (full,)

    return _make(out, (x,), backward, "maxpool2d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- initialisation ---------------------------------------------------------


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, name) so draws do not depend on creation order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


# -- gradient checking ------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], epsilon: float = 1e-5) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` takes the input tensors and returns a scalar tensor. Relative error
    per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: loss is not finite")
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + epsilon
                fp = float(f(*inputs).data)
                flat[k] = orig - epsilon
                fm = float(f(*inputs).data)
                flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError(f"grad_check: non-finite loss perturbing coordinate {k}")
                numeric = (fp - fm) / (2.0 * epsilon)
                err = abs(gflat[k] - numeric) / max(1e-8, abs(gflat[k]) + abs(numeric))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
