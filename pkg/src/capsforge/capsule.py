"""Capsule primitives: squash, routing-by-agreement, primary capsules, losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_EPS = 1e-12
ROUTING_CAPSULE_COUNTS = (8, 16, 32, 64)


@dataclass(frozen=True)
class CapsuleLayerConfig:
    num_capsules: int = 8
    capsule_dim: int = 2
    routing_iterations: int = 3

    def __post_init__(self):
        if self.num_capsules not in ROUTING_CAPSULE_COUNTS:
            raise ValueError(f"num_capsules must be one of {ROUTING_CAPSULE_COUNTS}, got {self.num_capsules}")
        if self.capsule_dim < 1:
            raise ValueError("capsule_dim must be positive")
        if not 1 <= self.routing_iterations <= 5:
            raise ValueError(f"routing_iterations must be in 1..5, got {self.routing_iterations}")


@dataclass(frozen=True)
class LossWeights:
    reconstruction_weight: float = 0.0005
    margin_plus: float = 0.9
    margin_minus: float = 0.1
    down_weight: float = 0.5

    def __post_init__(self):
        values = (self.reconstruction_weight, self.margin_plus, self.margin_minus, self.down_weight)
        if min(values) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.margin_plus > self.margin_minus:
            raise ValueError("margin_plus must exceed margin_minus")


@dataclass
class CapsuleLayerState:
    """Snapshot of one routing pass (batched: leading axis is the sample)."""

    predictions: Tensor  # u_hat [B, num_in, num_out, out_dim]
    logits: np.ndarray  # b [B, num_in, num_out], logits that produced the final couplings
    couplings: Tensor  # c [B, num_in, num_out]
    outputs: Tensor  # v [B, num_out, out_dim]


def vector_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Epsilon-stabilised Euclidean norm along ``axis`` (axis is removed)."""
    return T.sqrt(T.add(T.tsum(T.square(x), axis=axis), NORM_EPS))


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Rescale vectors along ``axis`` to length ``|s|^2 / (1 + |s|^2)``, keeping direction."""
    if axis < 0:
        axis += s.ndim
    sq = T.tsum(T.square(s), axis=axis, keepdims=True)
    return T.mul(s, T.expand(_squash_scale(sq), s.shape))


def _squash_scale(sq: Tensor) -> Tensor:
    """``sqrt(q) / (1 + q)`` for squared norms ``q``; exact, with the derivative at ``q = 0`` taken as 0.

    The derivative is unbounded at 0 but multiplies ``s``, whose contribution
    to the squash Jacobian vanishes there.
    """
    q = sq.data
    root = np.sqrt(q)
    out = root / (1.0 + q)

    def backward(g):
        safe = np.where(root > 0, root, 1.0)
        d = np.where(root > 0, 0.5 / safe / (1.0 + q) - root / (1.0 + q) ** 2, 0.0)
        return (g * d,)

    return T._make(out, (sq,), backward, "squash_scale")


def capsule_predictions(u: Tensor, weights: Tensor) -> Tensor:
    """Prediction vectors ``u_hat[b,i,j] = W[i,j] @ u[b,i]``.

    ``u`` is [B, num_in, in_dim]; ``weights`` is [num_in, num_out, out_dim, in_dim].
    """
    if u.ndim != 3 or u.shape[1:] != (weights.shape[0], weights.shape[3]):
        raise ValueError(f"capsule inputs {u.shape} do not match transform {weights.shape}")
    B, I, K = u.shape
    _, J, D, _ = weights.shape
    wr = weights.data.reshape(I, J * D, K)
    ud = u.data
    out = np.matmul(wr[None], ud[..., None])[..., 0].reshape(B, I, J, D)

    def backward(g):
        g3 = g.reshape(B, I, J * D)
        gu = np.matmul(g3[:, :, None, :], wr[None])[:, :, 0, :] if u.requires_grad else None
        gw = np.matmul(g3.transpose(1, 2, 0), ud.transpose(1, 0, 2)).reshape(I, J, D, K) if weights.requires_grad else None
        return gu, gw

    return T._make(out, (u, weights), backward, "capsule_predictions")


def _weighted_votes(c: Tensor, u_hat: Tensor) -> Tensor:
    """``s[b,j] = sum_i c[b,i,j] * u_hat[b,i,j]``."""
    cd, ud = c.data, u_hat.data
    out = np.matmul(cd.transpose(0, 2, 1)[:, :, None, :], ud.transpose(0, 2, 1, 3))[:, :, 0, :]

    def backward(g):
        gc = np.matmul(ud[..., None, :], g[:, None, :, :, None])[..., 0, 0] if c.requires_grad else None
        gu = cd[..., None] * g[:, None] if u_hat.requires_grad else None
        return gc, gu

    return T._make(out, (c, u_hat), backward, "weighted_votes")


def _agreement(u_hat: Tensor, v: Tensor) -> Tensor:
    """``a[b,i,j] = u_hat[b,i,j] . v[b,j]``."""
    ud, vd = u_hat.data, v.data
    out = np.matmul(ud[..., None, :], vd[:, None, :, :, None])[..., 0, 0]

    def backward(g):
        gu = g[..., None] * vd[:, None] if u_hat.requires_grad else None
        gv = np.matmul(g.transpose(0, 2, 1)[:, :, None, :], ud.transpose(0, 2, 1, 3))[:, :, 0, :] if v.requires_grad else None
        return gu, gv

    return T._make(out, (u_hat, v), backward, "agreement")


def dynamic_routing(u_hat: Tensor, iterations: int = 3, detach_history: bool = False) -> CapsuleLayerState:
    """Routing-by-agreement between ``num_in`` and ``num_out`` capsules.

    ``u_hat`` is [num_in, num_out, dim] or batched [B, num_in, num_out, dim].
    Logits start at zero; each pass takes a softmax over the output axis,
    forms ``s_j = sum_i c_ij u_hat_j|i``, squashes it, and, except on the last
    pass, adds the agreement ``u_hat_j|i . v_j`` to the logits.

    With ``detach_history`` the logit updates are computed without recording
    gradients, so only the final pass is differentiated.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    single = u_hat.ndim == 3
    if single:
        u_hat = T.reshape(u_hat, (1,) + u_hat.shape)
    if u_hat.ndim != 4:
        raise ValueError(f"u_hat must be [num_in, num_out, dim] or batched, got {u_hat.shape}")
    B, n_in, n_out, _ = u_hat.shape
    logits = Tensor(np.zeros((B, n_in, n_out)))
    for it in range(iterations):
        couplings = T.softmax(logits, axis=2)
        s = _weighted_votes(couplings, u_hat)
        v = squash(s)
        if it == iterations - 1:
            break
        if detach_history:
            with T.no_grad():
                agreement = _agreement(u_hat, v)
            logits = Tensor(logits.data + agreement.data)
        else:
            logits = T.add(logits, _agreement(u_hat, v))
    state = CapsuleLayerState(predictions=u_hat, logits=logits.data, couplings=couplings, outputs=v)
    if single:
        state = CapsuleLayerState(
            predictions=T.reshape(u_hat, u_hat.shape[1:]),
            logits=logits.data[0],
            couplings=T.reshape(couplings, couplings.shape[1:]),
            outputs=T.reshape(v, v.shape[1:]),
        )
    return state


def primary_capsules(features: Tensor, capsule_dim: int) -> Tensor:
    """Group feature maps into squashed capsule vectors.

    Each spatial position contributes ``channels / capsule_dim`` capsules whose
    components are consecutive channels at that position. ``features`` is
    [F, H, W] (result [F*H*W/dim, dim]) or batched [B, F, H, W].
    """
    single = features.ndim == 3
    f = T.reshape(features, (1,) + features.shape) if single else features
    B, C, H, W = f.shape
    if (C * H * W) % capsule_dim or C % capsule_dim:
        raise ValueError(f"cannot group {C}x{H}x{W} features into capsules of dim {capsule_dim}")
    grouped = T.transpose(T.reshape(f, (B, C // capsule_dim, capsule_dim, H, W)), (0, 3, 4, 1, 2))
    caps = squash(T.reshape(grouped, (B, -1, capsule_dim)))
    return T.reshape(caps, caps.shape[1:]) if single else caps


def capsule_lengths(v: Tensor) -> Tensor:
    return vector_norm(v, axis=-1)


def margin_loss(v_norms: Tensor, one_hot: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """``sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2``.

    Works on a single sample [K] or a batch [B, K] (summed over the batch).
    """
    labels = one_hot.data
    if labels.shape != v_norms.shape:
        raise ValueError(f"label shape {labels.shape} does not match norms {v_norms.shape}")
    if not (np.all(np.isin(labels, (0.0, 1.0))) and np.all(labels.sum(axis=-1) == 1)):
        raise ValueError("label must be one-hot")
    present = T.square(T.relu(T.sub(Tensor(np.full(labels.shape, weights.margin_plus)), v_norms)))
    absent = T.square(T.relu(T.sub(v_norms, Tensor(np.full(labels.shape, weights.margin_minus)))))
    per_class = T.add(T.mul(present, Tensor(labels)), T.mul(absent, Tensor(weights.down_weight * (1.0 - labels))))
    return T.tsum(per_class)


def reconstruction_loss(decoded: Tensor, original, weight: float) -> Tensor:
    """``weight * sum((decoded - original)^2)``; shapes must agree exactly."""
    original = T.as_tensor(original)
    if decoded.shape != original.shape:
        raise ValueError(f"reconstruction shape {decoded.shape} does not match original {original.shape}")
    return T.mul(T.tsum(T.square(T.sub(decoded, original))), float(weight))


def one_hot(labels, num_classes: int = 2) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return Tensor(out)


def count_parameters(model) -> int:
    """Number of trainable scalars (``model`` may also be a list of tensors)."""
    params = model.parameters() if hasattr(model, "parameters") else model
    return int(sum(int(np.prod(p.shape)) for p in params))
