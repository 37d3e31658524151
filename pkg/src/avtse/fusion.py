"""Modality fusion: summation, additive attention, and normalized attention.

All functions are pure in the model parameters and differentiable end to
end. They accept either single-item inputs (audio embedding (D,), visual
and mixture embeddings (T,D)) or batched ones with a leading batch axis;
outputs mirror the input convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIMPLEX_TOL = 1e-6


@dataclass
class AttentionParams:
    """Additive-attention parameters plus the sharpening factor.

    w: (1, D_att) output projection, W: (D_att, D_e) mixture path,
    V: (D_att, D_e) clue path, b: (D_att,) bias.
    """

    w: Tensor
    W: Tensor
    V: Tensor
    b: Tensor
    sharpen: float = 2.0

    def __post_init__(self):
        if self.sharpen <= 0:
            raise ValueError(f"sharpening factor must be positive, got {self.sharpen}")


@dataclass
class FusionOutput:
    """Fused clue sequence plus the attention trace that produced it.

    z_av: (T,D) or (B,T,D); weights: (T,2) or (B,T,2) rows on the simplex
    (audio first); scale: (T,) or (B,T), all ones outside normalized mode.
    """

    z_av: Tensor
    weights: Tensor
    scale: Tensor


def _promote(z_a, z_v, z_m=None):
    """Lift single-item inputs to batch form; returns tensors + flag."""
    z_a = ad._as_tensor(z_a)
    z_v = ad._as_tensor(z_v)
    batched = z_v.ndim == 3
    if not batched:
        if z_a.ndim == 1:
            z_a = ad.reshape(z_a, (1, 1, z_a.shape[0]))
        elif z_a.ndim == 2:
            z_a = ad.reshape(z_a, (1,) + z_a.shape)
        z_v = ad.reshape(z_v, (1,) + z_v.shape)
        if z_m is not None:
            z_m = ad._as_tensor(z_m)
            z_m = ad.reshape(z_m, (1,) + z_m.shape)
    else:
        if z_a.ndim == 2:
            z_a = ad.reshape(z_a, (z_a.shape[0], 1, z_a.shape[1]))
        if z_m is not None:
            z_m = ad._as_tensor(z_m)
    if z_a.shape[-1] != z_v.shape[-1]:
        raise ad.ShapeError(f"fusion: audio dim {z_a.shape[-1]} != visual dim {z_v.shape[-1]}")
    if z_m is not None and z_m.shape[:2] != z_v.shape[:2]:
        raise ad.ShapeError(f"fusion: mixture frames {z_m.shape[:2]} != visual frames {z_v.shape[:2]}")
    return z_a, z_v, z_m, batched


def _demote(out: FusionOutput, batched: bool) -> FusionOutput:
    if batched:
        return out
    t, d = out.z_av.shape[1], out.z_av.shape[2]
    return FusionOutput(
        z_av=ad.reshape(out.z_av, (t, d)),
        weights=ad.reshape(out.weights, (t, 2)),
        scale=ad.reshape(out.scale, (t,)),
    )


def additive_score(z_m_t, z_psi_t, params: AttentionParams) -> Tensor:
    """Bahdanau-style score for one frame: w . tanh(W z_m + V z_psi + b)."""
    z_m_t = ad._as_tensor(z_m_t)
    z_psi_t = ad._as_tensor(z_psi_t)
    pre = ad.elem_add(ad.elem_add(ad.linear(z_m_t, params.W), ad.linear(z_psi_t, params.V)), params.b)
    e = ad.linear(ad.tanh(pre), params.w)
    return ad.reshape(e, ())


def attention_weights(e_a: float, e_v: float, sharpen: float) -> tuple:
    """Softmax over the two modality scores with sharpening applied."""
    if not (np.isfinite(e_a) and np.isfinite(e_v)):
        raise ValueError("attention scores must be finite")
    m = max(sharpen * e_a, sharpen * e_v)
    ea = np.exp(sharpen * e_a - m)
    ev = np.exp(sharpen * e_v - m)
    return float(ea / (ea + ev)), float(ev / (ea + ev))


def _scores(z_m: Tensor, z_psi: Tensor, params: AttentionParams) -> Tensor:
    """Per-frame scores: (B,T,1). The audio embedding broadcasts over T."""
    pre = ad.elem_add(ad.elem_add(ad.linear(z_m, params.W), ad.linear(z_psi, params.V)), params.b)
    return ad.linear(ad.tanh(pre), params.w)


def _attention_rows(z_a, z_v, z_m, params: AttentionParams) -> Tensor:
    e_a = _scores(z_m, z_a, params)  # (B,T,1)
    e_v = _scores(z_m, z_v, params)
    e = ad.concat([e_a, e_v], axis=2)
    return ad.softmax_over_axis(ad.scale(e, params.sharpen), axis=2)  # (B,T,2)


def _combine(weights: Tensor, z_a: Tensor, z_v: Tensor) -> Tensor:
    a_a = ad.slice_axis(weights, 2, 0, 1)  # (B,T,1)
    a_v = ad.slice_axis(weights, 2, 1, 2)
    return ad.elem_add(ad.elem_mul(a_a, z_a), ad.elem_mul(a_v, z_v))


def _ones_scale(z_v: Tensor) -> Tensor:
    return Tensor(np.ones(z_v.shape[:2], dtype=z_v.data.dtype))


def attention_fuse(z_a, z_v, z_m, params: AttentionParams) -> FusionOutput:
    """Per-frame convex combination of the raw clue embeddings."""
    z_a, z_v, z_m, batched = _promote(z_a, z_v, z_m)
    weights = _attention_rows(z_a, z_v, z_m, params)
    z_av = _combine(weights, z_a, z_v)
    return _demote(FusionOutput(z_av, weights, _ones_scale(z_v)), batched)


def normalize_clue(z) -> Tensor:
    """Scale a clue embedding to (floored) unit norm along its last axis."""
    z = ad._as_tensor(z)
    return ad.elem_div(z, ad.l2_norm_over_axis(z, axis=-1, keepdims=True))


def norm_rescale(z_fused_prime, norm_a, norm_v):
    """Rescale a fused unit-sphere combination by l = 1/(1/|z_a| + 1/|z_v|).

    Norms are per frame; returns (z_av, l) with l broadcast-compatible.
    """
    z_fused_prime = ad._as_tensor(z_fused_prime)
    norm_a = ad._as_tensor(norm_a)
    norm_v = ad._as_tensor(norm_v)
    one = Tensor(np.ones((), dtype=z_fused_prime.data.dtype))
    inv = ad.elem_add(ad.elem_div(one, norm_a), ad.elem_div(one, norm_v))
    l = ad.elem_div(one, inv)
    return ad.elem_mul(l, z_fused_prime), l


def normalized_attention_fuse(z_a, z_v, z_m, params: AttentionParams) -> FusionOutput:
    """Attention over unit-normalized clues, rescaled to a norm-balanced level.

    Scores and weights are computed from the normalized clues, so scaling
    either clue stream leaves the weights unchanged and moves only the
    per-frame scale l.
    """
    z_a, z_v, z_m, batched = _promote(z_a, z_v, z_m)
    norm_a = ad.l2_norm_over_axis(z_a, axis=-1, keepdims=True)  # (B,1,1)
    norm_v = ad.l2_norm_over_axis(z_v, axis=-1, keepdims=True)  # (B,T,1)
    za_hat = ad.elem_div(z_a, norm_a)
    zv_hat = ad.elem_div(z_v, norm_v)
    weights = _attention_rows(za_hat, zv_hat, z_m, params)
    fused_prime = _combine(weights, za_hat, zv_hat)
    z_av, l = norm_rescale(fused_prime, norm_a, norm_v)  # l: (B,T,1)
    scale = ad.reshape(l, l.shape[:2])
    return _demote(FusionOutput(z_av, weights, scale), batched)


def forced_fuse(z_a, z_v, weights: tuple) -> FusionOutput:
    """Convex combination with fixed weights (single-modality baselines)."""
    a_a, a_v = float(weights[0]), float(weights[1])
    if a_a < -SIMPLEX_TOL or a_v < -SIMPLEX_TOL or abs(a_a + a_v - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"forced weights ({a_a}, {a_v}) are off the simplex")
    z_a, z_v, _, batched = _promote(z_a, z_v)
    b, t = z_v.shape[0], z_v.shape[1]
    w = Tensor(np.broadcast_to(np.array([a_a, a_v], dtype=z_v.data.dtype), (b, t, 2)).copy())
    z_av = _combine(w, z_a, z_v)
    return _demote(FusionOutput(z_av, w, _ones_scale(z_v)), batched)


def summation_fuse(z_a, z_v) -> FusionOutput:
    """Equal-weight special case of attention fusion."""
    return forced_fuse(z_a, z_v, (0.5, 0.5))
