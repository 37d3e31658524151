"""SI-SDR metric and loss, the two multi-task loss terms, and their oracles.

The metric works on plain numpy waveforms and may return infinite
sentinels; the loss functions operate on autodiff tensors and are
epsilon-guarded so they stay finite and differentiable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_EPS = 1e-8
REPORT_CLAMP_DB = 60.0

# Full face region is 188x188 pixels; a full mask's perimeter is 188*4.
FACE_PIXELS = 188
FULL_PERIMETER = 4 * FACE_PIXELS

ATTENTION_CONDITIONS = ("both_clean", "audio_dead", "visual_dead", "partial")


@dataclass
class LossWeights:
    """Multi-task weights; zero disables the corresponding term exactly."""

    alpha: float = 10.0
    beta: float = 5.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class OracleTargets:
    """Ground-truth corruption descriptors for one training item."""

    oracle_attention: Optional[tuple]  # (a_audio, a_visual) or None
    oracle_r_audio: float
    oracle_r_visual: np.ndarray  # per visual frame, in [0,1]

    def __post_init__(self):
        if self.oracle_attention is not None:
            a, v = self.oracle_attention
            if a < 0 or v < 0 or abs(a + v - 1.0) > 1e-6:
                raise ValueError(f"oracle attention {self.oracle_attention} is off the simplex")


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SDR in dB; +/-inf sentinels at the singular points."""
    estimate = np.asarray(estimate, dtype=np.float64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if estimate.shape != reference.shape:
        raise ValueError(f"length mismatch: estimate {estimate.shape} vs reference {reference.shape}")
    ref_pow = float(reference @ reference)
    if ref_pow == 0.0:
        raise ValueError("reference signal is identically zero")
    alpha = float(estimate @ reference) / ref_pow
    target = alpha * reference
    err = estimate - target
    num = float(target @ target)
    den = float(err @ err)
    if num == 0.0:
        return -math.inf
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def clamp_db(value: float, limit: float = REPORT_CLAMP_DB) -> float:
    """Clamp a dB score to +/-limit for finite reporting."""
    return max(-limit, min(limit, value))


def _as_wave_batch(x) -> Tensor:
    x = ad._as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    return x


def si_sdr_loss(estimate, reference) -> Tensor:
    """Negative SI-SDR, epsilon-guarded; mean over the batch axis if any."""
    est = _as_wave_batch(estimate)
    ref = _as_wave_batch(ad._as_tensor(reference).detach())
    if est.shape != ref.shape:
        raise ad.ShapeError(f"si_sdr_loss: estimate {est.shape} vs reference {ref.shape}")
    ref_pow = (ref.data * ref.data).sum(axis=1, keepdims=True)
    if np.any(ref_pow == 0.0):
        raise ValueError("reference signal is identically zero")
    inv_ref_pow = Tensor((1.0 / ref_pow).astype(est.data.dtype))

    dot = ad.sum_over_axis(ad.elem_mul(est, ref), axis=1, keepdims=True)  # (B,1)
    alpha = ad.elem_mul(dot, inv_ref_pow)
    target = ad.elem_mul(alpha, ref)  # (B,T)
    err = ad.elem_sub(est, target)
    num = ad.sum_over_axis(ad.elem_mul(target, target), axis=1, keepdims=True)
    den = ad.sum_over_axis(ad.elem_mul(err, err), axis=1, keepdims=True)
    eps = Tensor(np.full((1, 1), LOSS_EPS, dtype=est.data.dtype))
    log_ratio = ad.elem_sub(ad.log(ad.elem_add(num, eps)), ad.log(ad.elem_add(den, eps)))
    per_item = ad.scale(log_ratio, -10.0 / math.log(10.0))
    return ad.mean_over_axis(per_item, axis=(0, 1))


def guided_loss_batch(weights: Tensor, oracle_rows: np.ndarray, present: np.ndarray) -> Tensor:
    """Frame-averaged squared error of attention rows against per-item oracles.

    weights: (B,T,2); oracle_rows: (B,2); present: (B,) 0/1 mask for items
    whose oracle is defined. Items without an oracle contribute zero.
    Returns the batch mean.
    """
    b = weights.shape[0]
    oracle = Tensor(np.asarray(oracle_rows, dtype=weights.data.dtype).reshape(b, 1, 2))
    diff = ad.elem_sub(weights, oracle)
    per_frame = ad.sum_over_axis(ad.elem_mul(diff, diff), axis=2, keepdims=False)  # (B,T)
    per_item = ad.mean_over_axis(per_frame, axis=1, keepdims=False)  # (B,)
    mask = Tensor(np.asarray(present, dtype=weights.data.dtype))
    return ad.mean_over_axis(ad.elem_mul(per_item, mask), axis=0)


def attention_guided_loss(weights, oracle: Optional[tuple]) -> Tensor:
    """Spec-shaped single-item guided loss; zero when the oracle is absent."""
    weights = ad._as_tensor(weights)
    if weights.ndim == 2:
        weights = ad.reshape(weights, (1,) + weights.shape)
    if oracle is None:
        return Tensor(np.zeros((), dtype=weights.data.dtype))
    return guided_loss_batch(weights, np.asarray(oracle).reshape(1, 2), np.ones(1))


def clue_condition_loss_batch(r_hat_audio: Tensor, r_hat_visual: Tensor,
                              r_audio: np.ndarray, r_visual_frames: np.ndarray) -> Tensor:
    """MSE(r_hat_a, r_a) + frame-averaged MSE(r_hat_v, r_v); batch mean.

    r_hat_audio: (B,1,1) or (B,1); r_hat_visual: (B,T,1) or (B,T);
    r_audio: (B,); r_visual_frames: (B,T) targets already aligned to the
    embedding frame rate.
    """
    if r_hat_audio.ndim == 3:
        r_hat_audio = ad.reshape(r_hat_audio, r_hat_audio.shape[:2])
    if r_hat_visual.ndim == 3:
        r_hat_visual = ad.reshape(r_hat_visual, r_hat_visual.shape[:2])
    b = r_hat_audio.shape[0]
    ra = Tensor(np.asarray(r_audio, dtype=r_hat_audio.data.dtype).reshape(b, 1))
    rv = Tensor(np.asarray(r_visual_frames, dtype=r_hat_visual.data.dtype))
    da = ad.elem_sub(r_hat_audio, ra)
    audio_term = ad.reshape(ad.elem_mul(da, da), (b,))
    dv = ad.elem_sub(r_hat_visual, rv)
    visual_term = ad.mean_over_axis(ad.elem_mul(dv, dv), axis=1)
    return ad.mean_over_axis(ad.elem_add(audio_term, visual_term), axis=0)


def clue_condition_loss(r_hat_audio, r_hat_visual, targets: OracleTargets) -> Tensor:
    """Spec-shaped single-item clue-condition loss.

    The per-frame visual targets are repeated up to the prediction frame
    rate with the same rule the visual cluenet uses for upsampling.
    """
    r_hat_audio = ad._as_tensor(r_hat_audio)
    r_hat_visual = ad._as_tensor(r_hat_visual)
    if r_hat_audio.ndim == 0:
        r_hat_audio = ad.reshape(r_hat_audio, (1, 1))
    elif r_hat_audio.ndim == 1:
        r_hat_audio = ad.reshape(r_hat_audio, (1, 1))
    if r_hat_visual.ndim == 1:
        r_hat_visual = ad.reshape(r_hat_visual, (1, r_hat_visual.shape[0]))
    t_e = r_hat_visual.shape[1]
    rv = ad.repeat_to_length(np.asarray(targets.oracle_r_visual, dtype=np.float64), t_e)
    return clue_condition_loss_batch(
        r_hat_audio, r_hat_visual,
        np.array([targets.oracle_r_audio]), rv.reshape(1, t_e))


def oracle_attention_for_condition(condition: str) -> Optional[tuple]:
    """Oracle attention row for a corruption condition, None when undefined."""
    table = {
        "both_clean": (0.5, 0.5),
        "audio_dead": (0.0, 1.0),
        "visual_dead": (1.0, 0.0),
        "partial": None,
    }
    if condition not in table:
        raise ValueError(f"unknown clue condition '{condition}' (expected one of {ATTENTION_CONDITIONS})")
    return table[condition]


def mask_perimeter(width: int, height: int) -> int:
    return 2 * (int(width) + int(height))


def oracle_reliability(mask_spec, snr_db: Optional[float], n_frames: int) -> tuple:
    """Ground-truth reliability targets for one item.

    Visual: per-frame mask perimeter / 752 (0 on unmasked frames).
    Audio: (snr + 20) / 40 clamped to [0,1]; None snr means a clean clue.
    `mask_spec` needs .kind and, for rectangles, .width/.height plus a
    .frame_schedule for intermittent masks.
    """
    r_visual = np.zeros(n_frames, dtype=np.float64)
    kind = mask_spec.kind if mask_spec is not None else "none"
    if kind == "none":
        pass
    elif kind in ("rect", "full"):
        if kind == "full":
            w = h = FACE_PIXELS
        else:
            w, h = int(mask_spec.width), int(mask_spec.height)
        if not (1 <= w <= FACE_PIXELS and 1 <= h <= FACE_PIXELS):
            raise ValueError(f"mask {w}x{h} exceeds the {FACE_PIXELS}x{FACE_PIXELS} face region")
        r_visual[:] = mask_perimeter(w, h) / FULL_PERIMETER
    elif kind == "intermittent_full":
        sched = [int(i) for i in mask_spec.frame_schedule]
        if any(i < 0 or i >= n_frames for i in sched):
            raise ValueError(f"frame schedule exceeds {n_frames} frames")
        r_visual[sched] = 1.0
    else:
        raise ValueError(f"unknown mask kind '{kind}'")

    if snr_db is None:
        r_audio = 1.0
    else:
        if not (-20.0 <= snr_db <= 20.0):
            raise ValueError(f"audio clue SNR {snr_db} dB outside [-20, 20]")
        r_audio = min(1.0, max(0.0, (snr_db + 20.0) / 40.0))
    return r_visual, r_audio


def total_loss(estimate, reference, fusion_output, predictions, targets: OracleTargets,
               weights: LossWeights, mode: str) -> Tensor:
    """SI-SDR loss plus the auxiliary term selected by the multitask mode.

    `predictions` is (r_hat_audio, r_hat_visual) and only consulted in
    clue-aware mode. Only one auxiliary term is ever active.
    """
    if mode not in ("none", "guided", "clue_aware"):
        raise ValueError(f"unknown multitask mode '{mode}'")
    loss = si_sdr_loss(estimate, reference)
    if mode == "guided":
        if weights.alpha == 0.0:
            warnings.warn("guided mode with alpha=0 has no auxiliary effect", stacklevel=2)
        elif targets.oracle_attention is not None:
            aux = attention_guided_loss(fusion_output.weights, targets.oracle_attention)
            loss = ad.elem_add(loss, ad.scale(aux, weights.alpha))
    elif mode == "clue_aware":
        if weights.beta == 0.0:
            warnings.warn("clue-aware mode with beta=0 has no auxiliary effect", stacklevel=2)
        else:
            r_hat_audio, r_hat_visual = predictions
            aux = clue_condition_loss(r_hat_audio, r_hat_visual, targets)
            loss = ad.elem_add(loss, ad.scale(aux, weights.beta))
    return loss
