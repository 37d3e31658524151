"""Time-domain target speaker extraction network with clue injection.

Encoder/separator/decoder in the Conv-TasNet family, conditioned on a
fused audio-visual clue sequence injected into the separator by an
element-wise product. Key hyperparameters follow the usual N/L/B/H/P/X/R
notation: N encoder filters, L encoder kernel (stride L/2), B bottleneck
channels, H conv-block channels, P conv-block kernel, X blocks per
repeat, R repeats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import fusion as fu
from .autodiff import Parameter, Tensor

FUSION_MODES = ("audio", "visual", "sum", "attention", "norm_attention")
MULTITASK_MODES = ("none", "guided", "clue_aware")

# Clue extraction stacks: three convs over time followed by a linear layer.
CLUENET_KERNELS = (7, 5, 5)

CHECKPOINT_MAGIC = b"TSF1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; parameter shapes follow from these."""

    N: int = 64
    L: int = 32
    B: int = 32
    H: int = 64
    P: int = 3
    X: int = 3
    R: int = 1
    fuse_after_blocks: int = 1
    embed_dim: int = 32   # clue embedding dim; must equal B so injection is shape-valid
    visual_dim: int = 16
    sharpen: float = 2.0
    fusion_mode: str = "norm_attention"
    multitask_mode: str = "none"
    sample_rate: int = 8000
    visual_fps: int = 25

    def __post_init__(self):
        for name in ("N", "L", "B", "H", "P", "X", "R", "embed_dim", "visual_dim",
                     "sample_rate", "visual_fps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.L % 2 != 0:
            raise ValueError(f"encoder kernel L must be even (stride is L/2), got {self.L}")
        if not (0 <= self.fuse_after_blocks < self.X * self.R):
            raise ValueError(f"fuse_after_blocks must lie in [0, {self.X * self.R}), got {self.fuse_after_blocks}")
        if self.embed_dim != self.B:
            raise ValueError(f"embed_dim ({self.embed_dim}) must equal B ({self.B}) for clue injection")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode '{self.fusion_mode}'")
        if self.multitask_mode not in MULTITASK_MODES:
            raise ValueError(f"unknown multitask mode '{self.multitask_mode}'")
        if self.sharpen <= 0:
            raise ValueError("sharpen must be positive")

    @property
    def stride(self) -> int:
        return self.L // 2

    def frames_for(self, n_samples: int) -> int:
        if n_samples < self.L:
            raise ValueError(f"waveform too short: {n_samples} samples < encoder kernel {self.L}")
        return (n_samples - self.L) // self.stride + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """Tiny configuration used by gradient checks and fast tests."""
        base = dict(N=8, L=16, B=8, H=16, P=3, X=2, R=1, fuse_after_blocks=1,
                    embed_dim=8, visual_dim=8)
        base.update(overrides)
        return cls(**base)


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ClueBundle:
    """One example's clue material plus the corruption metadata for losses."""

    audio_clue: Optional[np.ndarray] = None       # (T_a,) waveform
    visual_clue: Optional[np.ndarray] = None      # (T_v, D_v) features
    mask_spec: object = None
    audio_snr_db: Optional[float] = None


def inject_clue(y_prime: Tensor, z_av: Tensor) -> Tensor:
    """Condition the separator representation on the fused clue: Y' (*) Z."""
    y_prime = ad._as_tensor(y_prime)
    z_av = ad._as_tensor(z_av)
    if y_prime.shape != z_av.shape:
        raise ad.ShapeError(f"inject_clue: representation {y_prime.shape} != clue {z_av.shape}")
    return ad.elem_mul(y_prime, z_av)


class ExtractionModel:
    """Extraction network plus cluenets, fusion, and condition predictors.

    All parameters exist for every configuration (the constructor is total
    in the config) so checkpoints have a uniform layout across fusion and
    multitask modes.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        self._build()

    # -- parameter construction -------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name '{name}'")
        self.params[name] = Parameter(name, Tensor(array.astype(ad.DEFAULT_DTYPE), requires_grad=True))

    def _conv_init(self, shape, fan_in):
        return self._rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    def _filterbank_init(self, n_filters: int, length: int) -> np.ndarray:
        """Signed pairs of orthonormal cosine filters plus a small jitter.

        With a rectified encoder, (+f, -f) pairs keep both half-waves of
        each band, so an untrained encoder/decoder pair already passes
        signal through; training then spends its budget on selection
        instead of on relearning an analysis/synthesis basis.
        """
        n_pairs = n_filters // 2
        t = (np.arange(length) + 0.5) / length
        basis = np.stack([np.cos(np.pi * (k + 0.5) * t) for k in range(n_pairs)])
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        bank = np.empty((n_filters, 1, length))
        bank[0::2, 0, :] = basis
        bank[1::2, 0, :] = -basis
        if n_filters % 2:
            bank[-1, 0, :] = self._rng.normal(0.0, 1.0 / np.sqrt(length), size=length)
        return bank + self._rng.normal(0.0, 0.01 / np.sqrt(length), size=bank.shape)

    def _add_norm(self, prefix, dim):
        self._add(f"{prefix}.gamma", np.ones(dim))
        self._add(f"{prefix}.beta", np.zeros(dim))

    def _add_linear(self, prefix, out_dim, in_dim, bias=True):
        self._add(f"{prefix}.w", self._conv_init((out_dim, in_dim), in_dim))
        if bias:
            self._add(f"{prefix}.b", np.zeros(out_dim))

    def _add_clue_stack(self, prefix, in_dim):
        c = self.config
        dims = [in_dim] + [c.embed_dim] * len(CLUENET_KERNELS)
        for j, k in enumerate(CLUENET_KERNELS):
            self._add(f"{prefix}.conv{j}.w", self._conv_init((c.embed_dim, dims[j], k), dims[j] * k))
            self._add(f"{prefix}.conv{j}.b", np.zeros(c.embed_dim))
            self._add_norm(f"{prefix}.conv{j}.norm", c.embed_dim)
            self._add(f"{prefix}.conv{j}.prelu", np.full(c.embed_dim, 0.25))
        self._add_linear(f"{prefix}.lin", c.embed_dim, c.embed_dim)
        # Bias toward an all-ones embedding: the multiplicative injection
        # then starts near identity instead of gating the separator to zero.
        self.params[f"{prefix}.lin.b"].tensor.data[:] = 1.0

    def _add_predictor(self, prefix):
        d = self.config.embed_dim
        self._add_linear(f"{prefix}.l0", d, d)
        self._add_linear(f"{prefix}.l1", d, d)
        self._add_linear(f"{prefix}.l2", 1, d)

    def _build(self):
        c = self.config
        self._add("enc.w", self._filterbank_init(c.N, c.L))
        self._add_norm("sep.norm_in", c.N)
        self._add_linear("sep.bottleneck", c.B, c.N, bias=False)
        for i in range(c.X * c.R):
            p = f"sep.block{i}"
            self._add_linear(f"{p}.in", c.H, c.B)
            self._add(f"{p}.prelu1", np.full(c.H, 0.25))
            self._add_norm(f"{p}.norm1", c.H)
            self._add(f"{p}.dw.w", self._conv_init((c.H, c.P), c.P))
            self._add(f"{p}.dw.b", np.zeros(c.H))
            self._add(f"{p}.prelu2", np.full(c.H, 0.25))
            self._add_norm(f"{p}.norm2", c.H)
            self._add_linear(f"{p}.out", c.B, c.H)
        self._add("sep.mask.prelu", np.full(c.B, 0.25))
        self._add_linear("sep.mask", c.N, c.B)
        self._add("dec.w", self._filterbank_init(c.N, c.L))
        self._add("clue_audio.enc.w", self._filterbank_init(c.N, c.L))
        self._add_clue_stack("clue_audio", c.N)
        self._add_clue_stack("clue_visual", c.visual_dim)
        self._add_clue_stack("mix_embed", c.B)
        d = c.embed_dim
        self._add("fusion.attn.w", self._conv_init((1, d), d))
        self._add("fusion.attn.W", self._conv_init((d, d), d))
        self._add("fusion.attn.V", self._conv_init((d, d), d))
        self._add("fusion.attn.b", np.zeros(d))
        self._add_predictor("pred_audio")
        self._add_predictor("pred_visual")

    # -- utilities ----------------------------------------------------------

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.grad for name, p in self.params.items() if p.tensor.grad is not None}

    def astype(self, dtype) -> "ExtractionModel":
        """Copy of the model with parameters cast (used by gradient checks)."""
        clone = ExtractionModel.__new__(ExtractionModel)
        clone.config = self.config
        clone._rng = None
        clone.params = {n: Parameter(n, p.tensor.astype(dtype)) for n, p in self.params.items()}
        return clone

    def _t(self, name: str) -> Tensor:
        return self.params[name].tensor

    def attention_params(self) -> fu.AttentionParams:
        return fu.AttentionParams(
            w=self._t("fusion.attn.w"), W=self._t("fusion.attn.W"),
            V=self._t("fusion.attn.V"), b=self._t("fusion.attn.b"),
            sharpen=self.config.sharpen)

    # -- forward pieces -------------------------------------------------------

    @staticmethod
    def _wave_batch(wave) -> tuple[Tensor, bool]:
        t = ad._as_tensor(wave)
        if t.ndim == 1:
            return ad.reshape(t, (1, t.shape[0])), False
        if t.ndim != 2:
            raise ad.ShapeError(f"expected waveform (T,) or (B,T), got {t.shape}")
        return t, True

    def encode(self, mixture) -> Tensor:
        """Waveform (B,T) or (T,) -> rectified representation (B,T_e,N)."""
        wave, batched = self._wave_batch(mixture)
        c = self.config
        self.config.frames_for(wave.shape[1])  # raises on too-short input
        x = ad.reshape(wave, (wave.shape[0], wave.shape[1], 1))
        y = ad.relu(ad.conv1d(x, self._t("enc.w"), stride=c.stride))
        return y if batched else ad.reshape(y, y.shape[1:])

    def _clue_stack(self, x: Tensor, prefix: str) -> Tensor:
        for j, k in enumerate(CLUENET_KERNELS):
            x = ad.conv1d(x, self._t(f"{prefix}.conv{j}.w"), self._t(f"{prefix}.conv{j}.b"),
                          stride=1, pad=(k - 1) // 2, pad_mode="edge")
            x = ad.channel_layer_norm(x, self._t(f"{prefix}.conv{j}.norm.gamma"),
                                      self._t(f"{prefix}.conv{j}.norm.beta"))
            x = ad.prelu(x, self._t(f"{prefix}.conv{j}.prelu"))
        return ad.linear(x, self._t(f"{prefix}.lin.w"), self._t(f"{prefix}.lin.b"))

    def audio_cluenet(self, clue) -> Tensor:
        """Enrollment waveform -> time-invariant embedding (B,1,D) or (D,)."""
        wave, batched = self._wave_batch(clue)
        c = self.config
        if wave.shape[1] < c.L:
            raise ValueError(f"audio clue too short: {wave.shape[1]} samples < encoder kernel {c.L}")
        x = ad.reshape(wave, (wave.shape[0], wave.shape[1], 1))
        frames = ad.relu(ad.conv1d(x, self._t("clue_audio.enc.w"), stride=c.stride))
        feats = self._clue_stack(frames, "clue_audio")
        z = ad.mean_over_axis(feats, axis=1, keepdims=True)  # (B,1,D)
        return z if batched else ad.reshape(z, (z.shape[2],))

    def visual_cluenet(self, feats, t_e: int) -> Tensor:
        """Visual features (B,T_v,D_v) or (T_v,D_v) -> (B,T_e,D) or (T_e,D)."""
        f = ad._as_tensor(feats)
        batched = f.ndim == 3
        if not batched:
            f = ad.reshape(f, (1,) + f.shape)
        if f.shape[2] != self.config.visual_dim:
            raise ad.ShapeError(f"visual feature dim {f.shape[2]} != configured {self.config.visual_dim}")
        z = self._clue_stack(f, "clue_visual")
        z = ad.upsample_repeat(z, t_e)
        return z if batched else ad.reshape(z, z.shape[1:])

    def mixture_embed(self, y_prime) -> Tensor:
        """Separator representation at the fusion point -> per-frame embedding."""
        y = ad._as_tensor(y_prime)
        batched = y.ndim == 3
        if not batched:
            y = ad.reshape(y, (1,) + y.shape)
        z = self._clue_stack(y, "mix_embed")
        return z if batched else ad.reshape(z, z.shape[1:])

    def _mlp3(self, x: Tensor, prefix: str) -> Tensor:
        h = ad.relu(ad.linear(x, self._t(f"{prefix}.l0.w"), self._t(f"{prefix}.l0.b")))
        h = ad.relu(ad.linear(h, self._t(f"{prefix}.l1.w"), self._t(f"{prefix}.l1.b")))
        return ad.sigmoid(ad.linear(h, self._t(f"{prefix}.l2.w"), self._t(f"{prefix}.l2.b")))

    def clue_condition_predict(self, z_audio: Optional[Tensor] = None,
                               z_visual: Optional[Tensor] = None) -> tuple:
        """Reliability predictions in (0,1): one scalar per audio embedding,
        one per visual frame. Either argument may be omitted."""
        r_a = self._mlp3(z_audio, "pred_audio") if z_audio is not None else None
        r_v = self._mlp3(z_visual, "pred_visual") if z_visual is not None else None
        return r_a, r_v

    def _block(self, h: Tensor, i: int) -> Tensor:
        c = self.config
        p = f"sep.block{i}"
        d = 2 ** (i % c.X)
        u = ad.linear(h, self._t(f"{p}.in.w"), self._t(f"{p}.in.b"))
        u = ad.global_layer_norm(ad.prelu(u, self._t(f"{p}.prelu1")),
                                 self._t(f"{p}.norm1.gamma"), self._t(f"{p}.norm1.beta"))
        u = ad.depthwise_conv1d(u, self._t(f"{p}.dw.w"), self._t(f"{p}.dw.b"),
                                pad=d * (c.P - 1) // 2, dilation=d)
        u = ad.global_layer_norm(ad.prelu(u, self._t(f"{p}.prelu2")),
                                 self._t(f"{p}.norm2.gamma"), self._t(f"{p}.norm2.beta"))
        u = ad.linear(u, self._t(f"{p}.out.w"), self._t(f"{p}.out.b"))
        return ad.elem_add(h, u)

    def fuse(self, z_a: Tensor, z_v: Tensor, z_m: Optional[Tensor],
             forced_weights: Optional[tuple] = None) -> fu.FusionOutput:
        """Combine clue embeddings per the configured fusion mode."""
        mode = self.config.fusion_mode
        if forced_weights is not None:
            return fu.forced_fuse(z_a, z_v, forced_weights)
        if mode == "audio":
            return fu.forced_fuse(z_a, z_v, (1.0, 0.0))
        if mode == "visual":
            return fu.forced_fuse(z_a, z_v, (0.0, 1.0))
        if mode == "sum":
            return fu.summation_fuse(z_a, z_v)
        params = self.attention_params()
        if mode == "attention":
            return fu.attention_fuse(z_a, z_v, z_m, params)
        return fu.normalized_attention_fuse(z_a, z_v, z_m, params)

    def _needs(self) -> tuple[bool, bool]:
        mode = self.config.fusion_mode
        needs_audio = mode in ("audio", "sum", "attention", "norm_attention")
        needs_visual = mode in ("visual", "sum", "attention", "norm_attention")
        return needs_audio, needs_visual

    def forward(self, mixture, audio_clue=None, visual_clue=None,
                forced_weights: Optional[tuple] = None, predict_conditions: bool = False) -> dict:
        """Batched forward pass; returns estimate, fusion trace, and extras.

        mixture: (B,T); audio_clue: (B,T_a) or None; visual_clue:
        (B,T_v,D_v) or None, per the fusion mode's needs.
        """
        c = self.config
        wave, _ = self._wave_batch(mixture)
        n_samples = wave.shape[1]
        t_e = c.frames_for(n_samples)
        needs_audio, needs_visual = self._needs()
        if forced_weights is not None:
            needs_audio = needs_visual = True
        if needs_audio and audio_clue is None:
            raise ValueError(f"fusion mode '{c.fusion_mode}' requires an audio clue")
        if needs_visual and visual_clue is None:
            raise ValueError(f"fusion mode '{c.fusion_mode}' requires a visual clue")

        enc = self.encode(wave)  # (B,T_e,N)
        h = ad.global_layer_norm(enc, self._t("sep.norm_in.gamma"), self._t("sep.norm_in.beta"))
        h = ad.linear(h, self._t("sep.bottleneck.w"))

        batch = wave.shape[0]
        z_a = self.audio_cluenet(audio_clue) if audio_clue is not None else None
        z_v = self.visual_cluenet(visual_clue, t_e) if visual_clue is not None else None
        # Absent clues become zero embeddings; the forced-weight combinations
        # that tolerate a missing clue give them exactly zero weight.
        if z_a is None:
            z_a = Tensor(np.zeros((batch, 1, c.embed_dim), dtype=enc.data.dtype))
        if z_v is None:
            z_v = Tensor(np.zeros((batch, t_e, c.embed_dim), dtype=enc.data.dtype))

        fusion_out = None
        for i in range(c.X * c.R):
            if i == c.fuse_after_blocks:
                y_prime = h
                z_m = self.mixture_embed(y_prime)
                fusion_out = self.fuse(z_a, z_v, z_m, forced_weights)
                h = inject_clue(y_prime, fusion_out.z_av)
            h = self._block(h, i)
        if fusion_out is None:  # fuse_after_blocks == 0 handled above; defensive
            raise RuntimeError("fusion point never reached")

        m = ad.sigmoid(ad.linear(ad.prelu(h, self._t("sep.mask.prelu")),
                                 self._t("sep.mask.w"), self._t("sep.mask.b")))
        masked = ad.elem_mul(enc, m)
        dec = ad.transposed_conv1d(masked, self._t("dec.w"), stride=c.stride)
        est = ad.reshape(dec, dec.shape[:2])
        if est.shape[1] > n_samples:
            est = ad.slice_axis(est, 1, 0, n_samples)
        elif est.shape[1] < n_samples:
            pad = Tensor(np.zeros((est.shape[0], n_samples - est.shape[1]), dtype=est.data.dtype))
            est = ad.concat([est, pad], axis=1)

        out = {"estimate": est, "fusion": fusion_out, "t_e": t_e, "z_a": z_a, "z_v": z_v}
        if predict_conditions:
            r_a, r_v = self.clue_condition_predict(z_a, z_v)
            out["r_hat_audio"] = r_a
            out["r_hat_visual"] = r_v
        return out

    def extract(self, mixture, clues: ClueBundle, forced_weights: Optional[tuple] = None):
        """Extract the target waveform; returns (estimate, FusionOutput).

        Single-item inputs come back single-item; output length always
        equals the input length.
        """
        wave, batched = self._wave_batch(mixture)
        audio = clues.audio_clue
        visual = clues.visual_clue
        if audio is not None:
            audio = np.asarray(audio)
            if audio.ndim == 1:
                audio = audio[None, :]
        if visual is not None:
            visual = np.asarray(visual)
            if visual.ndim == 2:
                visual = visual[None, :, :]
        out = self.forward(wave, audio, visual, forced_weights=forced_weights)
        est, fusion_out = out["estimate"], out["fusion"]
        if not batched:
            est = ad.reshape(est, (est.shape[1],))
            fusion_out = fu.FusionOutput(
                z_av=ad.reshape(fusion_out.z_av, fusion_out.z_av.shape[1:]),
                weights=ad.reshape(fusion_out.weights, fusion_out.weights.shape[1:]),
                scale=ad.reshape(fusion_out.scale, (fusion_out.scale.shape[1],)))
        return est, fusion_out


# ---------------------------------------------------------------------------
# Checkpoint I/O. Layout: magic "TSF1", u32 version, u32 header length,
# JSON header {config, config_hash, meta}, u32 parameter count, then per
# parameter: u32 name length, UTF-8 name, u32 ndim, u32 dims..., raw
# little-endian float32 data.
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: ExtractionModel, meta: Optional[dict] = None) -> None:
    header = {
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            data = np.ascontiguousarray(p.tensor.data, dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> tuple[ExtractionModel, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        config = ModelConfig(**header["config"])
        if header.get("config_hash") != config_hash(config):
            raise ValueError(f"{path}: config hash mismatch; file corrupt or config schema changed")
        model = ExtractionModel(config, seed=0)
        (n_params,) = struct.unpack("<I", f.read(4))
        for _ in range(n_params):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            if name not in model.params:
                raise ValueError(f"{path}: unknown parameter '{name}'")
            if model.params[name].tensor.data.shape != data.shape:
                raise ValueError(f"{path}: shape mismatch for '{name}'")
            model.params[name].tensor.data = data.astype(ad.DEFAULT_DTYPE).copy()
    return model, header.get("meta", {})
