"""Synthetic audio-visual dataset generator with clue corruption.

Parametric "speakers" are formant-like band filters over a pulse-train
excitation with a syllable-rate envelope. Visual features stand in for
face-crop embeddings: a per-speaker random projection of the target's
log band envelope plus a speaker-identity offset. Corruption follows the
training protocol: rectangular or full visual masks (applied in feature
space as interpolation toward a shared occlusion token, with strength
set by the mask perimeter) and white noise on the audio clue at an exact
SNR. Every item derives its RNG from (master seed, item id), so serial
and parallel generation are bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import wave as wave_mod
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from . import objectives as obj

FEATURE_MAGIC = b"AVF1"

# Training-protocol mask geometry (pixels within the 188x188 face region).
RECT_MIN_W, RECT_MIN_H = 40, 30
RECT_MAX_W, RECT_MAX_H = 140, 105
MED_MASK = (80, 60)

# Occlusion token norm relative to typical feature scale: large enough to
# induce the norm-imbalance failure in unnormalized fusion.
TOKEN_SCALE = 4.0

INTERMITTENT_COVERAGE = 0.5
INTERMITTENT_TOL = 0.02
INTERMITTENT_MEAN_RUN = 10

EVAL_CONDITIONS = (
    "none_clean", "none_0db", "none_m20db", "med_clean",
    "full_clean", "int_clean", "int_0db", "int_m20db",
)
TRAIN_CONDITIONS = ("both_clean", "visual_partial", "visual_full", "audio_partial", "audio_dead")
ADAPT_CONDITIONS = ("without_occlusion", "full_occlusion", "intermittent_occlusion")


# ---------------------------------------------------------------------------
# Speakers and signals
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpeaker:
    """Parametric voice: formant-like bands plus a fundamental range."""

    id: str
    bands: list  # [(center_hz, bandwidth_hz, gain), ...] strongest first
    f0_range: tuple
    seed: int

    @property
    def primary_center(self) -> float:
        return self.bands[0][0]


def make_speaker_pool(n: int, seed: int, domain: str = "base",
                      min_center_gap: float = 120.0) -> list[SyntheticSpeaker]:
    """Speakers with primary band centers separated by at least the gap."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B]))
    if domain == "base":
        lo, hi = 400.0, 3200.0
        f0_lo, f0_hi = 80.0, 260.0
    elif domain == "shifted":
        lo, hi = 600.0, 3600.0
        f0_lo, f0_hi = 110.0, 330.0
    else:
        raise ValueError(f"unknown speaker domain '{domain}'")
    if (hi - lo) < (n - 1) * min_center_gap:
        raise ValueError(f"cannot fit {n} speakers with {min_center_gap} Hz separation in [{lo}, {hi}]")
    grid = np.linspace(lo, hi, n)
    jitter = rng.uniform(-0.3, 0.3, size=n) * min(min_center_gap, (hi - lo) / max(n - 1, 1))
    centers = rng.permutation(grid + jitter)
    speakers = []
    for i, center in enumerate(centers):
        srng = np.random.default_rng(np.random.SeedSequence([seed, 0x51, i]))
        secondary = float(srng.uniform(300.0, 3600.0))
        tertiary = float(srng.uniform(300.0, 3600.0))
        bands = [
            (float(center), float(srng.uniform(80.0, 160.0)), 1.0),
            (secondary, float(srng.uniform(120.0, 240.0)), 0.35),
            (tertiary, float(srng.uniform(150.0, 300.0)), 0.15),
        ]
        f0_center = float(srng.uniform(f0_lo + 20.0, f0_hi - 20.0))
        speakers.append(SyntheticSpeaker(
            id=f"{domain}_spk{i:03d}",
            bands=bands,
            f0_range=(f0_center - 15.0, f0_center + 15.0),
            seed=int(srng.integers(0, 2 ** 31)),
        ))
    return speakers


def _resonator(x: np.ndarray, center: float, bandwidth: float, sr: int) -> np.ndarray:
    """Second-order all-pole resonance at the given center frequency."""
    r = math.exp(-math.pi * bandwidth / sr)
    theta = 2.0 * math.pi * center / sr
    a = [1.0, -2.0 * r * math.cos(theta), r * r]
    b = [1.0 - r]
    return lfilter(b, a, x)


FORMANT_JITTER = 0.04  # relative per-utterance wobble of each band center


def synth_utterance(speaker: SyntheticSpeaker, duration_s: float, seed: int,
                    sample_rate: int = 8000) -> np.ndarray:
    """Band-filtered pulse excitation under a syllable-rate envelope.

    Deterministic per (speaker, seed); peak-normalized to 0.9. Band centers
    wobble a few percent per utterance (within-speaker variability), so
    enrollment clues never match the in-mixture utterance exactly.
    """
    if duration_s < 0.5:
        raise ValueError(f"utterance duration must be >= 0.5 s, got {duration_s}")
    rng = np.random.default_rng(np.random.SeedSequence([speaker.seed, seed]))
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = rng.uniform(*speaker.f0_range)
    vibrato = 1.0 + 0.02 * np.sin(2 * math.pi * rng.uniform(4.0, 7.0) * t + rng.uniform(0, 2 * math.pi))
    phase = np.cumsum(f0 * vibrato) / sample_rate
    excitation = np.zeros(n)
    pulse_positions = np.diff(np.floor(phase), prepend=0.0) > 0
    excitation[pulse_positions] = 1.0
    excitation += 0.02 * rng.standard_normal(n)

    out = np.zeros(n)
    for center, bandwidth, gain in speaker.bands:
        center = center * (1.0 + rng.uniform(-FORMANT_JITTER, FORMANT_JITTER))
        out += gain * _resonator(excitation, center, bandwidth, sample_rate)

    # Syllable-rate (2-6 Hz) amplitude modulation with genuine quiet gaps.
    env = np.zeros(n)
    for _ in range(2):
        rate = rng.uniform(2.0, 6.0)
        env += np.cos(2 * math.pi * rate * t + rng.uniform(0, 2 * math.pi))
    env = np.maximum(env + 0.8, 0.0)
    env /= max(env.max(), 1e-9)
    out *= env

    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    return out.astype(np.float64)


def mix(target: np.ndarray, interferer: np.ndarray, sir_db: float) -> tuple[np.ndarray, float]:
    """target + g*interferer with the power ratio matching sir_db exactly."""
    target = np.asarray(target, dtype=np.float64)
    interferer = np.asarray(interferer, dtype=np.float64)
    if target.shape != interferer.shape:
        raise ValueError(f"length mismatch: {target.shape} vs {interferer.shape}")
    p_t = float(target @ target)
    p_i = float(interferer @ interferer)
    if p_i == 0.0:
        raise ValueError("interferer signal is silent")
    gain = math.sqrt(p_t / (p_i * 10.0 ** (sir_db / 10.0)))
    return target + gain * interferer, gain


def corrupt_audio_clue(clue: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """Add white noise at exactly the requested SNR; deterministic per seed."""
    clue = np.asarray(clue, dtype=np.float64)
    p_c = float(clue @ clue)
    if p_c == 0.0:
        raise ValueError("audio clue is silent")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0]))
    noise = rng.standard_normal(clue.shape[0])
    p_n = float(noise @ noise)
    gain = math.sqrt(p_c / (p_n * 10.0 ** (snr_db / 10.0)))
    return clue + gain * noise


# ---------------------------------------------------------------------------
# Visual features and masks
# ---------------------------------------------------------------------------


def _mel_edges(n_bands: int, sr: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    lo, hi = hz_to_mel(100.0), hz_to_mel(sr / 2 - 100.0)
    return mel_to_hz(np.linspace(lo, hi, n_bands + 1))


def log_band_envelope(waveform: np.ndarray, fps: int, n_bands: int, sample_rate: int) -> np.ndarray:
    """Per video frame, log energy in mel-spaced bands: (T_v, n_bands)."""
    waveform = np.asarray(waveform, dtype=np.float64)
    hop = sample_rate // fps
    t_v = int(round(len(waveform) / sample_rate * fps))
    edges = _mel_edges(n_bands, sample_rate)
    out = np.zeros((t_v, n_bands))
    for i in range(t_v):
        frame = waveform[i * hop : (i + 1) * hop]
        if frame.size == 0:
            frame = waveform[-hop:]
        spec = np.abs(np.fft.rfft(frame, n=hop)) ** 2
        freqs = np.fft.rfftfreq(hop, 1.0 / sample_rate)
        for b in range(n_bands):
            band = spec[(freqs >= edges[b]) & (freqs < edges[b + 1])]
            out[i, b] = math.log10(float(band.sum()) + 1e-6)
    return out


def synth_visual_features(target_waveform: np.ndarray, fps: int, d_v: int,
                          speaker: SyntheticSpeaker, sample_rate: int = 8000,
                          projection_seed: int = 0) -> np.ndarray:
    """Random projection of the target's log band envelope plus an identity offset.

    The projection is fixed per dataset (one "feature extractor" serves every
    speaker, the way a single pretrained face encoder would); the offset is
    seeded per speaker and carries identity. Features track target activity
    by construction.
    """
    n_bands = max(1, d_v // 2)
    env = log_band_envelope(target_waveform, fps, n_bands, sample_rate)
    proj_rng = np.random.default_rng(np.random.SeedSequence([projection_seed, 0xFE]))
    projection = proj_rng.standard_normal((n_bands, d_v)) / math.sqrt(n_bands)
    offset_rng = np.random.default_rng(np.random.SeedSequence([speaker.seed, 0x0FF]))
    offset = offset_rng.standard_normal(d_v)
    return env @ projection + offset


def occlusion_token(d_v: int, seed: int) -> np.ndarray:
    """Dataset-wide constant vector that masked frames interpolate toward."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70C]))
    token = rng.standard_normal(d_v)
    return token / np.linalg.norm(token) * TOKEN_SCALE * math.sqrt(d_v)


@dataclass
class MaskSpec:
    """Visual occlusion description: kind, rectangle size, frame schedule."""

    kind: str = "none"  # none | rect | full | intermittent_full
    width: int = 0
    height: int = 0
    frame_schedule: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("none", "rect", "full", "intermittent_full"):
            raise ValueError(f"unknown mask kind '{self.kind}'")
        if self.kind == "rect":
            if not (RECT_MIN_W <= self.width <= RECT_MAX_W and RECT_MIN_H <= self.height <= RECT_MAX_H):
                raise ValueError(
                    f"rect mask {self.width}x{self.height} outside "
                    f"[{RECT_MIN_W}x{RECT_MIN_H}, {RECT_MAX_W}x{RECT_MAX_H}]")
        if self.kind == "full":
            self.width = self.height = obj.FACE_PIXELS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(**d)


def make_intermittent_schedule(n_frames: int, rng: np.random.Generator) -> list[int]:
    """Consecutive masked runs covering 50% +/- 2% of frames.

    Run lengths are geometric with mean ~10 frames; schedules are
    resampled until the coverage lands in range. For short clips the
    tolerance is floored at half a frame, the tightest integer-feasible
    coverage band.
    """
    target = INTERMITTENT_COVERAGE
    tol = max(INTERMITTENT_TOL, 0.5 / n_frames)
    for _ in range(1000):
        masked = np.zeros(n_frames, dtype=bool)
        pos = int(rng.integers(0, max(1, n_frames // 4)))
        state = bool(rng.integers(0, 2))
        while pos < n_frames:
            run = 1 + int(rng.geometric(1.0 / INTERMITTENT_MEAN_RUN))
            if state:
                masked[pos : pos + run] = True
            pos += run
            state = not state
        cov = masked.mean()
        if abs(cov - target) <= tol + 1e-12:
            return [int(i) for i in np.flatnonzero(masked)]
    raise RuntimeError(f"could not sample an intermittent schedule for {n_frames} frames")


def corrupt_visual(features: np.ndarray, mask_spec: MaskSpec,
                   token: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate masked frames toward the occlusion token.

    Strength rho = mask perimeter / full perimeter, so a full mask
    replaces the frame entirely. Returns (corrupted, per-frame perimeter).
    """
    features = np.asarray(features, dtype=np.float64)
    t_v = features.shape[0]
    perimeters = np.zeros(t_v)
    if mask_spec.kind == "none":
        return features.copy(), perimeters
    if mask_spec.kind in ("rect", "full"):
        w, h = mask_spec.width, mask_spec.height
        if not (1 <= w <= obj.FACE_PIXELS and 1 <= h <= obj.FACE_PIXELS):
            raise ValueError(f"mask {w}x{h} exceeds the face region")
        perimeters[:] = obj.mask_perimeter(w, h)
    else:
        sched = [i for i in mask_spec.frame_schedule if 0 <= i < t_v]
        if len(sched) != len(mask_spec.frame_schedule):
            raise ValueError("frame schedule exceeds the feature length")
        perimeters[sched] = obj.FULL_PERIMETER
    rho = (perimeters / obj.FULL_PERIMETER)[:, None]
    corrupted = (1.0 - rho) * features + rho * token[None, :]
    return corrupted, perimeters


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    """Mono 16-bit PCM; samples are clipped to [-1, 1) before quantizing."""
    data = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(data * 32768.0).astype("<i2")
    with wave_mod.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave_mod.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, sr


def write_features(path, features: np.ndarray) -> None:
    """Binary layout: magic "AVF1", u32 n_frames, u32 dim, f32 LE row-major."""
    features = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(np.array(features.shape, dtype="<u4").tobytes())
        f.write(features.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file (bad magic)")
        n_frames, dim = np.frombuffer(f.read(8), dtype="<u4")
        data = np.frombuffer(f.read(4 * int(n_frames) * int(dim)), dtype="<f4")
    return data.reshape(int(n_frames), int(dim)).astype(np.float64)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class GenConfig:
    """Counts, pools, proportions, and signal geometry for one dataset."""

    n_train: int = 1000
    n_dev: int = 100
    n_eval: int = 200
    n_speakers: int = 20
    n_eval_speakers: int = 4
    duration_s: float = 1.0
    sample_rate: int = 8000
    visual_fps: int = 25
    visual_dim: int = 16
    clean_fraction: float = 0.5
    sir_low_db: float = -2.5
    sir_high_db: float = 2.5
    pair_min_center_gap_hz: float = 400.0
    mask_min_w: int = RECT_MIN_W
    mask_min_h: int = RECT_MIN_H
    mask_max_w: int = RECT_MAX_W
    mask_max_h: int = RECT_MAX_H
    domain: str = "base"  # base | shifted (adaptation domain)

    def __post_init__(self):
        if self.domain not in ("base", "shifted"):
            raise ValueError(f"unknown domain '{self.domain}'")
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ValueError("clean_fraction must lie in [0, 1]")
        for lo, hi, lo_name in ((self.mask_min_w, self.mask_max_w, "mask_min_w"),
                                (self.mask_min_h, self.mask_max_h, "mask_min_h")):
            if not (1 <= lo <= hi <= obj.FACE_PIXELS):
                raise ValueError(f"invalid mask range: {lo_name}={lo} vs max={hi} within {obj.FACE_PIXELS}")
        if self.n_eval_speakers >= self.n_speakers:
            raise ValueError("insufficient speaker pool for disjoint train/eval splits")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ManifestEntry:
    """File paths, condition labels, and oracle targets for one item."""

    id: str
    mixture: str
    target: str
    interferer: str
    audio_clue: str
    visual_clue: str
    condition: str
    attention_condition: str
    mask_spec: dict
    audio_clue_snr_db: Optional[float]
    oracle_r_audio: float
    oracle_r_visual: list
    sir_db: float
    target_speaker: str
    interferer_speaker: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        return cls(**json.loads(line))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(ManifestEntry.from_json(line))
    return entries


def _smear_filter(seed: int, sample_rate: int) -> np.ndarray:
    """Fixed reverberation-like FIR for the shifted domain (~25 ms tail)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4E4]))
    n_tail = int(0.025 * sample_rate)
    h = np.zeros(n_tail + 1)
    h[0] = 1.0
    decay = np.exp(-np.arange(1, n_tail + 1) / (0.008 * sample_rate))
    h[1:] = 0.6 * decay * rng.standard_normal(n_tail)
    return h / np.linalg.norm(h)


def _apply_smear(waveform: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.convolve(waveform, h)[: len(waveform)]


@dataclass
class _ItemPlan:
    item_id: str
    split: str
    condition: str


def _train_condition_plan(n: int, clean_fraction: float, rng) -> list[str]:
    """Exact-count assignment so proportions hold deterministically."""
    n_clean = int(round(n * clean_fraction))
    n_corrupt = n - n_clean
    kinds = []
    quarters = [n_corrupt // 4] * 4
    for i in range(n_corrupt - sum(quarters)):
        quarters[i % 4] += 1
    for kind, count in zip(("visual_full", "visual_partial", "audio_dead", "audio_partial"), quarters):
        kinds.extend([kind] * count)
    plan = ["both_clean"] * n_clean + kinds
    rng.shuffle(plan)
    return plan


def _attention_condition_for(condition: str) -> str:
    if condition in ("both_clean", "none_clean", "without_occlusion"):
        return "both_clean"
    if condition in ("visual_full", "full_clean", "full_occlusion"):
        return "visual_dead"
    if condition in ("audio_dead", "none_m20db"):
        return "audio_dead"
    return "partial"


class DatasetBuilder:
    def __init__(self, cfg: GenConfig, out_dir, seed: int):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.token = occlusion_token(cfg.visual_dim, seed)
        pool = make_speaker_pool(cfg.n_speakers, seed, domain=cfg.domain)
        split_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F11]))
        order = split_rng.permutation(len(pool))
        eval_idx = set(order[: cfg.n_eval_speakers].tolist())
        self.train_speakers = [pool[i] for i in range(len(pool)) if i not in eval_idx]
        self.eval_speakers = [pool[i] for i in range(len(pool)) if i in eval_idx]
        if len(self.train_speakers) < 2 or len(self.eval_speakers) < 2:
            raise ValueError("insufficient speaker pool for disjoint train/eval splits")
        self.smear = _smear_filter(seed, cfg.sample_rate) if cfg.domain == "shifted" else None

    def _pick_pair(self, speakers, rng):
        gap = self.cfg.pair_min_center_gap_hz
        for _ in range(200):
            i, j = rng.choice(len(speakers), size=2, replace=False)
            if abs(speakers[i].primary_center - speakers[j].primary_center) >= gap:
                return speakers[i], speakers[j]
        # Fall back to the widest pair if the gap is infeasible for this pool.
        centers = [s.primary_center for s in speakers]
        return speakers[int(np.argmin(centers))], speakers[int(np.argmax(centers))]

    def _item_rng(self, item_id: str) -> np.random.Generator:
        digest = int.from_bytes(hashlib.sha256(item_id.encode()).digest()[:4], "little")
        return np.random.default_rng(np.random.SeedSequence([self.seed, digest]))

    def _make_signals(self, item_id: str, speakers):
        cfg = self.cfg
        rng = self._item_rng(item_id)
        target_spk, interf_spk = self._pick_pair(speakers, rng)
        seed_t, seed_i, seed_c = (int(rng.integers(0, 2 ** 31)) for _ in range(3))
        target = synth_utterance(target_spk, cfg.duration_s, seed_t, cfg.sample_rate)
        interferer = synth_utterance(interf_spk, cfg.duration_s, seed_i, cfg.sample_rate)
        clue = synth_utterance(target_spk, cfg.duration_s, seed_c, cfg.sample_rate)
        if self.smear is not None:
            target = _apply_smear(target, self.smear)
            interferer = _apply_smear(interferer, self.smear)
            clue = _apply_smear(clue, self.smear)
        sir = float(rng.uniform(cfg.sir_low_db, cfg.sir_high_db))
        mixture, _ = mix(target, interferer, sir)
        peak = float(np.max(np.abs(mixture)))
        if peak > 0.99:  # keep PCM headroom; same gain on all aligned signals
            g = 0.99 / peak
            mixture, target, interferer = mixture * g, target * g, interferer * g
        visual = synth_visual_features(target, cfg.visual_fps, cfg.visual_dim, target_spk,
                                       cfg.sample_rate, projection_seed=self.seed)
        return rng, target_spk, interf_spk, mixture, target, interferer, clue, visual, sir

    def _corruption_for(self, condition: str, rng, n_frames: int):
        """Returns (mask_spec, snr_db) for a condition label."""
        cfg = self.cfg
        mask = MaskSpec("none")
        snr = None
        if condition in ("visual_full", "full_clean", "full_occlusion"):
            mask = MaskSpec("full")
        elif condition == "visual_partial":
            mask = MaskSpec("rect",
                            width=int(rng.integers(cfg.mask_min_w, cfg.mask_max_w + 1)),
                            height=int(rng.integers(cfg.mask_min_h, cfg.mask_max_h + 1)))
        elif condition == "med_clean":
            mask = MaskSpec("rect", width=MED_MASK[0], height=MED_MASK[1])
        elif condition in ("int_clean", "int_0db", "int_m20db", "intermittent_occlusion"):
            mask = MaskSpec("intermittent_full", frame_schedule=make_intermittent_schedule(n_frames, rng))
        if condition == "audio_dead" or condition.endswith("_m20db"):
            snr = -20.0
        elif condition == "audio_partial":
            snr = float(rng.uniform(-20.0, 20.0))
            snr = min(20.0, max(-19.999, snr))  # uniform in (-20, 20]
        elif condition.endswith("_0db"):
            snr = 0.0
        return mask, snr

    def _emit(self, item_id: str, split: str, condition: str, speakers) -> ManifestEntry:
        cfg = self.cfg
        rng, t_spk, i_spk, mixture, target, interferer, clue, visual, sir = \
            self._make_signals(item_id, speakers)
        n_frames = visual.shape[0]
        mask, snr = self._corruption_for(condition, rng, n_frames)

        visual_out, _ = corrupt_visual(visual, mask, self.token)
        clue_out = clue
        if snr is not None:
            clue_out = corrupt_audio_clue(clue, snr, seed=int(rng.integers(0, 2 ** 31)))
            peak = float(np.max(np.abs(clue_out)))
            if peak > 0.99:  # rescale into PCM range; a common gain preserves the SNR
                clue_out = clue_out * (0.99 / peak)

        audio_dir = self.out_dir / "audio"
        visual_dir = self.out_dir / "visual"
        paths = {
            "mixture": audio_dir / f"{item_id}_mix.wav",
            "target": audio_dir / f"{item_id}_target.wav",
            "interferer": audio_dir / f"{item_id}_interf.wav",
            "audio_clue": audio_dir / f"{item_id}_clue.wav",
            "visual_clue": visual_dir / f"{item_id}.avf",
        }
        write_wav(paths["mixture"], mixture, cfg.sample_rate)
        write_wav(paths["target"], target, cfg.sample_rate)
        write_wav(paths["interferer"], interferer, cfg.sample_rate)
        write_wav(paths["audio_clue"], clue_out, cfg.sample_rate)
        write_features(paths["visual_clue"], visual_out)

        r_visual, r_audio = obj.oracle_reliability(mask, snr, n_frames)
        return ManifestEntry(
            id=item_id,
            mixture=str(paths["mixture"].relative_to(self.out_dir)),
            target=str(paths["target"].relative_to(self.out_dir)),
            interferer=str(paths["interferer"].relative_to(self.out_dir)),
            audio_clue=str(paths["audio_clue"].relative_to(self.out_dir)),
            visual_clue=str(paths["visual_clue"].relative_to(self.out_dir)),
            condition=condition,
            attention_condition=_attention_condition_for(condition),
            mask_spec=mask.to_dict(),
            audio_clue_snr_db=snr,
            oracle_r_audio=r_audio,
            oracle_r_visual=[float(v) for v in r_visual],
            sir_db=sir,
            target_speaker=t_spk.id,
            interferer_speaker=i_spk.id,
        )

    def build(self) -> dict:
        cfg = self.cfg
        (self.out_dir / "audio").mkdir(parents=True, exist_ok=True)
        (self.out_dir / "visual").mkdir(parents=True, exist_ok=True)
        manifests = {}

        for split, count, speakers in (
            ("train", cfg.n_train, self.train_speakers),
            ("dev", cfg.n_dev, self.train_speakers),
            ("eval", cfg.n_eval, self.eval_speakers),
        ):
            split_tag = {"train": 1, "dev": 2, "eval": 3}[split]
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC0DE, split_tag]))
            if cfg.domain == "shifted":
                conditions = [ADAPT_CONDITIONS[i % 3] for i in range(count)]
                rng.shuffle(conditions)
            elif split == "eval":
                conditions = [EVAL_CONDITIONS[i % len(EVAL_CONDITIONS)] for i in range(count)]
                rng.shuffle(conditions)
            else:
                conditions = _train_condition_plan(count, cfg.clean_fraction, rng)
            entries = [self._emit(f"{cfg.domain}_{split}{i:05d}", split, cond, speakers)
                       for i, cond in enumerate(conditions)]
            path = self.out_dir / f"manifest_{split}.jsonl"
            with open(path, "w") as f:
                for e in entries:
                    f.write(e.to_json() + "\n")
            manifests[split] = path
        summary = {
            "seed": self.seed,
            "config": cfg.to_dict(),
            "manifests": {k: str(v.name) for k, v in manifests.items()},
            "train_speakers": [s.id for s in self.train_speakers],
            "eval_speakers": [s.id for s in self.eval_speakers],
        }
        with open(self.out_dir / "dataset.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        return manifests


def build_dataset(gen_config: GenConfig, out_dir, seed: int) -> dict:
    """Generate WAV/feature files and per-split manifests; returns paths."""
    return DatasetBuilder(gen_config, out_dir, seed).build()


def validate_manifest(manifest_path, base_dir=None) -> None:
    """Check that files parse and stored oracles are exactly recomputable."""
    manifest_path = Path(manifest_path)
    base = Path(base_dir) if base_dir is not None else manifest_path.parent
    for entry in read_manifest(manifest_path):
        for key in ("mixture", "target", "interferer", "audio_clue"):
            wave, _ = read_wav(base / getattr(entry, key))
            if wave.size == 0:
                raise ValueError(f"{entry.id}: empty waveform {key}")
        feats = read_features(base / entry.visual_clue)
        mask = MaskSpec.from_dict(entry.mask_spec)
        r_visual, r_audio = obj.oracle_reliability(mask, entry.audio_clue_snr_db, feats.shape[0])
        if not np.array_equal(r_visual, np.asarray(entry.oracle_r_visual)):
            raise ValueError(f"{entry.id}: stored visual oracle does not match the mask spec")
        if r_audio != entry.oracle_r_audio:
            raise ValueError(f"{entry.id}: stored audio oracle does not match the SNR")
        expected = obj.oracle_attention_for_condition(entry.attention_condition)
        del expected  # label validity is the check; value is derived downstream
