"""Training, adaptation, evaluation, and inspection driving the model.

Owns plain-text key/value config files, checkpoint selection against a
development set, condition-by-condition SI-SDR reports, attention
traces, and the full-system gradient check. Training is single-threaded
and bit-deterministic for a fixed seed; evaluation may fan out over
threads because per-item scoring is independent.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import datagen as dg
from . import objectives as obj
from .autodiff import Tape, Tensor
from .model import (ExtractionModel, ModelConfig, config_hash,
                    load_checkpoint, save_checkpoint)


class ConfigError(Exception):
    """Invalid or unknown configuration field; maps to CLI exit code 2."""


# Oracle attention rows for adaptation-domain condition labels.
ADAPT_ORACLES = {
    "without_occlusion": (0.5, 0.5),
    "full_occlusion": (1.0, 0.0),
    "intermittent_occlusion": None,  # guided term disabled for these items
}


# ---------------------------------------------------------------------------
# Plain-text key/value configs: `key = value`, '#' comments, unknown keys
# rejected with the offending name.
# ---------------------------------------------------------------------------


def parse_kv_file(path) -> dict:
    data = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in data:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            data[key] = value
    return data


def coerce_config(raw: dict, schema: dict, where: str) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"{where}: unknown config key '{key}'")
        typ = schema[key]
        try:
            if typ is bool:
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(value)
                out[key] = value.lower() in ("true", "1")
            else:
                out[key] = typ(value)
        except ValueError:
            raise ConfigError(f"{where}: field '{key}' expects {typ.__name__}, got '{value}'") from None
    return out


GEN_SCHEMA = {name: typ for name, typ in (
    ("n_train", int), ("n_dev", int), ("n_eval", int), ("n_speakers", int),
    ("n_eval_speakers", int), ("duration_s", float), ("sample_rate", int),
    ("visual_fps", int), ("visual_dim", int), ("clean_fraction", float),
    ("sir_low_db", float), ("sir_high_db", float), ("pair_min_center_gap_hz", float),
    ("mask_min_w", int), ("mask_min_h", int), ("mask_max_w", int), ("mask_max_h", int),
    ("domain", str),
)}

MODEL_SCHEMA = {name: typ for name, typ in (
    ("N", int), ("L", int), ("B", int), ("H", int), ("P", int), ("X", int), ("R", int),
    ("fuse_after_blocks", int), ("embed_dim", int), ("visual_dim", int),
    ("sharpen", float), ("fusion_mode", str), ("multitask_mode", str),
    ("sample_rate", int), ("visual_fps", int),
)}


def gen_config_from_file(path) -> dg.GenConfig:
    fields = coerce_config(parse_kv_file(path), GEN_SCHEMA, str(path))
    try:
        return dg.GenConfig(**fields)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def model_config_from_file(path, overrides: Optional[dict] = None) -> ModelConfig:
    fields = coerce_config(parse_kv_file(path), MODEL_SCHEMA, str(path)) if path else {}
    fields.update(overrides or {})
    try:
        return ModelConfig(**fields)
    except ValueError as exc:
        raise ConfigError(f"{path or 'model config'}: {exc}") from None


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------


@dataclass
class LoadedItem:
    """One manifest entry with its signals resident in memory."""

    id: str
    condition: str
    attention_condition: str
    mixture: np.ndarray
    target: np.ndarray
    audio_clue: np.ndarray
    visual_clue: np.ndarray
    r_audio: float
    r_visual: np.ndarray  # per visual frame


def load_items(manifest_path, base_dir=None) -> list[LoadedItem]:
    manifest_path = Path(manifest_path)
    base = Path(base_dir) if base_dir is not None else manifest_path.parent
    items = []
    for e in dg.read_manifest(manifest_path):
        mixture, _ = dg.read_wav(base / e.mixture)
        target, _ = dg.read_wav(base / e.target)
        clue, _ = dg.read_wav(base / e.audio_clue)
        visual = dg.read_features(base / e.visual_clue)
        items.append(LoadedItem(
            id=e.id, condition=e.condition, attention_condition=e.attention_condition,
            mixture=mixture.astype(np.float32), target=target.astype(np.float32),
            audio_clue=clue.astype(np.float32), visual_clue=visual.astype(np.float32),
            r_audio=float(e.oracle_r_audio), r_visual=np.asarray(e.oracle_r_visual, dtype=np.float32)))
    items.sort(key=lambda it: it.id)
    return items


def resolve_manifest(path, split: str) -> Path:
    """Accept either a dataset directory or an explicit manifest file."""
    p = Path(path)
    if p.is_dir():
        candidate = p / f"manifest_{split}.jsonl"
        if not candidate.exists():
            raise ConfigError(f"{p}: no manifest_{split}.jsonl in dataset directory")
        return candidate
    if not p.exists():
        raise ConfigError(f"manifest not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimization settings; model architecture lives in ModelConfig."""

    lr: float = 5e-4
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    alpha: float = 10.0
    beta: float = 5.0
    crop_s: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _oracle_rows(items: list[LoadedItem], adapt_schedule: bool):
    """Per-item guided-loss oracle rows and presence mask."""
    rows = np.zeros((len(items), 2), dtype=np.float32)
    present = np.zeros(len(items), dtype=np.float32)
    for i, it in enumerate(items):
        if adapt_schedule:
            if it.condition not in ADAPT_ORACLES:
                raise ValueError(f"item {it.id}: condition '{it.condition}' is not an adaptation label")
            oracle = ADAPT_ORACLES[it.condition]
        else:
            oracle = obj.oracle_attention_for_condition(it.attention_condition)
        if oracle is not None:
            rows[i] = oracle
            present[i] = 1.0
    return rows, present


def _stack_batch(items: list[LoadedItem], crop: Optional[int], rng) -> dict:
    mix, tgt = [], []
    for it in items:
        m, t = it.mixture, it.target
        if crop is not None and len(m) > crop:
            off = int(rng.integers(0, len(m) - crop + 1))
            m, t = m[off : off + crop], t[off : off + crop]
        mix.append(m)
        tgt.append(t)
    return {
        "mixture": np.stack(mix),
        "target": np.stack(tgt),
        "audio_clue": np.stack([it.audio_clue for it in items]),
        "visual_clue": np.stack([it.visual_clue for it in items]),
    }


def _batch_loss(model: ExtractionModel, batch: dict, items: list[LoadedItem],
                cfg: TrainConfig, adapt_schedule: bool) -> Tensor:
    c = model.config
    mode = c.multitask_mode
    needs_audio, needs_visual = model._needs()
    out = model.forward(
        batch["mixture"],
        batch["audio_clue"] if needs_audio else None,
        batch["visual_clue"] if needs_visual else None,
        predict_conditions=(mode == "clue_aware"))
    loss = obj.si_sdr_loss(out["estimate"], batch["target"])
    attention_like = c.fusion_mode in ("attention", "norm_attention")
    if mode == "guided" and cfg.alpha > 0 and attention_like:
        rows, present = _oracle_rows(items, adapt_schedule)
        if present.any():
            aux = obj.guided_loss_batch(out["fusion"].weights, rows, present)
            loss = ad.elem_add(loss, ad.scale(aux, cfg.alpha))
    elif mode == "clue_aware" and cfg.beta > 0:
        t_e = out["t_e"]
        r_a = np.array([it.r_audio for it in items], dtype=np.float32)
        r_v = np.stack([ad.repeat_to_length(it.r_visual, t_e) for it in items])
        aux = obj.clue_condition_loss_batch(out["r_hat_audio"], out["r_hat_visual"], r_a, r_v)
        loss = ad.elem_add(loss, ad.scale(aux, cfg.beta))
    return loss


def dev_si_sdr(model: ExtractionModel, items: list[LoadedItem], batch_size: int = 16) -> float:
    """Mean (clamped) SI-SDR of the model over a held-out set."""
    scores = evaluate_items(model, items, batch_size=batch_size)
    return float(np.mean([s for _, _, s in scores]))


def train_model(model_config: ModelConfig, train_cfg: TrainConfig,
                train_items: list[LoadedItem], dev_items: list[LoadedItem],
                out_dir, initial_model: Optional[ExtractionModel] = None,
                adapt_schedule: bool = False, quiet: bool = False) -> dict:
    """Train (or fine-tune) a model; keeps the best-dev and last checkpoints.

    Returns paths plus the per-epoch history. Fully deterministic for a
    fixed seed: batch order, crops, and parameter init all derive from it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = initial_model if initial_model is not None else ExtractionModel(model_config, seed=train_cfg.seed)
    params = model.parameters()
    state = ad.AdamState.for_params(params)
    crop = int(round(train_cfg.crop_s * model_config.sample_rate))

    if adapt_schedule:
        _log_adapt_schedule(out_dir, train_items, train_cfg)

    history = []
    best = {"dev_si_sdr": -math.inf, "epoch": 0}
    best_path = out_dir / "ckpt_best.tsf"
    last_path = out_dir / "ckpt_last.tsf"
    meta_base = {"train": asdict(train_cfg), "adapt_schedule": adapt_schedule}

    if train_cfg.epochs == 0:
        save_checkpoint(best_path, model, {**meta_base, "epoch": 0})
        save_checkpoint(last_path, model, {**meta_base, "epoch": 0})
        _write_history(out_dir / "train_log.csv", history, model)
        return {"best": best_path, "last": last_path, "history": history, "model": model}

    for epoch in range(1, train_cfg.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xE9, epoch]))
        order = rng.permutation(len(train_items))
        epoch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            items = [train_items[i] for i in idx]
            batch = _stack_batch(items, crop, rng)
            model.zero_grad()
            with Tape() as tape:
                loss = _batch_loss(model, batch, items, train_cfg, adapt_schedule)
            value = loss.item()
            if not math.isfinite(value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {start // train_cfg.batch_size}")
            tape.backward(loss)
            ad.adam_step(params, model.grads(), state, lr=train_cfg.lr)
            epoch_losses.append(value)
        dev = dev_si_sdr(model, dev_items) if dev_items else 0.0
        history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "dev_si_sdr": dev})
        if not quiet:
            print(f"epoch {epoch:3d}  train_loss {history[-1]['train_loss']:9.3f}  dev_si_sdr {dev:7.2f}")
        if dev >= best["dev_si_sdr"]:
            best = {"dev_si_sdr": dev, "epoch": epoch}
            save_checkpoint(best_path, model, {**meta_base, **best})
        save_checkpoint(last_path, model, {**meta_base, "epoch": epoch, "dev_si_sdr": dev})
    _write_history(out_dir / "train_log.csv", history, model)
    return {"best": best_path, "last": last_path, "history": history, "model": model}


def _write_history(path, history, model) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash(model.config)}\n")
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "dev_si_sdr"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def _log_adapt_schedule(out_dir, items, cfg: TrainConfig) -> None:
    path = Path(out_dir) / "adapt_schedule.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["item", "condition", "alpha"])
        for it in items:
            if it.condition not in ADAPT_ORACLES:
                raise ValueError(f"item {it.id}: condition '{it.condition}' is not an adaptation label")
            alpha = 0.0 if ADAPT_ORACLES[it.condition] is None else cfg.alpha
            writer.writerow([it.id, it.condition, alpha])


def adapt_model(checkpoint_path, adapt_train: list[LoadedItem], adapt_dev: list[LoadedItem],
                out_dir, lr: float = 1e-4, epochs: int = 20, alpha: float = 10.0,
                seed: int = 0, batch_size: int = 8, quiet: bool = False) -> dict:
    """Fine-tune a checkpoint on a shifted domain with per-condition oracles."""
    model, _ = load_checkpoint(checkpoint_path)
    cfg = TrainConfig(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed, alpha=alpha)
    return train_model(model.config, cfg, adapt_train, adapt_dev, out_dir,
                       initial_model=model, adapt_schedule=True, quiet=quiet)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_items(model: ExtractionModel, items: list[LoadedItem],
                   batch_size: int = 16, threads: int = 1) -> list[tuple]:
    """Per-item clamped SI-SDR scores, in manifest (id-sorted) order."""
    needs_audio, needs_visual = model._needs()
    chunks = [items[i : i + batch_size] for i in range(0, len(items), batch_size)]

    def score_chunk(chunk):
        batch = _stack_batch(chunk, None, None)
        out = model.forward(
            batch["mixture"],
            batch["audio_clue"] if needs_audio else None,
            batch["visual_clue"] if needs_visual else None)
        est = out["estimate"].data
        return [(it.id, it.condition, obj.clamp_db(obj.si_sdr(est[i], it.target)))
                for i, it in enumerate(chunk)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score_chunk, chunks))
    else:
        results = [score_chunk(c) for c in chunks]
    return [row for chunk in results for row in chunk]


def mixture_baseline(items: list[LoadedItem]) -> list[tuple]:
    return [(it.id, it.condition, obj.clamp_db(obj.si_sdr(it.mixture, it.target))) for it in items]


@dataclass
class EvalReport:
    """Per-condition mean table plus the per-item scores it derives from."""

    conditions: list
    systems: dict = field(default_factory=dict)  # name -> list[(id, condition, score)]
    metadata: dict = field(default_factory=dict)

    def table(self) -> dict:
        out = {}
        for name, scores in self.systems.items():
            by_cond = {}
            for _, cond, s in scores:
                by_cond.setdefault(cond, []).append(s)
            row = {cond: (float(np.mean(by_cond[cond])) if cond in by_cond else None)
                   for cond in self.conditions}
            present = [v for v in row.values() if v is not None]
            row["average"] = float(np.mean(present)) if present else None
            out[name] = row
        return out

    def write(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        csv_path = prefix.with_suffix(".csv")
        json_path = prefix.with_suffix(".json")
        table = self.table()
        with open(csv_path, "w", newline="") as f:
            f.write(f"# config_hash={self.metadata.get('config_hash', '')}\n")
            writer = csv.writer(f)
            writer.writerow(["system"] + list(self.conditions) + ["average"])
            for name, row in table.items():
                writer.writerow([name] + [("" if row[c] is None else f"{row[c]:.4f}")
                                          for c in list(self.conditions) + ["average"]])
        payload = {
            "metadata": self.metadata,
            "conditions": list(self.conditions),
            "table": table,
            "per_item": {name: [{"id": i, "condition": c, "si_sdr": s} for i, c, s in scores]
                         for name, scores in self.systems.items()},
        }
        with open(json_path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return csv_path, json_path


def evaluate_checkpoints(checkpoint_paths: list, eval_items: list[LoadedItem],
                         threads: int = 1, metadata: Optional[dict] = None) -> EvalReport:
    """Score each checkpoint per condition and include the mixture baseline."""
    seen = []
    for it in eval_items:
        if it.condition not in seen:
            seen.append(it.condition)
    report = EvalReport(conditions=seen, metadata=metadata or {})
    report.systems["mixture"] = mixture_baseline(eval_items)
    hashes = {}
    for path in checkpoint_paths:
        model, _ = load_checkpoint(path)
        name = Path(path).parent.name if Path(path).stem.startswith("ckpt") else Path(path).stem
        if name in report.systems:
            name = f"{name}_{len(report.systems)}"
        report.systems[name] = evaluate_items(model, eval_items, threads=threads)
        hashes[name] = config_hash(model.config)
    report.metadata.setdefault("config_hash", json.dumps(hashes, sort_keys=True))
    report.metadata["checkpoint_hashes"] = hashes
    return report


# ---------------------------------------------------------------------------
# Attention traces
# ---------------------------------------------------------------------------


def attention_trace(model: ExtractionModel, item: LoadedItem) -> dict:
    """Per-frame attention weights, scale, and visual-corruption level."""
    if model.config.fusion_mode not in ("attention", "norm_attention"):
        raise ValueError(f"fusion mode '{model.config.fusion_mode}' has no attention to trace")
    out = model.forward(item.mixture[None, :], item.audio_clue[None, :], item.visual_clue[None, :, :])
    weights = out["fusion"].weights.data[0]
    scale = out["fusion"].scale.data[0]
    corruption = ad.repeat_to_length(item.r_visual, out["t_e"])
    return {
        "item": item.id,
        "attn_audio": weights[:, 0],
        "attn_visual": weights[:, 1],
        "scale": scale,
        "visual_corruption": corruption,
    }


def write_trace_csv(path, trace: dict, cfg_hash: str) -> None:
    t = len(trace["attn_audio"])
    with open(path, "w", newline="") as f:
        f.write(f"# item={trace['item']} config_hash={cfg_hash}\n")
        writer = csv.writer(f)
        writer.writerow(["frame", "attn_audio", "attn_visual", "scale", "visual_corruption"])
        for i in range(t):
            writer.writerow([i, f"{trace['attn_audio'][i]:.6f}", f"{trace['attn_visual'][i]:.6f}",
                             f"{trace['scale'][i]:.6f}", f"{trace['visual_corruption'][i]:.4f}"])


def occlusion_attention_stats(model: ExtractionModel, items: list[LoadedItem]) -> dict:
    """Mean audio-attention over occluded vs clean frames across items."""
    occluded, clean = [], []
    for it in items:
        tr = attention_trace(model, it)
        masked = tr["visual_corruption"] >= 0.5
        occluded.extend(tr["attn_audio"][masked].tolist())
        clean.extend(tr["attn_audio"][~masked].tolist())
    return {
        "mean_attn_audio_occluded": float(np.mean(occluded)) if occluded else float("nan"),
        "mean_attn_audio_clean": float(np.mean(clean)) if clean else float("nan"),
        "spread": float(np.mean(occluded) - np.mean(clean)) if occluded and clean else float("nan"),
    }


# ---------------------------------------------------------------------------
# Gradient-check suite over primitives and whole model variants
# ---------------------------------------------------------------------------

GRADCHECK_COMBOS = (
    ("attention", "guided"),
    ("attention", "clue_aware"),
    ("norm_attention", "guided"),
    ("norm_attention", "clue_aware"),
    ("audio", "none"),
    ("visual", "none"),
    ("sum", "none"),
)


def gradcheck_model_variant(fusion_mode: str, multitask_mode: str, seed: int = 0,
                            max_entries: int = 2) -> ad.GradcheckReport:
    """Finite-difference check of the full training loss for one variant."""
    cfg = ModelConfig.micro(fusion_mode=fusion_mode, multitask_mode=multitask_mode)
    model = ExtractionModel(cfg, seed=seed).astype(np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([0xC1EC, seed]))
    n = 4 * cfg.L
    t_e = cfg.frames_for(n)
    mixture = rng.normal(0, 0.3, size=(2, n))
    target = rng.normal(0, 0.3, size=(2, n))
    clue = rng.normal(0, 0.3, size=(2, n))
    visual = rng.normal(size=(2, 3, cfg.visual_dim))
    oracle_rows = np.array([[0.5, 0.5], [1.0, 0.0]])
    present = np.ones(2)
    r_audio = rng.uniform(0, 1, size=2)
    r_visual = rng.uniform(0, 1, size=(2, t_e))
    weights = obj.LossWeights(alpha=10.0, beta=5.0)

    def fn():
        out = model.forward(mixture, clue, visual,
                            predict_conditions=(multitask_mode == "clue_aware"))
        loss = obj.si_sdr_loss(out["estimate"], target)
        if multitask_mode == "guided":
            aux = obj.guided_loss_batch(out["fusion"].weights, oracle_rows, present)
            loss = ad.elem_add(loss, ad.scale(aux, weights.alpha))
        elif multitask_mode == "clue_aware":
            aux = obj.clue_condition_loss_batch(out["r_hat_audio"], out["r_hat_visual"],
                                                r_audio, r_visual)
            loss = ad.elem_add(loss, ad.scale(aux, weights.beta))
        return loss

    return ad.gradcheck(fn, model.parameters(), max_entries=max_entries, seed=seed, h=3e-4)


def run_gradcheck_suite(seed: int = 0, n_primitive_cases: int = 20) -> dict:
    """Primitive sweep plus every model/fusion combination; returns results."""
    results = {"primitives": ad.gradcheck_primitives(n_cases=n_primitive_cases, seed=seed),
               "models": {}}
    for fusion_mode, multitask_mode in GRADCHECK_COMBOS:
        rep = gradcheck_model_variant(fusion_mode, multitask_mode, seed=seed)
        results["models"][f"{fusion_mode}/{multitask_mode}"] = rep
    return results


def gradcheck_suite_passed(results: dict, threshold: float = 1e-4) -> bool:
    prim_ok = all(v < threshold for v in results["primitives"].values())
    model_ok = all(rep.passed for rep in results["models"].values())
    return prim_ok and model_ok
