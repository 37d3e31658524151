"""Command-line interface: generate, train, adapt, eval, attn, gradcheck."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import harness as hn
from .model import ModelConfig, config_hash, load_checkpoint

FUSION_FLAGS = {
    "audio": "audio", "visual": "visual", "sum": "sum",
    "attention": "attention", "norm-attention": "norm_attention",
}
MULTITASK_FLAGS = {"none": "none", "guided": "guided", "clue-aware": "clue_aware"}

EXIT_CONFIG = 2


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory or file prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avtse",
                                     description="audio-visual target speaker extraction harness")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a corruption-annotated dataset")
    g.add_argument("--config", help="key/value generation config file")
    _add_common(g)

    t = sub.add_parser("train", help="train an extraction model")
    t.add_argument("--manifest", required=True, help="dataset directory or train manifest file")
    t.add_argument("--dev-manifest", help="explicit dev manifest (defaults to sibling)")
    t.add_argument("--config", help="key/value model config file")
    t.add_argument("--fusion", choices=sorted(FUSION_FLAGS), default="norm-attention")
    t.add_argument("--multitask", choices=sorted(MULTITASK_FLAGS), default="none")
    t.add_argument("--alpha", type=float, default=10.0)
    t.add_argument("--beta", type=float, default=5.0)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=8)
    _add_common(t)

    a = sub.add_parser("adapt", help="fine-tune a checkpoint on a shifted domain")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--manifest", required=True, help="adaptation dataset directory or manifest")
    a.add_argument("--dev-manifest")
    a.add_argument("--config", help="model config file; must match the checkpoint")
    a.add_argument("--alpha", type=float, default=10.0)
    a.add_argument("--lr", type=float, default=1e-4)
    a.add_argument("--epochs", type=int, default=20)
    a.add_argument("--batch-size", type=int, default=8)
    _add_common(a)

    e = sub.add_parser("eval", help="condition-by-condition SI-SDR report")
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--manifest", required=True, help="dataset directory or eval manifest")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="report path prefix (.csv/.json added)")

    at = sub.add_parser("attn", help="dump a per-frame attention trace")
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--manifest", required=True)
    at.add_argument("--item", required=True, help="manifest item id")
    at.add_argument("--out", required=True, help="trace CSV path")

    gc = sub.add_parser("gradcheck", help="finite-difference check of all primitives and models")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--cases", type=int, default=20, help="random cases per primitive")
    return parser


def cmd_generate(args) -> int:
    cfg = hn.gen_config_from_file(args.config) if args.config else dg.GenConfig()
    out = Path(args.out)
    manifests = dg.build_dataset(cfg, out, args.seed)
    n = {k: len(dg.read_manifest(v)) for k, v in manifests.items()}
    print(f"dataset written to {out} (items: {n}); seed {args.seed}")
    for split, path in manifests.items():
        print(f"  {split}: {path}")
    return 0


def _train_items(args):
    train_manifest = hn.resolve_manifest(args.manifest, "train")
    if args.dev_manifest:
        dev_manifest = Path(args.dev_manifest)
    else:
        dev_manifest = hn.resolve_manifest(train_manifest.parent, "dev")
    return hn.load_items(train_manifest), hn.load_items(dev_manifest)


def cmd_train(args) -> int:
    overrides = {
        "fusion_mode": FUSION_FLAGS[args.fusion],
        "multitask_mode": MULTITASK_FLAGS[args.multitask],
    }
    model_cfg = hn.model_config_from_file(args.config, overrides)
    epochs = args.epochs if args.epochs is not None else hn.TrainConfig().epochs
    train_cfg = hn.TrainConfig(lr=args.lr, epochs=epochs, batch_size=args.batch_size,
                               seed=args.seed, alpha=args.alpha, beta=args.beta)
    train_items, dev_items = _train_items(args)
    result = hn.train_model(model_cfg, train_cfg, train_items, dev_items, args.out)
    print(f"best checkpoint: {result['best']}")
    print(f"last checkpoint: {result['last']}")
    return 0


def cmd_adapt(args) -> int:
    if args.config:
        file_cfg = hn.model_config_from_file(args.config)
        _, meta = load_checkpoint(args.checkpoint)
        ckpt_model, _ = load_checkpoint(args.checkpoint)
        if config_hash(file_cfg) != config_hash(ckpt_model.config):
            raise hn.ConfigError("model config does not match the checkpoint (config hash mismatch)")
    adapt_train = hn.load_items(hn.resolve_manifest(args.manifest, "train"))
    if args.dev_manifest:
        adapt_dev = hn.load_items(Path(args.dev_manifest))
    else:
        adapt_dev = hn.load_items(hn.resolve_manifest(Path(hn.resolve_manifest(args.manifest, "train")).parent, "dev"))
    result = hn.adapt_model(args.checkpoint, adapt_train, adapt_dev, args.out,
                            lr=args.lr, epochs=args.epochs, alpha=args.alpha,
                            seed=args.seed, batch_size=args.batch_size)
    print(f"adapted checkpoint: {result['best']}")
    return 0


def cmd_eval(args) -> int:
    eval_items = hn.load_items(hn.resolve_manifest(args.manifest, "eval"))
    report = hn.evaluate_checkpoints(args.checkpoint, eval_items, threads=args.threads,
                                     metadata={"manifest": str(args.manifest), "seed": args.seed})
    csv_path, json_path = report.write(args.out)
    print(f"report written: {csv_path} {json_path}")
    for name, row in report.table().items():
        avg = row["average"]
        print(f"  {name:24s} average {avg:.2f} dB" if avg is not None else f"  {name}")
    return 0


def cmd_attn(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    if manifest.is_dir():
        manifest = hn.resolve_manifest(manifest, "eval")
    items = [it for it in hn.load_items(manifest) if it.id == args.item]
    if not items:
        raise hn.ConfigError(f"item '{args.item}' not found in {manifest}")
    trace = hn.attention_trace(model, items[0])
    hn.write_trace_csv(args.out, trace, config_hash(model.config))
    print(f"trace written: {args.out} ({len(trace['attn_audio'])} frames)")
    return 0


def cmd_gradcheck(args) -> int:
    results = hn.run_gradcheck_suite(seed=args.seed, n_primitive_cases=args.cases)
    ok = True
    for kind, err in sorted(results["primitives"].items()):
        status = "pass" if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        print(f"primitive {kind:24s} max rel err {err:.3e}  {status}")
    for combo, rep in results["models"].items():
        status = "pass" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"model     {combo:24s} max rel err {rep.max_rel_error:.3e}  {status}")
        if not rep.passed:
            for name, err in rep.failing().items():
                print(f"          {name}: {err:.3e}")
    print("gradcheck " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "generate": cmd_generate, "train": cmd_train, "adapt": cmd_adapt,
        "eval": cmd_eval, "attn": cmd_attn, "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except hn.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
