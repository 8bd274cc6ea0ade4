"""Command-line entry point: gen-data | train | eval | gradcheck | inspect.

Config files are flat `key = value` text; command-line flags override file
values and every effective value is echoed at startup so runs reproduce.
Exit codes: 0 success, 1 runtime/I-O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (ConfigurationError, DatasetManifest, ParseError,
                   generate_dataset, read_dataset, write_dataset)
from .model import ModelConfig
from .training import (TrainConfig, TrainingError, evaluate_model,
                       inspect_sample, load_checkpoint, save_checkpoint, train)
from .verification import run_all

_TRAIN_KEYS = {"learning_rate", "weight_decay", "epochs", "batch_size", "seed",
               "val_fraction", "max_steps", "divergence_limit"}
_MODEL_KEYS = {"embed_dim", "n_heads", "n_align_layers", "expansion"}


def _coerce(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def parse_flat_config(path: str | Path) -> dict:
    """Flat key = value lines; '#' starts a comment."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = _coerce(raw.strip())
    return values


def _split_config(flat: dict) -> tuple[dict, dict]:
    train_kwargs, model_kwargs = {}, {}
    for key, value in flat.items():
        if key in _TRAIN_KEYS or key.startswith("weight_"):
            train_kwargs[key] = value
        elif key in _MODEL_KEYS or key.startswith("image_") or key.startswith("text_"):
            model_kwargs[key] = value
        else:
            raise ConfigurationError(f"unknown config key '{key}'")
    return train_kwargs, model_kwargs


def _echo(title: str, mapping: dict) -> None:
    print(f"[{title}]")
    for key in sorted(mapping):
        print(f"  {key} = {mapping[key]}")


def _cmd_gen_data(args) -> int:
    mix = [float(v) for v in args.mix.split(",")]
    if len(mix) != 4:
        raise ConfigurationError("--mix needs four comma-separated proportions (tt,ft,tf,ff)")
    manifest = DatasetManifest(
        num_samples=args.num, grid_side=args.grid_side, token_length=args.token_length,
        vocab_size=args.vocab_size, patch_dim=args.patch_dim,
        n_candidates=args.candidates, mix_tt=mix[0], mix_ft=mix[1], mix_tf=mix[2],
        mix_ff=mix[3], signal_strength=args.signal, seed=args.seed)
    _echo("manifest", manifest.__dict__)
    samples = generate_dataset(manifest)
    write_dataset(args.out, samples, manifest)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    manifest, samples = read_dataset(args.dataset)
    flat = parse_flat_config(args.config) if args.config else {}
    train_kwargs, model_kwargs = _split_config(flat)
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.steps is not None:
        train_kwargs["max_steps"] = args.steps
    model_flat = ModelConfig.from_manifest(manifest).to_flat_dict()
    model_flat.update(model_kwargs)
    model_config = ModelConfig.from_flat_dict(model_flat)
    train_config = TrainConfig.from_flat_dict(train_kwargs)
    _echo("model_config", model_config.to_flat_dict())
    _echo("train_config", train_config.to_flat_dict())

    result = train(model_config, train_config, samples)
    out = Path(args.out)
    best_path = out.with_name(out.stem + ".best" + (out.suffix or ".pt"))
    meta = {"steps_run": result.steps_run, "best_val_total": result.best_val_total,
            "final_val_total": result.final_val_total, "dataset": str(args.dataset)}
    save_checkpoint(out, result.model, train_config=train_config, meta=meta)
    save_checkpoint(best_path, result.model, state_dict=result.best_state,
                    train_config=train_config, meta=meta)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    with log_path.open("w") as fh:
        for row in result.log_rows:
            fh.write(json.dumps(row) + "\n")
    print(f"ran {result.steps_run} steps; final val total {result.final_val_total:.6f}, "
          f"best {result.best_val_total:.6f}")
    print(f"checkpoints: {out} (final), {best_path} (best); log: {log_path}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _, samples = read_dataset(args.dataset)
    report = evaluate_model(model, samples)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"report written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    print(f"{'status':<6} {'check':<28} {'measure':>10}")
    for res in results:
        print(res.row())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_inspect(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _, samples = read_dataset(args.dataset)
    if not 0 <= args.index < len(samples):
        raise ConfigurationError(f"--index {args.index} out of range (dataset has "
                                 f"{len(samples)} samples)")
    dump = inspect_sample(model, samples[args.index])
    text = json.dumps(dump, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tamperloc",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    gen.add_argument("--num", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--mix", default="0.25,0.25,0.25,0.25",
                     help="tt,ft,tf,ff proportions")
    gen.add_argument("--grid-side", type=int, default=8)
    gen.add_argument("--token-length", type=int, default=16)
    gen.add_argument("--vocab-size", type=int, default=64)
    gen.add_argument("--patch-dim", type=int, default=16)
    gen.add_argument("--candidates", type=int, default=5)
    gen.add_argument("--signal", type=float, default=1.2)
    gen.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train a model on a dataset file")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--config", default=None, help="flat key = value file")
    tr.add_argument("--out", required=True, help="final checkpoint path")
    tr.add_argument("--log", default=None, help="per-step log path (jsonl)")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--steps", type=int, default=None, help="cap on optimizer steps")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", default=None, help="report path (json)")
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("gradcheck", help="run the gradient and oracle suites")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=_cmd_gradcheck)

    ins = sub.add_parser("inspect", help="dump localization internals for one sample")
    ins.add_argument("--checkpoint", required=True)
    ins.add_argument("--dataset", required=True)
    ins.add_argument("--index", type=int, default=0)
    ins.add_argument("--out", default=None)
    ins.set_defaults(func=_cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ParseError, ConfigurationError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
