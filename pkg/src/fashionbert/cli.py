"""Command-line entry point: ``fashionbert <command> [flags]``.

Every run resolves its settings from the profile defaults, then an optional
``key = value`` config file, then explicit flags, and writes a
``manifest.json`` recording the resolved values next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, adaptive
from .evaluation import ModelScorer, balanced_pairs, evaluate, matching_accuracy, write_reports
from .model import FashionBERT, ModelConfig, load_checkpoint, save_checkpoint
from .synthetic import generate_dataset, read_corpus, split_ids, write_corpus
from .text import Vocabulary, build_vocab
from .training import TrainConfig, prepare_products, run_training, write_log
from .vsl import bench_latency, write_bench_csv

log = logging.getLogger("fashionbert")

_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in ("vocab_size", "num_patches")]
_TRAIN_KEYS = [k for k in TrainConfig.field_names() if k != "seed"]

PROFILES: dict[str, dict] = {
    "desk": {
        "count": 2000, "image_size": 64, "grid": 4, "vocab_max_size": 0,
        **{k: getattr(ModelConfig(), k) for k in _MODEL_KEYS},
        **{k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS},
        "query_count": 200, "distractor_count": 100,
        "bench_repetitions": 10, "bench_batch_size": 32, "bench_warmup": 3, "bench_split": "test",
    },
}
PROFILES["paper"] = {
    **PROFILES["desk"],
    "image_size": 256, "grid": 8,
    **{k: getattr(ModelConfig.full_scale(vocab_size=32), k) for k in _MODEL_KEYS},
    **{k: getattr(TrainConfig.full_scale(), k) for k in _TRAIN_KEYS},
}


class UsageError(Exception):
    pass


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return type(default)(raw)
    except ValueError:
        raise UsageError(f"invalid value {raw!r} for {key}") from None


def read_config_file(path, defaults: dict) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--config: no such file {path}")
    out = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise UsageError(f"--config {path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


def resolve_settings(args) -> dict:
    settings = dict(PROFILES[args.profile])
    if args.config:
        settings.update(read_config_file(args.config, settings))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in settings:
            raise UsageError(f"--set: unknown key {key!r}")
        settings[key] = _coerce(key, value, settings[key])
    for key, value in getattr(args, "overrides", {}).items():
        if value is not None:
            settings[key] = value
    return settings


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_dir(flag: str, path) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: no such path {path}")
    return p


def write_manifest(out: Path, command: str, settings: dict, seed: int, inputs: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": settings,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": outputs,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_products(data_dir: Path, vocab: Vocabulary, settings: dict):
    records, splits = read_corpus(data_dir)
    data = prepare_products(records, vocab, settings["grid"], settings["max_text_len"])
    return data, splits


def _model_config(settings: dict, vocab_size: int) -> ModelConfig:
    kw = {k: settings[k] for k in _MODEL_KEYS}
    return ModelConfig(vocab_size=vocab_size, num_patches=settings["grid"] ** 2, **kw)


def _train_config(settings: dict, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **{k: settings[k] for k in _TRAIN_KEYS})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, settings) -> int:
    out = _out_dir(args)
    records = generate_dataset(settings["count"], settings["image_size"], args.seed)
    splits = split_ids([r.product_id for r in records], args.seed)
    write_corpus(out, records, splits)
    write_manifest(out, "gen-data", settings, args.seed, {}, ["products.txt", "images/", "train.txt", "val.txt", "test.txt"])
    print(f"wrote {len(records)} products to {out}")
    return 0


def cmd_build_vocab(args, settings) -> int:
    data_dir = _require_dir("--data", args.data)
    out = _out_dir(args)
    records, splits = read_corpus(data_dir)
    train = set(splits.get("train", [r.product_id for r in records]))
    max_size = settings["vocab_max_size"] or None
    vocab = build_vocab((r.description for r in records if r.product_id in train), max_size)
    vocab.save(out / "vocab.txt")
    write_manifest(out, "build-vocab", settings, args.seed, {"data": data_dir}, ["vocab.txt"])
    print(f"vocabulary of {len(vocab)} pieces written to {out / 'vocab.txt'}")
    return 0


def cmd_pretrain(args, settings) -> int:
    data_dir = _require_dir("--data", args.data)
    vocab_path = _require_dir("--vocab", args.vocab)
    out = _out_dir(args)
    vocab = Vocabulary.load(vocab_path)
    data, splits = _load_products(data_dir, vocab, settings)
    if "train" not in splits:
        raise UsageError(f"--data: {data_dir} has no train.txt split")
    model = FashionBERT(_model_config(settings, len(vocab)), seed=args.seed)
    tcfg = _train_config(settings, args.seed)
    validate = None
    if splits.get("val"):
        val_pairs = balanced_pairs(splits["val"], np.random.default_rng([args.seed, 0xA1]))
        validate = lambda m: matching_accuracy(ModelScorer(m, data), val_pairs)  # noqa: E731

    def progress(row):
        if row.step % 100 == 0:
            l = row.losses
            log.info("step %d  mlm %.4f mpm %.5f tia %.4f  w=%s", row.step, l.mlm, l.mpm, l.tia, np.round(row.weights, 4))

    result = run_training(model, data, splits["train"], tcfg, validate=validate, snapshot_dir=out, progress=progress)
    save_checkpoint(out / "checkpoint.bin", result.model)
    write_log(out / "train_log.csv", result.log)
    (out / "val_log.csv").write_text("step,val_accuracy\n" + "".join(f"{s},{a!r}\n" for s, a in result.validation))
    write_manifest(out, "pretrain", settings, args.seed, {"data": data_dir, "vocab": vocab_path},
                   ["checkpoint.bin", "train_log.csv", "val_log.csv"])
    print(f"trained {len(result.log)} steps (best step {result.best_step}); checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _trained(args, settings):
    data_dir = _require_dir("--data", args.data)
    vocab_path = _require_dir("--vocab", args.vocab)
    ckpt = _require_dir("--checkpoint", args.checkpoint)
    vocab = Vocabulary.load(vocab_path)
    model = load_checkpoint(ckpt)
    settings = {**settings, "max_text_len": model.config.max_text_len}
    data, splits = _load_products(data_dir, vocab, settings)
    return model, data, splits, {"data": data_dir, "vocab": vocab_path, "checkpoint": ckpt}


def cmd_eval(args, settings) -> int:
    model, data, splits, inputs = _trained(args, settings)
    out = _out_dir(args)
    if "test" not in splits:
        raise UsageError("--data: corpus has no test.txt split")
    reports = evaluate(ModelScorer(model, data), splits["test"], args.seed,
                       settings["query_count"], settings["distractor_count"])
    write_reports(out, reports)
    write_manifest(out, "eval", settings, args.seed, inputs, ["report.txt", "report.csv"])
    for r in reports:
        print(r.line())
    return 0


def cmd_bench_vsl(args, settings) -> int:
    model, data, splits, inputs = _trained(args, settings)
    out = _out_dir(args)
    ids = splits.get(settings["bench_split"])
    if not ids:
        raise UsageError(f"--set bench_split: corpus has no {settings['bench_split']!r} split")
    pairs = [(data.texts[i], data.grids[i]) for i in ids]
    stats = [
        bench_latency(model, pairs, mode, settings["bench_repetitions"], settings["bench_batch_size"], settings["bench_warmup"])
        for mode in ("padded", "vsl")
    ]
    write_bench_csv(out / "bench.csv", stats)
    write_manifest(out, "bench-vsl", settings, args.seed, inputs, ["bench.csv"])
    for s in stats:
        print(f"{s.mode:>6}: mean {s.mean_ms:.3f} ms  p50 {s.p50_ms:.3f} ms  p95 {s.p95_ms:.3f} ms")
    return 0


def cmd_solve_weights(args, settings) -> int:
    weights = adaptive.solve_weights(args.signals)
    print(" ".join(f"{w:.5f}" for w in weights))
    if args.verify:
        oracle = adaptive.qp_oracle(args.signals)
        gap = float(np.max(np.abs(oracle - weights)))
        print(f"oracle {' '.join(f'{w:.5f}' for w in oracle)}  max gap {gap:.3e}")
        if gap > 1e-6:
            print("error: closed form and oracle disagree", file=sys.stderr)
            return 1
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "bench-vsl": cmd_bench_vsl,
    "solve-weights": cmd_solve_weights,
}


def _signal(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' settings file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fashionbert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--count", type=int, dest="o_count")
    p.add_argument("--image-size", type=int, dest="o_image_size")

    p = sub.add_parser("build-vocab", parents=[common], help="build the word vocabulary")
    p.add_argument("--data")
    p.add_argument("--max-size", type=int, dest="o_vocab_max_size")

    p = sub.add_parser("pretrain", parents=[common], help="train with adaptive or fixed loss weights")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--weighting", choices=("adaptive", "fixed"), dest="o_weighting")
    p.add_argument("--steps", type=int, dest="o_total_steps")
    p.add_argument("--batch-size", type=int, dest="o_batch_size")
    p.add_argument("--lr", type=float, dest="o_learning_rate")
    p.add_argument("--warmup", type=int, dest="o_warmup_steps")

    for name, help_ in (("eval", "matching accuracy and Rank@K"), ("bench-vsl", "padded vs VSL latency")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data")
        p.add_argument("--vocab")
        p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--queries", type=int, dest="o_query_count")
            p.add_argument("--distractors", type=int, dest="o_distractor_count")
        else:
            p.add_argument("--repetitions", type=int, dest="o_bench_repetitions")
            p.add_argument("--batch-size", type=int, dest="o_bench_batch_size")

    p = sub.add_parser("solve-weights", parents=[common], help="closed-form loss weights for given signals")
    p.add_argument("signals", nargs="+", type=_signal, help="task signals in [0, 1)")
    p.add_argument("--verify", action="store_true", help="cross-check with the projected-gradient oracle")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.overrides = {k[2:]: v for k, v in vars(args).items() if k.startswith("o_")}
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings = resolve_settings(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fashionbert {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"fashionbert {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
