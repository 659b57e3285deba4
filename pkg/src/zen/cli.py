"""Command-line entry point wiring lexicon building, training, and analysis.

Config precedence is command line > config file > built-in defaults, and
every command writes the merged config it actually ran with next to its
outputs, so any run can be reproduced from its output directory alone.

Exit codes: 0 success, 1 usage or validation failure (bad flags, missing
or malformed inputs, caught before work starts), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import finetune as ft
from . import lexicon as lex
from .corpus import Vocab, build_vocab, normalize, read_corpus
from .matcher import MatchState, match
from .model import (ModelConfig, ZenModel, export_ngram_weights,
                    format_heatmap_tsv, lexicon_file_hash, load_checkpoint)
from .pretrain import TrainConfig, train


class UsageError(ValueError):
    pass


MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# Config loading and merging
# ---------------------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def load_config_file(path) -> dict:
    if path is None:
        return {}
    path = _require_file(path, "config file")
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    unknown = set(config) - {"model", "train"}
    if unknown:
        raise UsageError(f"config file {path}: unknown sections {sorted(unknown)}")
    return config


def merged_section(file_config: dict, section: str, allowed: set, overrides: dict) -> dict:
    values = dict(file_config.get(section, {}))
    bad = set(values) - allowed
    if bad:
        raise UsageError(f"config section {section!r}: unknown keys {sorted(bad)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values


def train_overrides(args) -> dict:
    return {"steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
            "mask_rate": getattr(args, "mask_rate", None),
            "max_ngrams": getattr(args, "max_ngrams", None),
            "log_every": getattr(args, "log_every", None),
            "checkpoint_every": getattr(args, "checkpoint_every", None),
            "warmup_frac": getattr(args, "warmup_frac", None)}


def model_overrides(args) -> dict:
    return {name: getattr(args, name, None)
            for name in ("char_layers", "ngram_layers", "hidden", "heads",
                         "ffn", "max_len", "dropout", "dtype")}


def write_effective_config(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps({"command": command, **payload}, indent=1, sort_keys=True,
                      ensure_ascii=False, default=str)
    (out_dir / "effective-config.json").write_text(text + "\n", encoding="utf-8")


def read_normalized_corpus(path):
    """Documents from a corpus file with normalization applied per line."""
    docs = read_corpus(_require_file(path, "corpus"))
    return [[normalize(line) for line in doc] for doc in docs]


def load_lexicon_arg(path):
    """A --lexicon value: `none` selects the character-only baseline."""
    if path is None or str(path) == "none":
        return None, None, "none"
    path = _require_file(path, "lexicon")
    return lex.load(path), path, lexicon_file_hash(path)


def load_task_spec(path) -> ft.TaskSpec:
    path = _require_file(path, "task spec")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return ft.TaskSpec(raw["name"], raw["kind"], tuple(raw["labels"]),
                           raw.get("scheme"))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"task spec {path}: {exc}") from exc


def read_task_data(path, spec: ft.TaskSpec):
    path = _require_file(path, "data file")
    if spec.kind == "tagging":
        data = ft.read_tagging_tsv(path)
    else:
        data = ft.read_classification_tsv(path, spec)
    ft.validate_examples(data, spec)
    return data


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_build_lexicon(args) -> int:
    docs = read_normalized_corpus(args.corpus)
    lines = [line for doc in docs for line in doc]
    lexicon = lex.extract(lines, n_min=args.n_min, n_max=args.n_max,
                          threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lex.save(lexicon, out)
    config_path = out.with_name(out.name + ".config.json")
    config_path.write_text(json.dumps(
        {"command": "build-lexicon", "corpus": str(args.corpus), "out": str(out),
         "n_min": args.n_min, "n_max": args.n_max, "threshold": args.threshold},
        indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"entries: {len(lexicon)}")
    for n, count in lexicon.size_histogram().items():
        print(f"n={n}: {count}")
    return 0


def cmd_pretrain(args) -> int:
    out_dir = Path(args.out)
    docs = read_normalized_corpus(args.corpus)
    lexicon, lexicon_path, lexicon_hash = load_lexicon_arg(args.lexicon)
    file_config = load_config_file(args.config)

    vocab = build_vocab((line for doc in docs for line in doc),
                        min_count=args.min_count)
    train_kw = merged_section(file_config, "train", TRAIN_FIELDS, train_overrides(args))
    train_kw["seed"] = args.seed
    train_kw.setdefault("steps", 100)
    model_kw = merged_section(file_config, "model", MODEL_FIELDS, model_overrides(args))
    model_kw["vocab_size"] = len(vocab)
    model_kw["lexicon_size"] = len(lexicon) if lexicon is not None else 0

    model_config = ModelConfig(**model_kw)
    train_config = TrainConfig(**train_kw)
    write_effective_config(out_dir, "pretrain", {
        "corpus": str(args.corpus), "lexicon": str(args.lexicon),
        "lexicon_sha256": lexicon_hash, "seed": args.seed,
        "model": asdict(model_config), "train": asdict(train_config)})
    vocab.save(out_dir / "vocab.txt")

    model = ZenModel(model_config, seed=args.seed)
    result = train(docs, vocab, lexicon, model, train_config, out_dir,
                   lexicon_hash=lexicon_hash)
    last = result.metrics[-1]
    print(f"finished {train_config.steps} steps: total_loss={last['total_loss']:.4f} "
          f"mlm_acc={last['mlm_acc']:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    out_dir = Path(args.out)
    spec = load_task_spec(args.task)
    train_data = read_task_data(args.train, spec)
    dev_data = read_task_data(args.dev, spec) if args.dev else train_data
    lexicon, lexicon_path, lexicon_hash = load_lexicon_arg(args.lexicon)
    _require_file(args.checkpoint, "checkpoint")
    _require_file(str(args.checkpoint) + ".json", "checkpoint sidecar")
    file_config = load_config_file(args.config)

    train_kw = merged_section(file_config, "train", TRAIN_FIELDS, train_overrides(args))
    train_kw["seed"] = args.seed
    train_kw.setdefault("steps", 10)
    config = TrainConfig(**train_kw)
    write_effective_config(out_dir, "finetune", {
        "task": asdict(spec), "train_data": str(args.train),
        "dev_data": str(args.dev), "checkpoint": str(args.checkpoint),
        "lexicon": str(args.lexicon), "lexicon_sha256": lexicon_hash,
        "seed": args.seed, "train": asdict(config)})

    task_model, history = ft.finetune(spec, train_data, dev_data, args.checkpoint,
                                      lexicon, config, lexicon_path=lexicon_path)
    model_path = out_dir / "task-model.bin"
    ft.save_task_model(model_path, task_model, lexicon_hash=lexicon_hash)
    with open(out_dir / "dev-history.csv", "w", encoding="utf-8", newline="\n") as fh:
        keys = sorted({k for row in history for k in row})
        fh.write(",".join(keys) + "\n")
        for row in history:
            fh.write(",".join(repr(row.get(k, "")) for k in keys) + "\n")
    best = max(history, key=lambda r: r.get("f1", r.get("accuracy", 0.0)))
    print(ft.format_metrics_report(spec.name, {k: v for k, v in best.items()
                                               if k != "epoch"}), end="")
    print(f"task model: {model_path}")
    return 0


def cmd_eval(args) -> int:
    lexicon, lexicon_path, _ = load_lexicon_arg(args.lexicon)
    _require_file(args.model, "task model")
    data_path = _require_file(args.data, "data file")
    task_model = ft.load_task_model(args.model, lexicon, lexicon_path)
    data = read_task_data(data_path, task_model.spec)
    metrics = ft.evaluate(task_model, data)
    report = ft.format_metrics_report(task_model.spec.name, metrics)
    if args.out:
        out_dir = Path(args.out)
        write_effective_config(out_dir, "eval", {
            "model": str(args.model), "data": str(args.data),
            "lexicon": str(args.lexicon)})
        (out_dir / "metrics.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return 0


def cmd_export_heatmap(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(str(args.checkpoint) + ".json", "checkpoint sidecar")
    lexicon, lexicon_path, lexicon_hash = load_lexicon_arg(args.lexicon)
    model, _, sidecar = load_checkpoint(args.checkpoint)
    if lexicon_hash != sidecar.get("lexicon_sha256", "none"):
        raise UsageError("lexicon does not match the one recorded in the checkpoint")
    if sidecar.get("vocab_tokens") is None:
        raise UsageError("checkpoint carries no vocabulary")
    vocab = Vocab.from_tokens(tuple(sidecar["vocab_tokens"][5:]))

    text = normalize(args.text)[:model.config.max_len - 2]
    tokens = ["[CLS]"] + list(text) + ["[SEP]"]
    if lexicon is not None:
        state = match(tokens, lexicon, args.max_ngrams)
    else:
        state = MatchState((), np.zeros((len(tokens), 0), dtype=np.int8))
    if state.k_n == 0:
        print("warning: no lexicon n-grams matched; table is empty", file=sys.stderr)
    weights = export_ngram_weights(model, vocab.encode(tokens),
                                   [0] * len(tokens), state)
    table = format_heatmap_tsv(weights, state,
                               lexicon if lexicon is not None else lex.NgramLexicon((), 2, 8, 1))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table, encoding="utf-8")
    print(f"wrote {state.k_n} occurrences x {model.config.ngram_layers} layers to {out}")
    return 0


def cmd_sweep(args) -> int:
    values = [int(v) for v in args.values.split(",") if v != ""]
    if not values:
        raise UsageError("sweep needs at least one value")
    if len(set(values)) != len(values):
        raise UsageError(f"duplicate sweep values: {args.values}")
    spec = load_task_spec(args.task)
    docs = read_normalized_corpus(args.corpus)
    lines = [line for doc in docs for line in doc]
    train_data = read_task_data(args.train, spec)
    dev_data = read_task_data(args.dev, spec)
    test_data = read_task_data(args.test, spec) if args.test else dev_data
    file_config = load_config_file(args.config)
    out_dir = Path(args.out)
    write_effective_config(out_dir, "sweep", {
        "param": args.param, "values": values, "corpus": str(args.corpus),
        "task": asdict(spec), "seed": args.seed, "config": file_config})

    rows = []
    for value in values:
        run_dir = out_dir / f"{args.param}-{value}"
        if args.param == "threshold":
            lexicon = lex.extract(lines, threshold=value)
            max_ngrams = args.max_ngrams if args.max_ngrams is not None else 128
        else:
            lexicon = lex.extract(lines, threshold=args.threshold)
            max_ngrams = value
        if max_ngrams == 0 or len(lexicon) == 0:
            lexicon = None

        lex_path = None
        lexicon_hash = "none"
        if lexicon is not None:
            lex_path = run_dir / "lexicon.tsv"
            run_dir.mkdir(parents=True, exist_ok=True)
            lex.save(lexicon, lex_path)
            lexicon_hash = lexicon_file_hash(lex_path)

        vocab = build_vocab(lines)
        train_kw = merged_section(file_config, "train", TRAIN_FIELDS, train_overrides(args))
        train_kw["seed"] = args.seed
        train_kw.setdefault("steps", 50)
        train_kw["max_ngrams"] = max_ngrams
        model_kw = merged_section(file_config, "model", MODEL_FIELDS, {})
        model_kw["vocab_size"] = len(vocab)
        model_kw["lexicon_size"] = len(lexicon) if lexicon is not None else 0

        model = ZenModel(ModelConfig(**model_kw), seed=args.seed)
        train(docs, vocab, lexicon, model, TrainConfig(**train_kw), run_dir,
              lexicon_hash=lexicon_hash)
        task_model, _ = ft.finetune(spec, train_data, dev_data,
                                    run_dir / "checkpoint-final.bin", lexicon,
                                    TrainConfig(**train_kw), lexicon_path=lex_path)
        dev_metrics = ft.evaluate(task_model, dev_data)
        test_metrics = ft.evaluate(task_model, test_data)
        metric_key = "f1" if spec.kind == "tagging" else "accuracy"
        rows.append((value, dev_metrics[metric_key], test_metrics[metric_key]))
        print(f"{args.param}={value}: dev {metric_key}={rows[-1][1]:.4f} "
              f"test {metric_key}={rows[-1][2]:.4f}")

    with open(out_dir / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{args.param},dev_metric,test_metric\n")
        for value, dev_m, test_m in rows:
            fh.write(f"{value},{dev_m!r},{test_m!r}\n")
    print(f"sweep results: {out_dir / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_train_flags(p, seed_required=True):
    p.add_argument("--seed", type=int, required=seed_required,
                   help="rng seed; mandatory so runs are reproducible")
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--steps", type=int, help="optimizer steps (epochs for finetune)")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--warmup-frac", type=float, dest="warmup_frac")
    p.add_argument("--mask-rate", type=float, dest="mask_rate")
    p.add_argument("--max-ngrams", type=int, dest="max_ngrams",
                   help="per-instance n-gram budget")
    p.add_argument("--log-every", type=int, dest="log_every")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")


def _add_model_flags(p):
    p.add_argument("--char-layers", type=int, dest="char_layers")
    p.add_argument("--ngram-layers", type=int, dest="ngram_layers")
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn", type=int)
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--dropout", type=float)
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zen", description="n-gram-enhanced character encoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-lexicon", help="extract an n-gram lexicon from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="lexicon TSV path")
    p.add_argument("--n-min", type=int, default=2, dest="n_min")
    p.add_argument("--n-max", type=int, default=8, dest="n_max")
    p.add_argument("--threshold", type=int, default=15)
    p.set_defaults(func=cmd_build_lexicon)

    p = sub.add_parser("pretrain", help="train the encoder on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", default="none",
                   help="lexicon TSV, or `none` for the character-only baseline")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-count", type=int, default=1, dest="min_count",
                   help="vocabulary frequency cutoff")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a task head from a checkpoint")
    p.add_argument("--task", required=True, help="task spec JSON")
    p.add_argument("--train", required=True, help="training data TSV")
    p.add_argument("--dev", help="dev data TSV (defaults to training data)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lexicon", default="none")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned task model")
    p.add_argument("--model", required=True, help="task model from finetune")
    p.add_argument("--data", required=True)
    p.add_argument("--lexicon", default="none")
    p.add_argument("--out", help="optional output directory for the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the pipeline across parameter values")
    p.add_argument("--param", required=True, choices=("threshold", "max-ngrams"))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test")
    p.add_argument("--threshold", type=int, default=2,
                   help="lexicon threshold when sweeping max-ngrams")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-heatmap", help="dump per-layer n-gram attention weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--lexicon", default="none")
    p.add_argument("--out", required=True, help="TSV output path")
    p.add_argument("--max-ngrams", type=int, default=128, dest="max_ngrams")
    p.set_defaults(func=cmd_export_heatmap)
    return parser


VALIDATION_ERRORS = (UsageError, lex.LexiconError, ft.TaskError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
