"""Task heads: per-character tagging and sentence-level classification.

Tagging puts a linear classifier over every final character state and is
evaluated with exact-match span F1 (BMES for segmentation, BIO for typed
entities). Classification pools the first position through the pretrained
pooler and a fresh linear layer, evaluated with accuracy. N-grams are
matched for every example exactly as in pretraining, but nothing is
masked, so no occurrence is ever excluded.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import CLS, SEP, Vocab, truncate_pair
from .matcher import match
from .model import (ModelError, ZenModel, load_checkpoint, param_rng,
                    pooled_output, truncated_normal)
from .pretrain import AdamW, TrainConfig, _int_seed

SCHEMES = ("BMES", "BIO")


class TaskError(ValueError):
    pass


class LexiconMismatch(TaskError):
    """Checkpoint was pretrained against a different lexicon file."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str                      # "tagging" | "classification"
    labels: tuple
    scheme: str = None             # tagging only

    def __post_init__(self):
        if self.kind not in ("tagging", "classification"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.kind == "tagging" and self.scheme not in SCHEMES:
            raise TaskError(f"tagging task needs a scheme in {SCHEMES}, got {self.scheme!r}")
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise TaskError("labels must be a non-empty set of distinct strings")

    @property
    def label_ids(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}


@dataclass(frozen=True)
class TaggingExample:
    chars: str
    labels: tuple

    def __post_init__(self):
        if len(self.chars) != len(self.labels):
            raise TaskError(f"{len(self.chars)} chars vs {len(self.labels)} labels")


@dataclass(frozen=True)
class ClassificationExample:
    text_a: str
    text_b: str = None
    label: int = 0


def validate_examples(examples, spec: TaskSpec) -> None:
    """Reject labels outside the task set, naming the offending example."""
    known = set(spec.labels)
    for idx, ex in enumerate(examples):
        if spec.kind == "tagging":
            for lab in ex.labels:
                if lab not in known:
                    raise TaskError(f"example {idx}: label {lab!r} outside task set")
        else:
            if not 0 <= ex.label < len(spec.labels):
                raise TaskError(f"example {idx}: label id {ex.label} outside task set")


# ---------------------------------------------------------------------------
# Data files
# ---------------------------------------------------------------------------

def read_tagging_tsv(path) -> list:
    """`char<TAB>label` per line, blank line between sentences."""
    examples = []
    chars, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                if chars:
                    examples.append(TaggingExample("".join(chars), tuple(labels)))
                    chars, labels = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or len(parts[0]) != 1:
                raise TaskError(f"{path}:{lineno}: expected `char<TAB>label`, got {line!r}")
            chars.append(parts[0])
            labels.append(parts[1])
    if chars:
        examples.append(TaggingExample("".join(chars), tuple(labels)))
    return examples


def write_tagging_tsv(path, examples) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            for ch, lab in zip(ex.chars, ex.labels):
                fh.write(f"{ch}\t{lab}\n")
            fh.write("\n")


def read_classification_tsv(path, spec: TaskSpec) -> list:
    """`label<TAB>text_a[<TAB>text_b]` per line."""
    ids = spec.label_ids
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise TaskError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(parts)}")
            if parts[0] not in ids:
                raise TaskError(f"{path}:{lineno}: label {parts[0]!r} outside task set")
            examples.append(ClassificationExample(
                parts[1], parts[2] if len(parts) == 3 else None, ids[parts[0]]))
    return examples


# ---------------------------------------------------------------------------
# Span decoding (total functions: invalid transitions are repaired)
# ---------------------------------------------------------------------------
#
# Repair rule: a continuation with no open span starts one (stray M and
# I-X act as B), a stray E closes a single-character span (acts as S), and
# a span still open when B/S/O arrives (or at the end) closes before it.

def decode_bmes(labels) -> set:
    spans = set()
    start = None
    for i, lab in enumerate(labels):
        head = lab[0]
        if head == "B":
            if start is not None:
                spans.add((start, i))
            start = i
        elif head == "M":
            if start is None:
                start = i
        elif head == "E":
            if start is None:
                spans.add((i, i + 1))
            else:
                spans.add((start, i + 1))
                start = None
        elif head == "S":
            if start is not None:
                spans.add((start, i))
                start = None
            spans.add((i, i + 1))
        else:
            raise TaskError(f"label {lab!r} is not BMES")
    if start is not None:
        spans.add((start, len(labels)))
    return spans


def decode_bio(labels) -> set:
    spans = set()
    start = None
    kind = None

    def close(stop):
        nonlocal start, kind
        if start is not None:
            spans.add((start, stop, kind))
            start, kind = None, None

    for i, lab in enumerate(labels):
        if lab == "O":
            close(i)
        elif lab.startswith("B-"):
            close(i)
            start, kind = i, lab[2:]
        elif lab.startswith("I-"):
            if start is None or lab[2:] != kind:
                close(i)
                start, kind = i, lab[2:]
        else:
            raise TaskError(f"label {lab!r} is not BIO")
    close(len(labels))
    return spans


def decode_spans(labels, scheme: str) -> set:
    return decode_bmes(labels) if scheme == "BMES" else decode_bio(labels)


def span_prf(gold_spans, pred_spans) -> dict:
    """Micro precision/recall/F1 over per-sentence exact-match span sets."""
    tp = sum(len(g & p) for g, p in zip(gold_spans, pred_spans))
    n_gold = sum(len(g) for g in gold_spans)
    n_pred = sum(len(p) for p in pred_spans)
    precision = tp / n_pred if n_pred else (1.0 if n_gold == 0 else 0.0)
    recall = tp / n_gold if n_gold else (1.0 if n_pred == 0 else 0.0)
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


# ---------------------------------------------------------------------------
# Task model
# ---------------------------------------------------------------------------

class TaskModel:
    """Pretrained encoder plus one task head; everything trains jointly."""

    def __init__(self, model: ZenModel, spec: TaskSpec, vocab: Vocab,
                 lexicon=None, max_ngrams: int = 128, head_seed: int = 0):
        self.model = model
        self.spec = spec
        self.vocab = vocab
        self.lexicon = lexicon if lexicon is not None and len(lexicon) > 0 else None
        self.max_ngrams = max_ngrams
        n_labels = len(spec.labels)
        d = model.config.hidden
        w = truncated_normal(param_rng(head_seed, "head.w"), (d, n_labels),
                             model.config.init_std).astype(model.config.np_dtype)
        self.head = {
            "head.w": nm.parameter(w, "head.w"),
            "head.b": nm.parameter(np.zeros(n_labels, dtype=model.config.np_dtype), "head.b"),
        }

    def parameters(self) -> dict:
        return {**self.model.params, **self.head}

    def _encode(self, text_a: str, text_b: str = None):
        if text_b:
            text_a, text_b = truncate_pair(text_a, text_b, self.model.config.max_len - 3)
            tokens = [CLS] + list(text_a) + [SEP] + list(text_b) + [SEP]
            segments = [0] * (len(text_a) + 2) + [1] * (len(text_b) + 1)
        else:
            text_a = text_a[:self.model.config.max_len - 2]
            tokens = [CLS] + list(text_a) + [SEP]
            segments = [0] * len(tokens)
        state = match(tokens, self.lexicon, self.max_ngrams) if self.lexicon else None
        return tokens, self.vocab.encode(tokens), segments, state

    def tagging_logits(self, chars: str, train=False, rng=None) -> nm.Tensor:
        tokens, ids, segments, state = self._encode(chars)
        result = self.model.forward(ids, segments, state, train=train, rng=rng)
        positions = list(range(1, len(tokens) - 1))
        h = nm.gather(result.char_states, positions)
        return nm.add(nm.matmul(h, self.head["head.w"]), self.head["head.b"])

    def classification_logits(self, ex: ClassificationExample, train=False, rng=None) -> nm.Tensor:
        _, ids, segments, state = self._encode(ex.text_a, ex.text_b)
        result = self.model.forward(ids, segments, state, train=train, rng=rng)
        pooled = pooled_output(self.model, result.char_states)
        return nm.add(nm.matmul(pooled, self.head["head.w"]), self.head["head.b"])

    def predict_tags(self, chars: str) -> list:
        logits = self.tagging_logits(chars)
        return [self.spec.labels[i] for i in logits.values.argmax(axis=-1)]

    def predict_class(self, ex: ClassificationExample) -> int:
        return int(self.classification_logits(ex).values.argmax())


def example_loss(task_model: TaskModel, ex, train=True, rng=None) -> nm.Tensor:
    spec = task_model.spec
    if spec.kind == "tagging":
        logits = task_model.tagging_logits(ex.chars, train=train, rng=rng)
        ids = task_model.spec.label_ids
        labels = [ids[lab] for lab in ex.labels[:logits.values.shape[0]]]
        return nm.cross_entropy(logits, labels)
    logits = task_model.classification_logits(ex, train=train, rng=rng)
    return nm.cross_entropy(logits, [ex.label])


# ---------------------------------------------------------------------------
# Fine-tuning loop and evaluation
# ---------------------------------------------------------------------------

def finetune(spec: TaskSpec, train_data, dev_data, checkpoint_path, lexicon,
             config: TrainConfig, lexicon_path=None, epochs: int = None):
    """Fine-tune from a pretraining checkpoint; returns (TaskModel, history).

    The checkpoint records the hash of the lexicon file it was pretrained
    with; fine-tuning refuses to run against a different one. `config.steps`
    is read as the epoch count unless `epochs` overrides it. The model state
    from the best dev epoch is restored before returning.
    """
    from .model import lexicon_file_hash

    model, _, sidecar = load_checkpoint(checkpoint_path)
    provided = lexicon_file_hash(lexicon_path)
    recorded = sidecar.get("lexicon_sha256", "none")
    if provided != recorded:
        raise LexiconMismatch(
            f"checkpoint lexicon hash {recorded[:12]}.. != provided {provided[:12]}..")
    if sidecar.get("vocab_tokens") is None:
        raise ModelError("checkpoint carries no vocabulary")
    vocab = Vocab.from_tokens(tuple(sidecar["vocab_tokens"][5:]))

    validate_examples(train_data, spec)
    validate_examples(dev_data, spec)
    task_model = TaskModel(model, spec, vocab, lexicon,
                           max_ngrams=config.max_ngrams, head_seed=config.seed)
    params = task_model.parameters()
    optimizer = AdamW(params, config)

    epochs = config.steps if epochs is None else epochs
    batches_per_epoch = math.ceil(len(train_data) / config.batch_size)
    total_updates = epochs * batches_per_epoch
    schedule = TrainConfig(steps=total_updates, batch_size=config.batch_size,
                           lr=config.lr, warmup_frac=config.warmup_frac, seed=config.seed)

    history = []
    best = (-1.0, None, None)
    update = 0
    for epoch in range(epochs):
        order = list(range(len(train_data)))
        random.Random(f"{config.seed}:ft-epoch:{epoch}").shuffle(order)
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            nm.zero_grad(params)
            for idx in chunk:
                rng = np.random.default_rng(_int_seed(f"{config.seed}:ft-drop:{update}:{idx}"))
                loss = example_loss(task_model, train_data[idx], train=True, rng=rng)
                nm.backward(loss, seed=1.0 / len(chunk))
            update += 1
            optimizer.step(lr_at_update(update, schedule))
        dev_metrics = evaluate(task_model, dev_data) if dev_data else {}
        key = dev_metrics.get("f1", dev_metrics.get("accuracy", 0.0))
        history.append({"epoch": epoch + 1, **dev_metrics})
        if key > best[0]:
            best = (key, {n: p.values.copy() for n, p in params.items()}, epoch + 1)

    if best[1] is not None:
        for name, p in params.items():
            p.values = best[1][name]
    return task_model, history


def lr_at_update(update: int, schedule: TrainConfig) -> float:
    from .pretrain import lr_at
    return lr_at(update, schedule)


def evaluate(task_model: TaskModel, data) -> dict:
    """Tagging: exact-match span precision/recall/F1. Classification: accuracy."""
    spec = task_model.spec
    if spec.kind == "tagging":
        gold, pred = [], []
        for ex in data:
            predicted = task_model.predict_tags(ex.chars)
            gold.append(decode_spans(list(ex.labels)[:len(predicted)], spec.scheme))
            pred.append(decode_spans(predicted, spec.scheme))
        return span_prf(gold, pred)
    correct = sum(1 for ex in data if task_model.predict_class(ex) == ex.label)
    return {"accuracy": correct / len(data) if data else 0.0}


def format_metrics_report(task_name: str, metrics: dict) -> str:
    lines = [f"task\t{task_name}"]
    for name, value in metrics.items():
        lines.append(f"{name}\t{value:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Task-model persistence (encoder checkpoint + head + task spec)
# ---------------------------------------------------------------------------

def save_task_model(path, task_model: TaskModel, lexicon_hash: str = "none") -> None:
    from dataclasses import asdict

    from .model import save_checkpoint
    save_checkpoint(path, task_model.model, lexicon_hash=lexicon_hash,
                    vocab_tokens=task_model.vocab.id_to_token,
                    extra_arrays={name: p.values for name, p in task_model.head.items()},
                    meta={"task_spec": asdict(task_model.spec),
                          "max_ngrams": task_model.max_ngrams})


def load_task_model(path, lexicon=None, lexicon_path=None) -> TaskModel:
    from .model import lexicon_file_hash

    model, rest, sidecar = load_checkpoint(path)
    recorded = sidecar.get("lexicon_sha256", "none")
    if lexicon_file_hash(lexicon_path) != recorded:
        raise LexiconMismatch(f"task model was trained against lexicon {recorded[:12]}..")
    spec = TaskSpec(**{**sidecar["meta"]["task_spec"],
                       "labels": tuple(sidecar["meta"]["task_spec"]["labels"])})
    vocab = Vocab.from_tokens(tuple(sidecar["vocab_tokens"][5:]))
    task_model = TaskModel(model, spec, vocab, lexicon,
                           max_ngrams=sidecar["meta"]["max_ngrams"])
    for name, p in task_model.head.items():
        p.values = rest[name].astype(model.config.np_dtype, copy=True)
    return task_model


# ---------------------------------------------------------------------------
# Synthetic segmentation data
# ---------------------------------------------------------------------------

def generate_segmentation_dataset(n_sentences: int = 50, n_words: int = 30,
                                  word_lengths=(1, 4), words_per_sentence=(3, 8),
                                  alphabet: str = "abcdefghijklmnopqrstuvwxyz",
                                  seed: int = 0) -> list:
    """Sentences of dictionary words with BMES labels from the word boundaries."""
    rng = random.Random(f"segmentation:{seed}")
    words = []
    seen = set()
    while len(words) < n_words:
        length = rng.randint(*word_lengths)
        w = "".join(rng.choice(alphabet) for _ in range(length))
        if w not in seen:
            seen.add(w)
            words.append(w)

    examples = []
    for _ in range(n_sentences):
        picked = [rng.choice(words) for _ in range(rng.randint(*words_per_sentence))]
        labels = []
        for w in picked:
            if len(w) == 1:
                labels.append("S")
            else:
                labels.extend(["B"] + ["M"] * (len(w) - 2) + ["E"])
        examples.append(TaggingExample("".join(picked), tuple(labels)))
    return examples


SEGMENTATION_SPEC = TaskSpec("segmentation", "tagging", ("B", "M", "E", "S"), "BMES")
