"""Pretraining: masked-recovery + next-sentence objectives and the loop.

The batch stream is a pure function of (corpus, seed, step): sentence
pairs are reshuffled per epoch with a seeded permutation, negatives are
drawn per instance, and masks are re-sampled every epoch. That makes runs
replayable byte-for-byte and lets a resumed run regenerate exactly the
batches it would have seen.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import PretrainInstance, Vocab, make_instance
from .matcher import MatchState, exclude_masked, match
from .model import ZenModel, mlm_logits, nsp_logits, save_checkpoint

METRIC_FIELDS = ("step", "total_loss", "mlm_loss", "nsp_loss", "mlm_acc", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 8
    lr: float = 1e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_rate: float = 0.15
    max_ngrams: int = 128
    log_every: int = 1
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.log_every <= 0:
            raise ValueError("steps, batch_size, lr and log_every must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac {self.warmup_frac} outside [0, 1)")
        if self.mask_rate < 0 or self.mask_rate > 1 or self.max_ngrams < 0:
            raise ValueError("bad mask_rate or max_ngrams")


def _int_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def mlm_loss(model: ZenModel, char_states, mask_positions, labels) -> nm.Tensor:
    """Mean cross-entropy of the original ids at the masked positions."""
    if len(mask_positions) == 0:
        raise ValueError("mlm_loss: no masked positions")
    return nm.cross_entropy(mlm_logits(model, char_states, mask_positions), list(labels))


def nsp_loss(model: ZenModel, char_states, is_next: bool) -> nm.Tensor:
    """Binary cross-entropy of the follows-in-corpus label (1 = follows)."""
    return nm.cross_entropy(nsp_logits(model, char_states), [int(is_next)])


# ---------------------------------------------------------------------------
# Optimizer: Adam with decoupled weight decay and a linear warmup/decay lr
# ---------------------------------------------------------------------------

def decay_applies(name: str) -> bool:
    """Weight decay skips biases and layer-norm parameters."""
    return not name.endswith((".b", ".g", ".bias"))


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate for 1-based `step`: linear warmup, then linear decay to 0."""
    warmup = int(round(config.warmup_frac * config.steps))
    if step <= warmup:
        return config.lr * step / max(1, warmup)
    return config.lr * max(0.0, (config.steps - step) / max(1, config.steps - warmup))


class AdamW:
    def __init__(self, params: dict, config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self, lr: float) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.weight_decay and decay_applies(name):
                update = update + c.weight_decay * p.values
            p.values = p.values - lr * update

    def state_arrays(self) -> dict:
        out = {"opt.t": np.asarray(self.t, dtype=np.int64)}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["opt.t"])
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()


# ---------------------------------------------------------------------------
# Deterministic instance stream
# ---------------------------------------------------------------------------

class InstanceStream:
    """Maps a global instance index to a masked, matched training instance.

    Pairs are consecutive sentences within a document; corpora without any
    consecutive pair (single-sentence documents) fall back to self-pairs so
    small smoke corpora stay trainable. With probability 0.5 the second
    sentence is replaced by a random corpus sentence other than the true
    successor, flipping the next-sentence label.
    """

    def __init__(self, docs, vocab: Vocab, lexicon, seed: int,
                 mask_rate: float, max_ngrams: int, max_len: int):
        self.sentences = [s for doc in docs for s in doc]
        if not self.sentences:
            raise ValueError("empty corpus")
        self.pairs = []
        offset = 0
        for doc in docs:
            for i in range(len(doc) - 1):
                self.pairs.append((offset + i, offset + i + 1))
            offset += len(doc)
        if not self.pairs:
            self.pairs = [(i, i) for i in range(len(self.sentences))]
        self.vocab = vocab
        self.lexicon = lexicon if lexicon is not None and len(lexicon) > 0 else None
        self.seed = seed
        self.mask_rate = mask_rate
        self.max_ngrams = max_ngrams
        self.max_len = max_len
        self._epoch_orders: dict[int, list] = {}

    def _order(self, epoch: int) -> list:
        order = self._epoch_orders.get(epoch)
        if order is None:
            order = list(range(len(self.pairs)))
            random.Random(f"{self.seed}:order:{epoch}").shuffle(order)
            self._epoch_orders.clear()  # only the current epoch is ever revisited
            self._epoch_orders[epoch] = order
        return order

    def instance_at(self, index: int) -> tuple:
        """(PretrainInstance, MatchState or None) for global instance `index`."""
        epoch, pos = divmod(index, len(self.pairs))
        a_idx, b_idx = self.pairs[self._order(epoch)[pos]]
        rng = random.Random(f"{self.seed}:inst:{index}")

        sent_a = self.sentences[a_idx]
        is_next = True
        b_pick = b_idx
        if rng.random() < 0.5 and len(self.sentences) > 1:
            alt = rng.randrange(len(self.sentences) - 1)
            b_pick = alt if alt < b_idx else alt + 1
            is_next = False
        instance = make_instance(sent_a, self.sentences[b_pick], is_next, self.vocab,
                                 self.mask_rate, rng, self.max_len)

        state = None
        if self.lexicon is not None:
            state = match(instance.original_tokens, self.lexicon, self.max_ngrams)
            state = exclude_masked(state, instance.mask_positions)
        return instance, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    metrics: list                    # dict rows with METRIC_FIELDS keys
    checkpoint_path: Path
    log_path: Path = None


def format_metric_row(row: dict) -> str:
    return ",".join(str(row[f]) if f == "step" else repr(float(row[f]))
                    for f in METRIC_FIELDS)


def instance_loss(model: ZenModel, instance: PretrainInstance, state: MatchState,
                  train: bool = True, rng: np.random.Generator = None):
    """Forward one instance; returns (total, mlm, nsp, mlm_correct_count)."""
    result = model.forward(instance.token_ids, instance.segment_ids, state,
                           train=train, rng=rng)
    logits = mlm_logits(model, result.char_states, instance.mask_positions)
    lm = nm.cross_entropy(logits, list(instance.mlm_labels))
    ns = nsp_loss(model, result.char_states, instance.is_next)
    correct = int((logits.values.argmax(axis=-1) == np.asarray(instance.mlm_labels)).sum())
    return nm.add(lm, ns), lm, ns, correct, len(instance.mlm_labels)


def train(docs, vocab: Vocab, lexicon, model: ZenModel, config: TrainConfig,
          out_dir, resume_arrays: dict = None, resume_step: int = 0,
          lexicon_hash: str = "none", stop_at_accuracy: float = None,
          stop_window: int = 20) -> TrainResult:
    """Run the pretraining loop and leave a metric log plus checkpoints.

    A non-finite loss aborts with the failing step number; the most recent
    periodic checkpoint stays on disk. Pass `resume_arrays`/`resume_step`
    from a loaded checkpoint to continue a run: the stream regenerates the
    remaining batches exactly as the uninterrupted run would have. With
    `stop_at_accuracy` set, the loop ends early once the trailing
    `stop_window` average of batch recovery accuracy reaches the target.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = InstanceStream(docs, vocab, lexicon, config.seed,
                            config.mask_rate, config.max_ngrams, model.config.max_len)
    optimizer = AdamW(model.params, config)
    if resume_arrays:
        optimizer.load_state_arrays(resume_arrays)

    log_path = out_dir / "metrics.csv"
    mode = "a" if resume_step else "w"
    metrics = []
    recent_acc: list[float] = []
    final_path = out_dir / "checkpoint-final.bin"
    with open(log_path, mode, encoding="utf-8", newline="\n") as log:
        if not resume_step:
            log.write(",".join(METRIC_FIELDS) + "\n")
        for step in range(resume_step, config.steps):
            nm.zero_grad(model.params)
            base = step * config.batch_size
            total_sum = mlm_sum = nsp_sum = 0.0
            correct = masked = 0
            for j in range(config.batch_size):
                idx = base + j
                instance, state = stream.instance_at(idx)
                drop_rng = np.random.default_rng(_int_seed(f"{config.seed}:drop:{idx}"))
                total, lm, ns, c, n = instance_loss(model, instance, state,
                                                    train=True, rng=drop_rng)
                nm.backward(total, seed=1.0 / config.batch_size)
                total_sum += total.item()
                mlm_sum += lm.item()
                nsp_sum += ns.item()
                correct += c
                masked += n

            step_num = step + 1
            lr = lr_at(step_num, config)
            row = {"step": step_num,
                   "total_loss": total_sum / config.batch_size,
                   "mlm_loss": mlm_sum / config.batch_size,
                   "nsp_loss": nsp_sum / config.batch_size,
                   "mlm_acc": correct / max(1, masked),
                   "lr": lr}
            if not math.isfinite(row["total_loss"]):
                log.flush()
                raise TrainingDiverged(f"non-finite loss at step {step_num}")
            optimizer.step(lr)

            if step_num % config.log_every == 0 or step_num == config.steps:
                metrics.append(row)
                log.write(format_metric_row(row) + "\n")
            if config.checkpoint_every and step_num % config.checkpoint_every == 0:
                _save_train_checkpoint(out_dir / f"checkpoint-{step_num}.bin", model,
                                       optimizer, config, step_num, lexicon_hash, vocab)
            if stop_at_accuracy is not None:
                recent_acc.append(row["mlm_acc"])
                if len(recent_acc) > stop_window:
                    recent_acc.pop(0)
                if sum(recent_acc) / len(recent_acc) >= stop_at_accuracy:
                    break

        _save_train_checkpoint(final_path, model, optimizer, config,
                               optimizer.t, lexicon_hash, vocab)
    return TrainResult(metrics, final_path, log_path)


def _save_train_checkpoint(path, model, optimizer, config, step, lexicon_hash, vocab):
    save_checkpoint(path, model, lexicon_hash=lexicon_hash,
                    vocab_tokens=vocab.id_to_token,
                    extra_arrays=optimizer.state_arrays(),
                    meta={"step": step, "train_config": asdict(config)})


def moving_average(values, window: int) -> list:
    """Trailing mean over up to `window` previous values, one per input."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def first_step_reaching(metrics, target: float, window: int = 20, key: str = "mlm_acc"):
    """First logged step whose trailing average of `key` meets `target`."""
    steps = [row["step"] for row in metrics]
    smoothed = moving_average([row[key] for row in metrics], window)
    for step, value in zip(steps, smoothed):
        if value >= target:
            return step
    return None


# ---------------------------------------------------------------------------
# Synthetic phrase corpus
# ---------------------------------------------------------------------------

def generate_phrase_corpus(n_phrases: int = 200, phrase_lengths=(2, 4),
                           n_sentences: int = 5000, phrases_per_sentence=(4, 8),
                           sentences_per_doc: int = 5,
                           alphabet: str = "abcdefghijklmnopqrstuvwxyz",
                           seed: int = 0):
    """Sentences built by concatenating a fixed multi-character phrase inventory.

    Every sentence is a concatenation of whole phrases, so the inventory is
    maximally informative for n-gram matching. Returns (docs, phrases) with
    docs in the usual list-of-documents form.
    """
    rng = random.Random(f"phrase-corpus:{seed}")
    phrases = []
    seen = set()
    while len(phrases) < n_phrases:
        length = rng.randint(*phrase_lengths)
        candidate = "".join(rng.choice(alphabet) for _ in range(length))
        if candidate not in seen:
            seen.add(candidate)
            phrases.append(candidate)

    sentences = []
    for _ in range(n_sentences):
        count = rng.randint(*phrases_per_sentence)
        sentences.append("".join(rng.choice(phrases) for _ in range(count)))
    docs = [sentences[i:i + sentences_per_doc]
            for i in range(0, len(sentences), sentences_per_doc)]
    return docs, phrases
