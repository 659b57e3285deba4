"""The n-gram-enhanced character encoder.

Two transformer stacks share one forward pass: a character backbone with
token/position/segment embeddings, and a positionless n-gram encoder over
the occurrences matched for the instance. At every backbone layer except
the last, the current n-gram representations are added into the character
stream through the binary matching matrix:

    V <- V + M @ U

so each character receives the sum of the representations of every kept
occurrence covering it, and characters covered by nothing pass through
unchanged. With no occurrences the whole model degenerates exactly to a
plain character-only encoder, which doubles as the baseline arm in every
comparison.

When the n-gram encoder is shallower than the backbone (ngram_layers <
char_layers), n-gram layer t serves the backbone layers l with
floor(l * ngram_layers / char_layers) == t: it is advanced on the first
such l and its output is fused at each of them. The encoder always
advances ngram_layers times in total; the deepest output feeds only the
attention-weight diagnostics when the last backbone layer is reached,
since that layer never fuses.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import PAD_ID
from .matcher import MatchState

ATTENTION_MASK_VALUE = -1e9  # exp() underflows to exactly 0.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    lexicon_size: int
    char_layers: int = 4
    ngram_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    max_len: int = 128
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        positive = {"vocab_size": self.vocab_size, "char_layers": self.char_layers,
                    "ngram_layers": self.ngram_layers, "hidden": self.hidden,
                    "heads": self.heads, "ffn": self.ffn, "max_len": self.max_len}
        for name, value in positive.items():
            if value <= 0:
                raise ModelError(f"{name} must be positive, got {value}")
        if self.lexicon_size < 0:
            raise ModelError("lexicon_size must be >= 0")
        if self.hidden % self.heads != 0:
            raise ModelError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.ngram_layers > self.char_layers:
            raise ModelError("ngram_layers must not exceed char_layers")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout {self.dropout} outside [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def ngram_layer_for(self, backbone_layer: int) -> int:
        return (backbone_layer * self.ngram_layers) // self.char_layers


def param_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with draws outside two deviations redrawn."""
    x = rng.standard_normal(shape) * std
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum())) * std


class ZenModel:
    """Parameter container plus the fused forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, nm.Tensor] = {}
        self._seed = seed
        self._build()

    # -- parameter construction ------------------------------------------

    def _weight(self, name, shape):
        values = truncated_normal(param_rng(self._seed, name), shape, self.config.init_std)
        self.params[name] = nm.parameter(values.astype(self.config.np_dtype), name)

    def _zeros(self, name, shape):
        self.params[name] = nm.parameter(np.zeros(shape, dtype=self.config.np_dtype), name)

    def _layer_norm_pair(self, prefix):
        self.params[prefix + ".g"] = nm.parameter(
            np.ones(self.config.hidden, dtype=self.config.np_dtype), prefix + ".g")
        self._zeros(prefix + ".b", self.config.hidden)

    def _encoder_layer_params(self, prefix):
        d, f = self.config.hidden, self.config.ffn
        for proj in ("q", "k", "v", "o"):
            self._weight(f"{prefix}.attn.{proj}.w", (d, d))
            self._zeros(f"{prefix}.attn.{proj}.b", d)
        self._layer_norm_pair(f"{prefix}.attn_ln")
        self._weight(f"{prefix}.ffn.w1", (d, f))
        self._zeros(f"{prefix}.ffn.b1", f)
        self._weight(f"{prefix}.ffn.w2", (f, d))
        self._zeros(f"{prefix}.ffn.b2", d)
        self._layer_norm_pair(f"{prefix}.ffn_ln")

    def _build(self):
        cfg = self.config
        self._weight("char.tok_emb", (cfg.vocab_size, cfg.hidden))
        self._weight("char.pos_emb", (cfg.max_len, cfg.hidden))
        self._weight("char.seg_emb", (2, cfg.hidden))
        self._layer_norm_pair("char.emb_ln")
        self._weight("ngram.emb", (cfg.lexicon_size, cfg.hidden))
        self._layer_norm_pair("ngram.emb_ln")
        for l in range(cfg.char_layers):
            self._encoder_layer_params(f"char.{l}")
        for t in range(cfg.ngram_layers):
            self._encoder_layer_params(f"ngram.{t}")
        self._weight("mlm.dense.w", (cfg.hidden, cfg.hidden))
        self._zeros("mlm.dense.b", cfg.hidden)
        self._layer_norm_pair("mlm.ln")
        self._zeros("mlm.bias", cfg.vocab_size)  # decoder weight is tied to char.tok_emb
        self._weight("nsp.pooler.w", (cfg.hidden, cfg.hidden))
        self._zeros("nsp.pooler.b", cfg.hidden)
        self._weight("nsp.cls.w", (cfg.hidden, 2))
        self._zeros("nsp.cls.b", 2)

    def parameters(self) -> dict:
        return self.params

    def state_arrays(self) -> dict:
        return {name: p.values for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ModelError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        for name, p in self.params.items():
            arr = arrays[name]
            if arr.shape != p.values.shape:
                raise ModelError(f"parameter {name}: shape {arr.shape} != {p.values.shape}")
            p.values = arr.astype(self.config.np_dtype, copy=True)

    # -- forward ----------------------------------------------------------

    def _attention(self, prefix, x, k, mask, train, rng):
        cfg = self.config
        h, dh = cfg.heads, cfg.head_dim
        P = self.params

        def proj(name):
            y = nm.add(nm.matmul(x, P[f"{prefix}.attn.{name}.w"]), P[f"{prefix}.attn.{name}.b"])
            return nm.transpose(nm.reshape(y, (k, h, dh)), (1, 0, 2))

        q, key, val = proj("q"), proj("k"), proj("v")
        scores = nm.scale(nm.matmul(q, nm.transpose(key, (0, 2, 1))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = nm.add(scores, mask)
        probs = nm.softmax(scores)
        probs_values = probs.values
        if train and cfg.dropout > 0.0:
            probs = nm.dropout(probs, cfg.dropout, rng)
        ctx = nm.reshape(nm.transpose(nm.matmul(probs, val), (1, 0, 2)), (k, cfg.hidden))
        out = nm.add(nm.matmul(ctx, P[f"{prefix}.attn.o.w"]), P[f"{prefix}.attn.o.b"])
        return out, probs_values

    def _encoder_layer(self, prefix, x, mask=None, train=False, rng=None):
        cfg = self.config
        P = self.params
        k = x.values.shape[0]
        attn_out, probs = self._attention(prefix, x, k, mask, train, rng)
        if train and cfg.dropout > 0.0:
            attn_out = nm.dropout(attn_out, cfg.dropout, rng)
        x = nm.layer_norm(nm.add(x, attn_out), P[f"{prefix}.attn_ln.g"],
                          P[f"{prefix}.attn_ln.b"], cfg.layer_norm_eps)
        hidden = nm.gelu(nm.add(nm.matmul(x, P[f"{prefix}.ffn.w1"]), P[f"{prefix}.ffn.b1"]))
        ffn_out = nm.add(nm.matmul(hidden, P[f"{prefix}.ffn.w2"]), P[f"{prefix}.ffn.b2"])
        if train and cfg.dropout > 0.0:
            ffn_out = nm.dropout(ffn_out, cfg.dropout, rng)
        x = nm.layer_norm(nm.add(x, ffn_out), P[f"{prefix}.ffn_ln.g"],
                          P[f"{prefix}.ffn_ln.b"], cfg.layer_norm_eps)
        return x, probs

    def _embed_chars(self, token_ids, segment_ids, train, rng):
        cfg = self.config
        P = self.params
        k_c = len(token_ids)
        x = nm.add(nm.add(nm.gather(P["char.tok_emb"], token_ids),
                          nm.gather(P["char.pos_emb"], np.arange(k_c))),
                   nm.gather(P["char.seg_emb"], segment_ids))
        x = nm.layer_norm(x, P["char.emb_ln.g"], P["char.emb_ln.b"], cfg.layer_norm_eps)
        if train and cfg.dropout > 0.0:
            x = nm.dropout(x, cfg.dropout, rng)
        return x

    def _embed_ngrams(self, occurrence_ids, train, rng):
        cfg = self.config
        P = self.params
        u = nm.gather(P["ngram.emb"], occurrence_ids)
        u = nm.layer_norm(u, P["ngram.emb_ln.g"], P["ngram.emb_ln.b"], cfg.layer_norm_eps)
        if train and cfg.dropout > 0.0:
            u = nm.dropout(u, cfg.dropout, rng)
        return u

    def ngram_layer(self, t: int, u: nm.Tensor, train: bool = False,
                    rng: np.random.Generator = None):
        """One positionless encoder layer over k_n occurrence rows.

        Self-attention runs over all rows with no positional term anywhere,
        so permuting the input rows permutes the output rows identically.
        Returns (states, attention probs); empty input passes through.
        """
        if u.values.shape[0] == 0:
            return u, np.zeros((self.config.heads, 0, 0))
        return self._encoder_layer(f"ngram.{t}", u, None, train, rng)

    def _pad_mask(self, token_ids):
        pad = np.asarray(token_ids) == PAD_ID
        if not pad.any():
            return None
        k = len(token_ids)
        row = np.where(pad, ATTENTION_MASK_VALUE, 0.0).astype(self.config.np_dtype)
        return nm.tensor(np.broadcast_to(row, (self.config.heads, k, k)), dtype=self.config.np_dtype)

    def forward(self, token_ids, segment_ids, match: MatchState = None,
                train: bool = False, rng: np.random.Generator = None) -> "ForwardResult":
        """Run both streams and return final character states plus records.

        `match` may be None (or have k_n == 0) for the character-only path.
        In train mode dropout draws from `rng`; eval mode is deterministic.
        """
        cfg = self.config
        token_ids = list(token_ids)
        segment_ids = list(segment_ids)
        k_c = len(token_ids)
        if k_c == 0 or k_c > cfg.max_len:
            raise ModelError(f"instance length {k_c} outside 1..{cfg.max_len}")
        if len(segment_ids) != k_c:
            raise ModelError(f"segment ids length {len(segment_ids)} != {k_c} tokens")
        if train and cfg.dropout > 0.0 and rng is None:
            raise ModelError("train-mode forward with dropout needs an rng")

        k_n = match.k_n if match is not None else 0
        if match is not None and match.matrix.shape[0] != k_c:
            raise ModelError(
                f"matching matrix has {match.matrix.shape[0]} rows for {k_c} tokens")

        x = self._embed_chars(token_ids, segment_ids, train, rng)
        char_mask = self._pad_mask(token_ids)

        ngram_states: list[nm.Tensor] = []
        ngram_attn: list[np.ndarray] = []
        char_attn: list[np.ndarray] = []
        u = None
        m_const = None
        if k_n > 0:
            u = self._embed_ngrams([o.lexicon_id for o in match.occurrences], train, rng)
            m_const = nm.tensor(match.matrix.astype(cfg.np_dtype), dtype=cfg.np_dtype)

        applied = -1
        for l in range(cfg.char_layers):
            if k_n > 0:
                t = cfg.ngram_layer_for(l)
                if t > applied:
                    u, probs = self.ngram_layer(t, u, train, rng)
                    ngram_states.append(u)
                    ngram_attn.append(probs)
                    applied = t
                if l < cfg.char_layers - 1:
                    x = nm.add(x, nm.matmul(m_const, u))
            x, probs = self._encoder_layer(f"char.{l}", x, char_mask, train, rng)
            char_attn.append(probs)

        return ForwardResult(x, ngram_states, char_attn, ngram_attn)


@dataclass
class ForwardResult:
    char_states: nm.Tensor                      # k_c x hidden
    ngram_states: list = field(default_factory=list)
    char_attention: list = field(default_factory=list)   # per layer: heads x k_c x k_c
    ngram_attention: list = field(default_factory=list)  # per layer: heads x k_n x k_n


def fuse(v: nm.Tensor, u: nm.Tensor, m: np.ndarray) -> nm.Tensor:
    """Add each character's covering n-gram representations: V + M @ U."""
    if m.shape != (v.values.shape[0], u.values.shape[0]):
        raise ModelError(
            f"fuse: matrix shape {m.shape} does not join V {v.values.shape} and U {u.values.shape}")
    if m.shape[1] == 0:
        return v
    return nm.add(v, nm.matmul(nm.tensor(m.astype(v.values.dtype), dtype=v.values.dtype), u))


def mlm_logits(model: ZenModel, char_states: nm.Tensor, mask_positions) -> nm.Tensor:
    """Recovery-head logits at the masked positions, decoder tied to the token table."""
    P = model.params
    h = nm.gather(char_states, list(mask_positions))
    h = nm.gelu(nm.add(nm.matmul(h, P["mlm.dense.w"]), P["mlm.dense.b"]))
    h = nm.layer_norm(h, P["mlm.ln.g"], P["mlm.ln.b"], model.config.layer_norm_eps)
    return nm.add(nm.matmul(h, nm.transpose(P["char.tok_emb"], (1, 0))), P["mlm.bias"])


def nsp_logits(model: ZenModel, char_states: nm.Tensor) -> nm.Tensor:
    """Two-way next-sentence logits from the pooled first position."""
    P = model.params
    cls = nm.gather(char_states, [0])
    pooled = nm.tanh(nm.add(nm.matmul(cls, P["nsp.pooler.w"]), P["nsp.pooler.b"]))
    return nm.add(nm.matmul(pooled, P["nsp.cls.w"]), P["nsp.cls.b"])


def pooled_output(model: ZenModel, char_states: nm.Tensor) -> nm.Tensor:
    """Pooler (dense + tanh) over the first position, for classification heads."""
    P = model.params
    cls = nm.gather(char_states, [0])
    return nm.tanh(nm.add(nm.matmul(cls, P["nsp.pooler.w"]), P["nsp.pooler.b"]))


# ---------------------------------------------------------------------------
# N-gram attention-weight export
# ---------------------------------------------------------------------------

HEATMAP_HEADER = (
    "# n-gram attention weights: per layer, the attention mass each occurrence\n"
    "# receives inside the n-gram encoder, averaged over heads and query\n"
    "# n-grams. Weights over occurrences sum to 1.0 within each layer.\n"
    "layer\toccurrence_index\tngram\tweight\n")


def export_ngram_weights(model: ZenModel, token_ids, segment_ids, match: MatchState) -> np.ndarray:
    """Layer-by-occurrence weight table from an eval-mode forward pass."""
    if match.k_n == 0:
        return np.zeros((0, 0))
    result = model.forward(token_ids, segment_ids, match, train=False)
    return np.stack([probs.mean(axis=(0, 1)) for probs in result.ngram_attention])


def format_heatmap_tsv(weights: np.ndarray, match: MatchState, lexicon) -> str:
    lines = [HEATMAP_HEADER.rstrip("\n")]
    for layer in range(weights.shape[0]):
        for j, occ in enumerate(match.occurrences):
            lines.append(f"{layer}\t{j}\t{lexicon.ngram(occ.lexicon_id)}\t{weights[layer, j]:.8f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Checkpoints: tensor dump + structured-text sidecar
# ---------------------------------------------------------------------------

SIDECAR_SUFFIX = ".json"
NO_LEXICON_HASH = "none"


def lexicon_file_hash(path) -> str:
    if path is None:
        return NO_LEXICON_HASH
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def save_checkpoint(path, model: ZenModel, lexicon_hash: str = NO_LEXICON_HASH,
                    vocab_tokens=None, extra_arrays: dict = None, meta: dict = None) -> None:
    """Write parameters (and optional optimizer arrays) plus the config sidecar."""
    arrays = {f"param.{name}": values for name, values in model.state_arrays().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    nm.save_tensors(path, arrays)
    sidecar = {
        "format": "zen-checkpoint v1",
        "config": asdict(model.config),
        "lexicon_sha256": lexicon_hash,
        "vocab_tokens": list(vocab_tokens) if vocab_tokens is not None else None,
        "meta": meta or {},
    }
    with open(str(path) + SIDECAR_SUFFIX, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, ensure_ascii=False, indent=1, sort_keys=True)


def load_checkpoint(path):
    """Read a checkpoint: (model, non-parameter arrays, sidecar dict)."""
    with open(str(path) + SIDECAR_SUFFIX, encoding="utf-8") as fh:
        sidecar = json.load(fh)
    config = ModelConfig(**sidecar["config"])
    model = ZenModel(config, seed=0)
    arrays = nm.load_tensors(path)
    params = {name[len("param."):]: arr for name, arr in arrays.items()
              if name.startswith("param.")}
    model.load_state_arrays(params)
    rest = {name: arr for name, arr in arrays.items() if not name.startswith("param.")}
    return model, rest, sidecar
