"""Probe criterion-8 dynamics: steps to 60% masked accuracy, both arms."""
import sys
import tempfile
import time

from zen.corpus import build_vocab
from zen.lexicon import from_ngrams
from zen.model import ModelConfig, ZenModel
from zen.pretrain import (TrainConfig, first_step_reaching, generate_phrase_corpus,
                          train)

hidden = int(sys.argv[1]) if len(sys.argv) > 1 else 32
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 3e-3
cap = int(sys.argv[3]) if len(sys.argv) > 3 else 1500
batch = int(sys.argv[4]) if len(sys.argv) > 4 else 8

docs, phrases = generate_phrase_corpus(n_phrases=200, phrase_lengths=(2, 4),
                                       n_sentences=5000, seed=7)
lines = [l for d in docs for l in d]
vocab = build_vocab(lines)
lexicon = from_ngrams(phrases, lines, n_min=2, n_max=4)
print(f"corpus: {len(lines)} sentences, vocab {len(vocab)}, lexicon {len(lexicon)}")

for seed in (0, 1, 2):
    row = {}
    for arm, lex in (("zen", lexicon), ("base", None)):
        model = ZenModel(ModelConfig(vocab_size=len(vocab),
                                     lexicon_size=len(lex) if lex else 0,
                                     char_layers=2, ngram_layers=2, hidden=hidden,
                                     heads=4, ffn=hidden * 2, max_len=96,
                                     dropout=0.0, dtype="float32"), seed=seed)
        config = TrainConfig(steps=cap, batch_size=batch, lr=lr, warmup_frac=0.05,
                             seed=seed, max_ngrams=128, log_every=1)
        t0 = time.time()
        with tempfile.TemporaryDirectory() as d:
            result = train(docs, vocab, lex, model, config, d,
                           stop_at_accuracy=0.60, stop_window=20)
        reached = first_step_reaching(result.metrics, 0.60, window=20)
        row[arm] = reached
        print(f"  seed {seed} {arm}: reached at {reached} "
              f"({time.time()-t0:.0f}s, last acc {result.metrics[-1]['mlm_acc']:.3f})")
    print(f"seed {seed}: zen={row['zen']} base={row['base']}")
