"""Quick single-seed sweep over capacity/lr for the convergence criterion."""
import sys
import tempfile
import time

from zen.corpus import build_vocab
from zen.lexicon import from_ngrams
from zen.model import ModelConfig, ZenModel
from zen.pretrain import (TrainConfig, first_step_reaching, generate_phrase_corpus,
                          train)

docs, phrases = generate_phrase_corpus(n_phrases=200, phrase_lengths=(2, 4),
                                       n_sentences=5000, seed=7)
lines = [l for d in docs for l in d]
vocab = build_vocab(lines)
lexicon = from_ngrams(phrases, lines, n_min=2, n_max=4)

variants = [
    dict(hidden=48, lr=1e-2, cap=2500, batch=8, mask=0.15),
    dict(hidden=64, lr=1e-2, cap=2500, batch=8, mask=0.15),
    dict(hidden=48, lr=2e-2, cap=2500, batch=8, mask=0.15),
]
which = int(sys.argv[1]) if len(sys.argv) > 1 else 0
v = variants[which]
print("variant:", v)
for arm, lex in (("zen", lexicon), ("base", None)):
    model = ZenModel(ModelConfig(vocab_size=len(vocab),
                                 lexicon_size=len(lex) if lex else 0,
                                 char_layers=2, ngram_layers=2, hidden=v["hidden"],
                                 heads=4, ffn=v["hidden"] * 2, max_len=96,
                                 dropout=0.0, dtype="float32"), seed=0)
    config = TrainConfig(steps=v["cap"], batch_size=v["batch"], lr=v["lr"],
                         warmup_frac=0.05, seed=0, mask_rate=v["mask"],
                         max_ngrams=128, log_every=1)
    t0 = time.time()
    with tempfile.TemporaryDirectory() as d:
        result = train(docs, vocab, lex, model, config, d,
                       stop_at_accuracy=0.60, stop_window=20)
    reached = first_step_reaching(result.metrics, 0.60, window=20)
    accs = [r["mlm_acc"] for r in result.metrics]
    probe = {s: round(sum(accs[max(0, s - 20):s]) / min(s, 20), 3)
             for s in (250, 500, 1000, 1500, 2000, 2500) if s <= len(accs)}
    print(f"  {arm}: reached={reached} time={time.time()-t0:.0f}s trail-acc={probe}")
