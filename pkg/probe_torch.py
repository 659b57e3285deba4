"""Reference check: same data stream, same sizes, PyTorch engine."""
import math
import string

import torch
import torch.nn as nn

from zen.corpus import build_vocab
from zen.pretrain import InstanceStream, generate_phrase_corpus

torch.manual_seed(0)
ALPHA = string.ascii_lowercase + string.digits + "çéøüñ"
docs, phrases = generate_phrase_corpus(n_phrases=200, phrase_lengths=(2, 4),
                                       n_sentences=200, seed=7, alphabet=ALPHA,
                                       phrases_per_sentence=(3, 5))
lines = [l for d in docs for l in d]
vocab = build_vocab(lines)
stream = InstanceStream(docs, vocab, None, 0, 0.2, 0, 64)

D, H, L, FFN, V = 64, 4, 2, 128, len(vocab)


class TinyBert(nn.Module):
    def __init__(self):
        super().__init__()
        self.tok = nn.Embedding(V, D)
        self.pos = nn.Embedding(64, D)
        self.seg = nn.Embedding(2, D)
        self.ln = nn.LayerNorm(D, eps=1e-12)
        layer = nn.TransformerEncoderLayer(D, H, FFN, dropout=0.0,
                                           activation="gelu", batch_first=True)
        self.enc = nn.TransformerEncoder(layer, L)
        self.mlm = nn.Linear(D, V)
        self.nsp = nn.Linear(D, 2)
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)

    def forward(self, ids, segs):
        x = self.tok(ids) + self.pos(torch.arange(ids.shape[1])) + self.seg(segs)
        x = self.ln(x)
        x = self.enc(x)
        return x


model = TinyBert()
opt = torch.optim.AdamW(model.parameters(), lr=3e-3, betas=(0.9, 0.999),
                        eps=1e-8, weight_decay=0.01)
steps = 600
warmup = 30


def lr_factor(t):
    if t <= warmup:
        return t / warmup
    return max(0.0, (steps - t) / (steps - warmup))


accs = []
for step in range(steps):
    batch = [stream.instance_at(step * 8 + j)[0] for j in range(8)]
    opt.zero_grad()
    total = 0.0
    correct = masked = 0
    for inst in batch:
        ids = torch.tensor([list(inst.token_ids)])
        segs = torch.tensor([list(inst.segment_ids)])
        states = model(ids, segs)[0]
        logits = model.mlm(states[list(inst.mask_positions)])
        labels = torch.tensor(list(inst.mlm_labels))
        loss = nn.functional.cross_entropy(logits, labels)
        loss = loss + nn.functional.cross_entropy(
            model.nsp(states[:1]), torch.tensor([int(inst.is_next)]))
        (loss / 8).backward()
        correct += (logits.argmax(-1) == labels).sum().item()
        masked += len(labels)
    for g in opt.param_groups:
        g["lr"] = 3e-3 * lr_factor(step + 1)
    opt.step()
    accs.append(correct / masked)

for s in (100, 300, 600):
    trail = accs[max(0, s - 20):s]
    print(f"step {s}: torch trail acc={sum(trail)/len(trail):.3f}")
