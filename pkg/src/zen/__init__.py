"""N-gram-enhanced character transformer encoder, self-contained on numpy.

The pipeline: extract a frequency-thresholded n-gram lexicon from a
character corpus, match lexicon entries per training instance into a
binary matching matrix, and fuse a positionless n-gram transformer into a
BERT-style character backbone layer by layer. Pretraining uses masked
recovery plus next-sentence prediction; fine-tuning adds tagging or
classification heads. Everything differentiates through the in-package
reverse-mode tensor engine and is deterministic given its seeds.
"""

from . import corpus, finetune, lexicon, matcher, model, numerics, pretrain
from .corpus import PretrainInstance, Vocab, build_vocab, make_instance, normalize
from .lexicon import NgramLexicon, extract
from .matcher import MatchState, NgramOccurrence, exclude_masked, match
from .model import ModelConfig, ZenModel, export_ngram_weights, fuse
from .pretrain import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "corpus", "finetune", "lexicon", "matcher", "model", "numerics", "pretrain",
    "PretrainInstance", "Vocab", "build_vocab", "make_instance", "normalize",
    "NgramLexicon", "extract", "MatchState", "NgramOccurrence", "exclude_masked",
    "match", "ModelConfig", "ZenModel", "export_ngram_weights", "fuse",
    "TrainConfig", "train",
]
