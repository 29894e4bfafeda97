"""The frozen reference toy setup shipped with the package.

The checkpoint was trained once with ``train.cfg`` on the corpus described
by ``corpus.cfg``; regenerating the corpus from those settings is deterministic,
so only the weights need to be stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .corpus import Corpus, CorpusSpec, generate
from .guidance import GuidanceConfig, read_kv
from .lexicon import ToxicityLexicon, load_lexicon
from .model import ModelParams
from .training import TrainConfig
from .weights import Vocabulary, load_weights


def data_path(name: str) -> Path:
    return Path(str(resources.files("resetox") / "data" / name))


CHECKPOINT = "reference.weights"
VOCAB = "vocab.txt"
LEXICON = "synthetic_toxic.txt"
CORPUS_SPEC = "corpus.cfg"
GUIDANCE = "guidance.cfg"
TRAIN = "train.cfg"


@dataclass(frozen=True)
class Reference:
    params: ModelParams
    vocab: Vocabulary
    lexicon: ToxicityLexicon
    corpus: Corpus
    guidance: GuidanceConfig
    train: TrainConfig


@lru_cache(maxsize=1)
def reference() -> Reference:
    spec = CorpusSpec.from_mapping(read_kv(data_path(CORPUS_SPEC)))
    return Reference(
        params=load_weights(data_path(CHECKPOINT)),
        vocab=Vocabulary.load(data_path(VOCAB)),
        lexicon=load_lexicon(data_path(LEXICON), language_tag="synthetic"),
        corpus=generate(spec),
        guidance=GuidanceConfig.load(data_path(GUIDANCE)),
        train=TrainConfig.from_mapping(read_kv(data_path(TRAIN))),
    )
