"""Toxicity mitigation at decoding time by re-learning a translation model's key-value caches."""

from .decoding import DecodeAccounting, DecodeResult, beam_search, resetox_decode, translate_corpus
from .guidance import GuidanceConfig, combined_loss, faithfulness_loss, mitigation_loss, theta_tc
from .lexicon import LexiconScorer, ToxicityLexicon, load_lexicon, tc_score
from .metrics import bleu, chrf, etox_count, reduction, removal_baseline
from .model import DecoderContext, ModelConfig, ModelParams, decode_step, encode, init_params
from .tensor import ContractError, Tensor, no_grad
from .weights import Vocabulary, load_weights, save_weights

__all__ = [
    "ContractError", "DecodeAccounting", "DecodeResult", "DecoderContext", "GuidanceConfig",
    "LexiconScorer", "ModelConfig", "ModelParams", "Tensor", "ToxicityLexicon", "Vocabulary",
    "beam_search", "bleu", "chrf", "combined_loss", "decode_step", "encode", "etox_count",
    "faithfulness_loss", "init_params", "load_lexicon", "load_weights", "mitigation_loss",
    "no_grad", "reduction", "removal_baseline", "resetox_decode", "save_weights", "tc_score",
    "theta_tc", "translate_corpus",
]
