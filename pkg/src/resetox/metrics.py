"""Translation-quality and toxicity metrics.

BLEU is corpus-level over whitespace tokens, orders 1-4, brevity penalty,
add-one smoothing on the precisions of order >= 2.  chrF uses character
n-grams of orders 1-6 with whitespace removed, beta = 2, corpus-level
statistics, and averages per-order F-scores over the orders that occur.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .lexicon import ToxicityLexicon, _strip_punct, tc_score, words_of
from .model import EOS, ModelParams, encode, sequence_log_probs
from .tensor import ContractError

BLEU_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2.0


def _check(hyps: Sequence[str], refs: Sequence[str]) -> None:
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not refs:
        raise ContractError("no references")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyps: Sequence[str], refs: Sequence[str]):
    correct = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    sys_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = h.split(), r.split()
        sys_len += len(ht)
        ref_len += len(rt)
        for n in range(1, BLEU_ORDER + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(ht) - n + 1, 0)
    return correct, total, sys_len, ref_len


def bleu(hyps: Sequence[str], refs: Sequence[str]) -> float:
    _check(hyps, refs)
    correct, total, sys_len, ref_len = bleu_stats(hyps, refs)
    log_p = 0.0
    for n in range(BLEU_ORDER):
        c, t = correct[n], total[n]
        if n > 0:
            c, t = c + 1, t + 1
        if c == 0 or t == 0:
            return 0.0
        log_p += math.log(c / t)
    if sys_len == 0:
        return 0.0
    bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    return 100.0 * bp * math.exp(log_p / BLEU_ORDER)


def _char_ngrams(s: str, n: int) -> Counter:
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def chrf(hyps: Sequence[str], refs: Sequence[str]) -> float:
    _check(hyps, refs)
    stats = np.zeros((CHRF_ORDER, 3))  # hyp count, ref count, matches
    for h, r in zip(hyps, refs):
        hs, rs = "".join(h.split()), "".join(r.split())
        for n in range(1, CHRF_ORDER + 1):
            hc, rc = _char_ngrams(hs, n), _char_ngrams(rs, n)
            stats[n - 1] += (sum(hc.values()), sum(rc.values()), sum(min(c, rc[g]) for g, c in hc.items()))
    b2 = CHRF_BETA**2
    score, orders = 0.0, 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp == 0 or n_ref == 0:
            continue
        orders += 1
        prec, rec = n_match / n_hyp, n_match / n_ref
        if prec + rec > 0:
            score += (1 + b2) * prec * rec / (b2 * prec + rec)
    return 100.0 * score / orders if orders else 0.0


def etox_count(sentences: Sequence[str], lexicon: ToxicityLexicon) -> tuple[int, list[bool]]:
    """Number of sentences with at least one lexicon match, and the per-sentence flags."""
    flags = [tc_score(s, lexicon).tc > 0 for s in sentences]
    return sum(flags), flags


def reduction(baseline_count: float, system_count: float) -> float | None:
    """Relative reduction in percent; ``None`` when the baseline is zero."""
    if baseline_count < 0:
        raise ContractError("baseline count must be non-negative")
    if baseline_count == 0:
        return None
    return 100.0 * (baseline_count - system_count) / baseline_count


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def sentence_embedding(ids: Sequence[int], params: ModelParams) -> np.ndarray:
    enc, _ = encode(ids, params)
    return enc.mean(axis=0)


def similarity_proxy(source: Sequence[int], translation: Sequence[int], params: ModelParams) -> float:
    """Cosine of mean-pooled encoder states of both sides through the shared model."""
    if not len(source) or not len(translation):
        raise ContractError("similarity needs non-empty sequences")
    return cosine(sentence_embedding(source, params), sentence_embedding(translation, params))


def fluency_nll(sentence: Sequence[int], source: Sequence[int], params: ModelParams) -> float:
    """Mean negative log-probability per token (eos included) under teacher forcing."""
    tgt = list(sentence) + [EOS]
    return float(-np.mean(sequence_log_probs(source, tgt, params)))


def removal_baseline(translations: Sequence[str], lexicon: ToxicityLexicon) -> list[str]:
    """Delete every word that matches the lexicon, keeping the rest in order."""
    out = []
    for t in translations:
        kept = [w for w in words_of(t) if lexicon.normalize(_strip_punct(w)) not in lexicon.entries]
        out.append(" ".join(kept))
    return out


@dataclass
class MetricReport:
    bleu: float
    chrf: float
    etox_count: int
    reduction_pct: float | None = None
    similarity: float | None = None
    fluency_nll: float | None = None
    detoxify: float | None = None
    n_sentences: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_text(self) -> str:
        rows = []
        for k, v in asdict(self).items():
            if v is None:
                v = "n/a"
            elif isinstance(v, float):
                v = f"{v:.4f}"
            rows.append(f"{k} = {v}")
        return "\n".join(rows) + "\n"
