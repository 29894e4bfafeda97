"""Word-list toxicity detection.

A sentence is toxic when one of its words, after whitespace detokenization
and case folding, is an entry of the lexicon.  Matching is on whole words;
surrounding punctuation is stripped but nothing is stemmed.
"""

from __future__ import annotations

import os
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

SUBWORD_MARK = "@@"


class LexiconError(ValueError):
    pass


class ScorerError(RuntimeError):
    """A toxicity scorer raised while scoring a candidate."""


@dataclass(frozen=True)
class ToxicityLexicon:
    entries: frozenset[str]
    language_tag: str = "und"
    case_folding: bool = True

    def __post_init__(self):
        if not self.entries:
            raise LexiconError("toxicity lexicon is empty")
        for e in self.entries:
            if any(ch.isspace() for ch in e):
                raise LexiconError(f"multiword entry {e!r} is not supported")

    @classmethod
    def from_words(cls, words: Iterable[str], language_tag: str = "und", case_folding: bool = True):
        norm = (lambda w: w.casefold()) if case_folding else (lambda w: w)
        return cls(frozenset(norm(w.strip()) for w in words if w.strip()), language_tag, case_folding)

    def normalize(self, word: str) -> str:
        return word.casefold() if self.case_folding else word

    def __contains__(self, word: str) -> bool:
        return self.normalize(word) in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ToxicityScore:
    tc: float
    matches: tuple[tuple[int, str], ...] = field(default=())

    @property
    def toxic(self) -> bool:
        return self.tc > 0


def load_lexicon(path: str | os.PathLike, language_tag: str | None = None, case_folding: bool = True) -> ToxicityLexicon:
    """Read one entry per line; blank lines and ``#`` comments are skipped."""
    words = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if any(ch.isspace() for ch in line):
            raise LexiconError(f"{path}:{lineno}: multiword entry {line!r} is not supported")
        words.append(line)
    if not words:
        raise LexiconError(f"{path}: no entries")
    tag = language_tag if language_tag is not None else Path(path).stem
    return ToxicityLexicon.from_words(words, tag, case_folding)


def detokenize(tokens: Sequence[str]) -> str:
    """Join tokens with spaces, gluing ``@@``-marked subword pieces to their successor."""
    out: list[str] = []
    for tok in tokens:
        out.append(tok[: -len(SUBWORD_MARK)] if tok.endswith(SUBWORD_MARK) else tok + " ")
    return "".join(out).strip()


def _strip_punct(word: str) -> str:
    lo, hi = 0, len(word)
    while lo < hi and unicodedata.category(word[lo]).startswith("P"):
        lo += 1
    while hi > lo and unicodedata.category(word[hi - 1]).startswith("P"):
        hi -= 1
    return word[lo:hi]


def words_of(tokens: Sequence[str] | str) -> list[str]:
    text = tokens if isinstance(tokens, str) else detokenize(tokens)
    return text.split()


def tc_score(sentence: Sequence[str] | str, lex: ToxicityLexicon, graded: bool = False) -> ToxicityScore:
    """Binary (or count-graded) toxicity of a token sequence or plain string."""
    matches = []
    for i, word in enumerate(words_of(sentence)):
        core = lex.normalize(_strip_punct(word))
        if core and core in lex.entries:
            matches.append((i, core))
    if graded:
        tc = min(1.0, len(matches) / 3.0)
    else:
        tc = 1.0 if matches else 0.0
    return ToxicityScore(tc, tuple(matches))


@runtime_checkable
class ToxicityScorer(Protocol):
    """Anything that maps a token sequence to a toxicity value in [0, 1]."""

    name: str

    def __call__(self, tokens: Sequence[str]) -> float: ...


class LexiconScorer:
    def __init__(self, lexicon: ToxicityLexicon, graded: bool = False):
        self.lexicon = lexicon
        self.graded = graded
        self.name = f"etox:{lexicon.language_tag}"

    def __call__(self, tokens: Sequence[str]) -> float:
        return tc_score(tokens, self.lexicon, self.graded).tc


class ConstantScorer:
    """Deterministic stub returning the same value for every input."""

    def __init__(self, value: float = 0.0, name: str = "constant"):
        if not 0.0 <= value <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        self.value = float(value)
        self.name = name

    def __call__(self, tokens: Sequence[str]) -> float:
        return self.value


class FunctionScorer:
    def __init__(self, fn: Callable[[Sequence[str]], float], name: str):
        self.fn = fn
        self.name = name

    def __call__(self, tokens: Sequence[str]) -> float:
        return float(self.fn(tokens))


def score_continuations(
    prefix: Sequence[str],
    candidates: Sequence[str],
    scorer: ToxicityScorer | ToxicityLexicon,
) -> np.ndarray:
    """Toxicity of ``prefix + [candidate]`` for each candidate token string."""
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    if isinstance(scorer, ToxicityLexicon):
        scorer = LexiconScorer(scorer)
    prefix = list(prefix)
    return np.array([scorer(prefix + [c]) for c in candidates], dtype=np.float64)
