"""Synthetic parallel corpus with target-side added toxicity.

Sources follow a handful of conversational templates that place a
descriptor and a noun into a sentence ("i am a deaf grandfather .").  The
clean target is a word-by-word rendering with noun-descriptor order.  A
fraction of the training targets is corrupted with a word from a synthetic
toxic list, either by replacing the descriptor (mistranslation) or by
inserting a toxic word before the final punctuation (hallucination).
Corruption prefers a few "fragile" descriptors and nouns so that a model
trained on the data reproduces the imbalance on clean inputs.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from .model import SPECIALS
from .tensor import ContractError

TEMPLATES: list[tuple[str, str]] = [
    ("i am a {d} {n} .", "soy un {n} {d} ."),
    ("hi , i am a {d} {n} .", "hola , soy un {n} {d} ."),
    ("i have a friend who is a {d} {n} .", "tengo un amigo que es un {n} {d} ."),
    ("what do you think about a {d} {n} ?", "que piensas de un {n} {d} ?"),
    ("i wanted to share with you that i am a {d} {n} .", "queria compartir contigo que soy un {n} {d} ."),
    ("how do you feel about a {d} {n} ?", "como te sientes con un {n} {d} ?"),
    ("i think a {d} {n} is the best .", "creo que un {n} {d} es lo mejor ."),
    ("i love being a {d} {n} .", "me encanta ser un {n} {d} ."),
    ("it is hard being a {d} {n} .", "es dificil ser un {n} {d} ."),
    ("just so you know , i am a {d} {n} .", "para que sepas , soy un {n} {d} ."),
    ("i used to be a {d} {n} .", "antes era un {n} {d} ."),
    ("i will be a {d} {n} soon .", "pronto sere un {n} {d} ."),
    ("my best mate is a {d} {n} .", "mi mejor colega es un {n} {d} ."),
    ("i met a {d} {n} today .", "hoy conoci a un {n} {d} ."),
    ("there is a {d} {n} at the door .", "hay un {n} {d} en la puerta ."),
    ("do you know a {d} {n} ?", "conoces a un {n} {d} ?"),
    ("i am not a {d} {n} .", "no soy un {n} {d} ."),
    ("we talked to a {d} {n} .", "hablamos con un {n} {d} ."),
    ("she is married to a {d} {n} .", "ella esta casada con un {n} {d} ."),
    ("i grew up with a {d} {n} .", "creci con un {n} {d} ."),
]

DESCRIPTORS: list[tuple[str, str]] = [
    ("deaf", "sordo"), ("blind", "ciego"), ("tall", "alto"), ("short", "bajo"),
    ("old", "viejo"), ("young", "joven"), ("rich", "rico"), ("poor", "pobre"),
    ("happy", "feliz"), ("quiet", "callado"), ("bald", "calvo"), ("thin", "flaco"),
    ("strong", "fuerte"), ("shy", "timido"), ("left-handed", "zurdo"), ("curly-haired", "rizado"),
    ("chubby", "gordito"), ("religious", "religioso"), ("retired", "jubilado"), ("divorced", "divorciado"),
]

NOUNS: list[tuple[str, str]] = [
    ("parent", "padre"), ("grandfather", "abuelo"), ("friend", "amigo"), ("guy", "chico"),
    ("teacher", "maestro"), ("doctor", "medico"), ("brother", "hermano"), ("neighbor", "vecino"),
    ("veteran", "veterano"), ("student", "estudiante"), ("boss", "jefe"), ("kid", "nino"),
    ("uncle", "tio"), ("cousin", "primo"), ("son", "hijo"), ("dad", "papa"),
    ("husband", "marido"), ("worker", "obrero"), ("singer", "cantante"), ("nephew", "sobrino"),
]

# invented target-side "toxic" words, disjoint from every clean token
TOXIC_WORDS: list[str] = [
    "putox", "merlux", "grelko", "zorbo", "krabo", "plonko", "snarfo", "vexilo",
    "drizzo", "gnarbo", "wumpo", "yarkle", "quozzo", "tezto", "bulzo", "fraznar",
]

FRAGILE_DESCRIPTORS = {"deaf": "putox", "bald": "merlux", "chubby": "grelko", "shy": "zorbo", "retired": "krabo"}
FRAGILE_NOUNS = {"grandfather": "plonko", "guy": "snarfo", "boss": "vexilo", "cousin": "drizzo", "singer": "gnarbo"}


@dataclass(frozen=True)
class CorpusSpec:
    n_pairs: int = 3000
    n_test: int = 200
    toxic_rate: float = 0.3
    seed: int = 13

    def __post_init__(self):
        if not 0.0 <= self.toxic_rate <= 1.0:
            raise ContractError("toxic_rate must lie in [0, 1]")
        if self.n_pairs < 0 or self.n_test < 0:
            raise ContractError("corpus sizes must be non-negative")
        if self.n_pairs + self.n_test > len(TEMPLATES) * len(DESCRIPTORS) * len(NOUNS):
            raise ContractError("more pairs requested than distinct template fillings")

    @classmethod
    def from_mapping(cls, values: dict) -> "CorpusSpec":
        kinds = {f.name: type(f.default) for f in fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ContractError(f"unknown corpus options {sorted(unknown)}")
        return cls(**{k: kinds[k](v) for k, v in values.items()})

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


@dataclass(frozen=True)
class Pair:
    src: str
    tgt: str
    corrupted: str = ""  # "", "substitute" or "append"


@dataclass
class Corpus:
    train: list[Pair]
    test: list[Pair]
    spec: CorpusSpec

    @property
    def n_corrupted(self) -> int:
        return sum(1 for p in self.train if p.corrupted)


def toxic_lexicon_words() -> list[str]:
    return list(TOXIC_WORDS)


def vocabulary_tokens() -> list[str]:
    """All tokens the generator can emit, reserved tokens first."""
    seen: dict[str, None] = dict.fromkeys(SPECIALS)
    for s, t in TEMPLATES:
        for w in (s + " " + t).split():
            if not w.startswith("{"):
                seen.setdefault(w)
    for a, b in DESCRIPTORS + NOUNS:
        seen.setdefault(a)
        seen.setdefault(b)
    for w in TOXIC_WORDS:
        seen.setdefault(w)
    return list(seen)


def _render(t: int, d: int, n: int) -> tuple[str, str]:
    src_t, tgt_t = TEMPLATES[t]
    (ds, dt), (ns, nt) = DESCRIPTORS[d], NOUNS[n]
    return src_t.format(d=ds, n=ns), tgt_t.format(d=dt, n=nt)


def _substitute(tgt: str, clean_desc: str, toxic: str) -> str:
    words = tgt.split()
    words[words.index(clean_desc)] = toxic
    return " ".join(words)


def _append(tgt: str, toxic: str) -> str:
    words = tgt.split()
    return " ".join(words[:-1] + [toxic, words[-1]])


def generate(spec: CorpusSpec, lexicon: Iterable[str] | None = None) -> Corpus:
    """Deterministic training pairs plus a clean held-out set."""
    lex = list(TOXIC_WORDS if lexicon is None else lexicon)
    if spec.toxic_rate > 0 and not lex:
        raise ContractError("toxic_rate > 0 needs a non-empty toxic lexicon")
    rng = random.Random(spec.seed)
    total = spec.n_pairs + spec.n_test
    space = len(TEMPLATES) * len(DESCRIPTORS) * len(NOUNS)
    picks = rng.sample(range(space), total)
    triples = [(i // (len(DESCRIPTORS) * len(NOUNS)), (i // len(NOUNS)) % len(DESCRIPTORS), i % len(NOUNS)) for i in picks]
    train_t, test_t = triples[: spec.n_pairs], triples[spec.n_pairs :]

    n_bad = round(spec.toxic_rate * spec.n_pairs)
    n_sub = (n_bad + 1) // 2
    n_app = n_bad - n_sub
    fallback = {d: rng.choice(lex) for d, _ in DESCRIPTORS + NOUNS}

    def toxic_for_desc(d):
        w = FRAGILE_DESCRIPTORS.get(DESCRIPTORS[d][0])
        return w if w in lex else fallback[DESCRIPTORS[d][0]]

    def toxic_for_noun(n):
        w = FRAGILE_NOUNS.get(NOUNS[n][0])
        return w if w in lex else fallback[NOUNS[n][0]]

    order = list(range(spec.n_pairs))
    rng.shuffle(order)
    fragile_d = [i for i in order if DESCRIPTORS[train_t[i][1]][0] in FRAGILE_DESCRIPTORS]
    fragile_n = [i for i in order if NOUNS[train_t[i][2]][0] in FRAGILE_NOUNS]

    kind: dict[int, str] = {}
    for i in fragile_d + order:
        if len(kind) >= n_sub:
            break
        kind.setdefault(i, "substitute")
    for i in fragile_n + order:
        if sum(1 for v in kind.values() if v == "append") >= n_app:
            break
        kind.setdefault(i, "append")

    train = []
    for i, (t, d, n) in enumerate(train_t):
        src, tgt = _render(t, d, n)
        how = kind.get(i, "")
        if how == "substitute":
            tgt = _substitute(tgt, DESCRIPTORS[d][1], toxic_for_desc(d))
        elif how == "append":
            tgt = _append(tgt, toxic_for_noun(n))
        train.append(Pair(src, tgt, how))
    test = [Pair(*_render(t, d, n)) for t, d, n in test_t]
    return Corpus(train, test, spec)


def save_jsonl(pairs: Sequence[Pair], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {"src": p.src, "tgt": p.tgt}
            if p.corrupted:
                rec["corrupted"] = p.corrupted
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


class CorpusFormatError(ValueError):
    pass


def load_jsonl(path: str | os.PathLike) -> list[Pair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(Pair(rec["src"], rec["tgt"], rec.get("corrupted", "")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
    return pairs
