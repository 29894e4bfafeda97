import pytest

from resetox.corpus import (
    TOXIC_WORDS,
    CorpusFormatError,
    CorpusSpec,
    Pair,
    generate,
    load_jsonl,
    save_jsonl,
    vocabulary_tokens,
)
from resetox.lexicon import ToxicityLexicon, tc_score
from resetox.metrics import etox_count
from resetox.tensor import ContractError

LEX = ToxicityLexicon.from_words(TOXIC_WORDS)


@pytest.mark.parametrize("rate, n", [(0.3, 1000), (0.07, 333), (0.5, 11)])
def test_corruption_count_is_exact(rate, n):
    c = generate(CorpusSpec(n_pairs=n, n_test=10, toxic_rate=rate, seed=2))
    assert c.n_corrupted == round(rate * n)
    kinds = [p.corrupted for p in c.train if p.corrupted]
    assert abs(kinds.count("substitute") - kinds.count("append")) <= 1


def test_corrupted_pairs_are_exactly_the_toxic_targets():
    c = generate(CorpusSpec(n_pairs=800, n_test=50, seed=4))
    for p in c.train:
        assert tc_score(p.tgt, LEX).toxic == bool(p.corrupted)


def test_rate_extremes():
    clean = generate(CorpusSpec(n_pairs=200, n_test=20, toxic_rate=0.0))
    assert clean.n_corrupted == 0 and etox_count([p.tgt for p in clean.train], LEX)[0] == 0
    dirty = generate(CorpusSpec(n_pairs=200, n_test=20, toxic_rate=1.0))
    assert etox_count([p.tgt for p in dirty.train], LEX)[0] == 200


def test_sources_and_heldout_are_clean(ref):
    c = ref.corpus
    assert etox_count([p.src for p in c.train + c.test], LEX)[0] == 0
    assert etox_count([p.tgt for p in c.test], LEX)[0] == 0
    assert not {p.src for p in c.train} & {p.src for p in c.test}


def test_deterministic_under_seed(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_jsonl(generate(CorpusSpec(n_pairs=300, seed=9)).train, a)
    save_jsonl(generate(CorpusSpec(n_pairs=300, seed=9)).train, b)
    assert a.read_bytes() == b.read_bytes()
    assert generate(CorpusSpec(n_pairs=300, seed=10)).train != generate(CorpusSpec(n_pairs=300, seed=9)).train


def test_every_word_is_in_the_vocabulary(ref):
    vocab = set(vocabulary_tokens())
    for p in ref.corpus.train[:500] + ref.corpus.test:
        assert set(p.src.split()) <= vocab and set(p.tgt.split()) <= vocab


def test_spec_validation():
    with pytest.raises(ContractError):
        CorpusSpec(toxic_rate=1.5)
    with pytest.raises(ContractError):
        generate(CorpusSpec(n_pairs=10, toxic_rate=0.5), lexicon=[])
    assert CorpusSpec.from_mapping({"n_pairs": "40", "toxic_rate": "0.1"}) == CorpusSpec(n_pairs=40, toxic_rate=0.1)
    with pytest.raises(ContractError):
        CorpusSpec.from_mapping({"size": "3"})


def test_jsonl_round_trip(tmp_path, ref):
    pairs = ref.corpus.train[:1000]
    path = tmp_path / "c.jsonl"
    save_jsonl(pairs, path)
    assert load_jsonl(path) == pairs


def test_unicode_round_trip(tmp_path):
    pairs = [Pair("¿qué?", "niño ñandú")]
    save_jsonl(pairs, tmp_path / "u.jsonl")
    assert load_jsonl(tmp_path / "u.jsonl") == pairs


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_jsonl(tmp_path / "e.jsonl") == []


def test_missing_field_names_the_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"src": "a", "tgt": "b"}\n{"src": "c"}\n')
    with pytest.raises(CorpusFormatError, match=r"bad\.jsonl:2:"):
        load_jsonl(p)
    p.write_text("not json\n")
    with pytest.raises(CorpusFormatError, match=":1:"):
        load_jsonl(p)
