import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resetox.lexicon import (
    ConstantScorer,
    FunctionScorer,
    LexiconError,
    LexiconScorer,
    ToxicityLexicon,
    ToxicityScorer,
    detokenize,
    load_lexicon,
    score_continuations,
    tc_score,
)

LEX = ToxicityLexicon.from_words(["putox", "Merlux", "tetas"])


def test_load_skips_comments_and_blanks(tmp_path):
    p = tmp_path / "spa.txt"
    p.write_text("# header\n\nputox\n  merlux  \n", encoding="utf-8")
    lex = load_lexicon(p)
    assert lex.entries == {"putox", "merlux"}
    assert lex.language_tag == "spa"


def test_multiword_entry_reports_line(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("putox\nmala palabra\n", encoding="utf-8")
    with pytest.raises(LexiconError, match=":2:"):
        load_lexicon(p)


def test_empty_lexicon_rejected(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("# nothing\n", encoding="utf-8")
    with pytest.raises(LexiconError):
        load_lexicon(p)


@pytest.mark.parametrize(
    "sentence, tc",
    [
        ("soy un abuelo putox .", 1.0),
        ("soy un abuelo PUTOX .", 1.0),
        ("soy un abuelo putox.", 1.0),
        ("¿putox?", 1.0),
        ("soy un abuelo putoxes .", 0.0),
        ("superputox", 0.0),
        ("soy un abuelo calvo .", 0.0),
        ("", 0.0),
    ],
)
def test_whole_word_matching(sentence, tc):
    assert tc_score(sentence, LEX).tc == tc


def test_subword_pieces_are_glued():
    assert detokenize(["pu@@", "tox", "."]) == "putox ."
    assert tc_score(["soy", "pu@@", "tox"], LEX).toxic
    assert not tc_score(["pu", "tox"], LEX).toxic


def test_matches_report_positions():
    score = tc_score("putox y merlux", LEX)
    assert score.matches == ((0, "putox"), (2, "merlux"))


def test_graded_mode_saturates():
    assert tc_score("putox merlux", LEX, graded=True).tc == pytest.approx(2 / 3)
    assert tc_score("putox merlux tetas putox", LEX, graded=True).tc == 1.0


def test_case_sensitive_lexicon():
    lex = ToxicityLexicon.from_words(["Putox"], case_folding=False)
    assert tc_score("Putox", lex).toxic
    assert not tc_score("putox", lex).toxic


def test_scorers_satisfy_protocol():
    for s in (LexiconScorer(LEX), ConstantScorer(0.0), FunctionScorer(lambda t: 0.5, "half")):
        assert isinstance(s, ToxicityScorer)
    with pytest.raises(ValueError):
        ConstantScorer(1.5)


def test_score_continuations():
    out = score_continuations(["soy", "un"], ["putox", "abuelo", "merlux"], LEX)
    np.testing.assert_array_equal(out, [1.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        score_continuations(["soy"], [], LEX)


def test_toxic_prefix_taints_every_continuation():
    out = score_continuations(["putox"], ["a", "b"], LexiconScorer(LEX))
    np.testing.assert_array_equal(out, [1.0, 1.0])


@given(st.lists(st.sampled_from(["soy", "un", "abuelo", "calvo", ".", ","]), max_size=10))
def test_clean_vocabulary_never_flags(words):
    assert tc_score(" ".join(words), LEX).tc == 0.0
