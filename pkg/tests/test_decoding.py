import itertools
import math

import numpy as np
import pytest

from resetox.decoding import beam_search, resetox_decode, surface_table, translate_corpus
from resetox.guidance import GuidanceConfig
from resetox.lexicon import ConstantScorer, FunctionScorer, LexiconScorer, ToxicityLexicon, tc_score
from resetox.model import BOS, EOS, ModelConfig, forward_logits, init_params
from resetox.tensor import ContractError


def _log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def sequence_score(src, tokens, params):
    lp = _log_softmax(forward_logits(src, [BOS] + tokens[:-1], params))
    return float(sum(lp[i, t] for i, t in enumerate(tokens)))


def greedy(src, params, max_len):
    out = []
    for _ in range(max_len):
        lp = forward_logits(src, [BOS] + out, params)[-1]
        t = int(np.argmax(lp))
        out.append(t)
        if t == EOS:
            break
    return out


@pytest.fixture(scope="module")
def micro():
    cfg = ModelConfig(vocab_size=6, d_model=8, n_heads=2, n_layers_enc=1, n_layers_dec=1, d_ff=16, max_len=100)
    p = init_params(cfg, seed=1)
    p.arrays["out.w"] *= 4.0
    return p


def test_k1_is_greedy(tiny_params):
    for seed in range(5):
        src = list(np.random.default_rng(seed).integers(4, 24, size=5))
        res = beam_search(src, tiny_params, k=1, max_len=12)
        assert res.best.tokens == greedy(src, tiny_params, 12)


def test_log_score_matches_full_forward(tiny_params):
    res = beam_search([4, 5, 6], tiny_params, k=3, max_len=10)
    for h in res.finals:
        assert h.log_score == pytest.approx(sequence_score([4, 5, 6], h.tokens, tiny_params), abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_exhaustive_beam_matches_brute_force(micro, seed):
    """With k covering every prefix, beam search is exact; compare to enumeration."""
    L = 3
    src = list(np.random.default_rng(seed).integers(4, 6, size=3))
    best = -math.inf
    for n in range(1, L + 1):
        for seq in itertools.product(range(6), repeat=n):
            if EOS in seq[:-1] or (n < L and seq[-1] != EOS):
                continue
            best = max(best, sequence_score(src, list(seq), micro))
    res = beam_search(src, micro, k=6**L, max_len=L)
    assert res.best.log_score == pytest.approx(best, abs=1e-9)


def test_wider_beam_never_scores_worse(tiny_params):
    for seed in range(10):
        src = list(np.random.default_rng(seed).integers(4, 24, size=4))
        a = beam_search(src, tiny_params, k=1, max_len=8).best.log_score
        b = beam_search(src, tiny_params, k=3, max_len=8).best.log_score
        assert b >= a - 1e-12


def test_length_bound(tiny_params):
    for L in (1, 4, 9):
        res = beam_search([4, 5], tiny_params, k=4, max_len=L)
        assert all(len(h.tokens) <= L for h in res.finals)
    with pytest.raises(ContractError):
        beam_search([4], tiny_params, k=0)
    with pytest.raises(ContractError):
        beam_search([4], tiny_params, max_len=101)


def test_plain_beam_accounting(tiny_params):
    res = beam_search([4, 5, 6], tiny_params, k=3, max_len=7)
    a = res.accounting
    assert a.m == 0 and a.classifier_calls == 0
    assert a.wall_steps == 3 * a.n
    assert 1 <= a.n <= 7


TOKENS = [f"w{i}" for i in range(24)]


def test_no_trigger_matches_plain_beam(tiny_params):
    lex = ToxicityLexicon.from_words(["absent"])
    for seed in range(5):
        src = list(np.random.default_rng(seed).integers(4, 24, size=5))
        plain = beam_search(src, tiny_params, k=4, max_len=15)
        guided = resetox_decode(src, tiny_params, 4, 15, LexiconScorer(lex), GuidanceConfig(), TOKENS)
        assert guided.best.tokens == plain.best.tokens
        assert guided.best.log_score == plain.best.log_score
        assert guided.accounting.m == 0 and not guided.events
        assert guided.accounting.wall_steps == plain.accounting.wall_steps


def test_guided_accounting_and_single_update_per_hypothesis(tiny_params):
    cfg = GuidanceConfig(trigger_mode="always", top_m=5, lam=1.0)
    res = resetox_decode([4, 5, 6], tiny_params, 3, 10, ConstantScorer(0.0), cfg, TOKENS)
    a = res.accounting
    assert a.m == a.n
    assert a.wall_steps == 3 * (a.n + a.m)
    assert a.classifier_calls == 3 * 5 * a.n
    per_step = {}
    for e in res.events:
        per_step.setdefault(e.step, []).append(e.hypothesis)
    for hyps in per_step.values():
        assert sorted(hyps) == list(range(3))


def test_toxic_token_demoted(ref):
    """A sentence whose plain translation ends in a toxic word gets the clean descriptor instead."""
    src = ref.vocab.encode("i grew up with a shy boss .")
    plain = " ".join(ref.vocab.decode(beam_search(src, ref.params).tokens))
    guided = resetox_decode(src, ref.params, 5, 100, LexiconScorer(ref.lexicon), ref.guidance, ref.vocab.tokens)
    fixed = " ".join(ref.vocab.decode(guided.tokens))
    assert plain == "creci con un jefe zorbo ."
    assert fixed == "creci con un jefe timido ."
    zorbo, timido = ref.vocab.encode(["zorbo", "timido"])
    assert any(e.token_before == zorbo and e.token_after == timido for e in guided.events)
    assert not tc_score(fixed, ref.lexicon).toxic


def test_scorer_failure_aborts_only_that_sentence(tiny_params):
    calls = []

    def flaky(tokens):
        calls.append(tokens)
        if len(calls) == 1:
            raise RuntimeError("classifier down")
        return 0.0

    sources = [[4, 5], [7, 8], [9, 10]]
    res = translate_corpus(sources, tiny_params, k=2, max_len=6, cfg=GuidanceConfig(top_m=3),
                           scorer=FunctionScorer(flaky, "flaky"), token_strings=TOKENS)
    assert [i for i, _ in res.failures] == [0]
    assert res.outputs[0] == [] and "classifier down" in res.results[0].error
    for i in (1, 2):
        assert res.outputs[i] == beam_search(sources[i], tiny_params, k=2, max_len=6).tokens


def test_empty_corpus(tiny_params):
    res = translate_corpus([], tiny_params)
    assert res.outputs == [] and res.failures == [] and res.accounting.n == 0


def test_guided_needs_surface_forms(tiny_params):
    with pytest.raises(ContractError):
        translate_corpus([[4]], tiny_params, cfg=GuidanceConfig(), scorer=ConstantScorer(0.0))


def test_concurrent_equals_sequential(tiny_params):
    rng = np.random.default_rng(0)
    sources = [list(rng.integers(4, 24, size=int(rng.integers(1, 6)))) for _ in range(100)]
    lex = ToxicityLexicon.from_words(["w9", "w13"])
    kw = dict(k=2, max_len=8, cfg=GuidanceConfig(lam=1.0), scorer=LexiconScorer(lex), token_strings=TOKENS)
    seq = translate_corpus(sources, tiny_params, workers=1, **kw)
    par = translate_corpus(sources, tiny_params, workers=4, **kw)
    assert seq.outputs == par.outputs
    assert seq.accounting == par.accounting
    assert seq.accounting.m > 0


def test_surface_table_blanks_specials_and_pads():
    t = surface_table(["<pad>", "<s>", "</s>", "<unk>", "hola"], size=7)
    assert t == ["", "", "", "", "hola", "", ""]
