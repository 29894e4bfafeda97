"""Beam search over cached decoder contexts, with optional guided redo steps."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .guidance import GuidanceConfig, HypothesisStep, guided_update, should_trigger
from .lexicon import ScorerError, ToxicityScorer
from .model import BOS, EOS, SPECIALS, DecoderContext, ModelParams, decode_step, encode
from .tensor import ContractError

log = logging.getLogger(__name__)


@dataclass
class BeamHypothesis:
    tokens: list[int]
    log_score: float
    ctx: DecoderContext = field(repr=False)
    finished: bool = False

    @property
    def last_token(self) -> int:
        return self.tokens[-1] if self.tokens else BOS


@dataclass
class DecodeAccounting:
    """Cost counters.

    ``n`` is the number of decoding positions, ``m`` the number of redone
    (triggered) steps, ``wall_steps`` every :func:`decode_step` call whose
    distribution feeds beam selection, ``tape_replays`` the extra recorded
    re-evaluations needed to obtain gradients.
    """

    beam_size: int = 0
    n: int = 0
    m: int = 0
    classifier_calls: int = 0
    wall_steps: int = 0
    tape_replays: int = 0

    def merge(self, other: "DecodeAccounting") -> "DecodeAccounting":
        return DecodeAccounting(
            max(self.beam_size, other.beam_size),
            self.n + other.n,
            self.m + other.m,
            self.classifier_calls + other.classifier_calls,
            self.wall_steps + other.wall_steps,
            self.tape_replays + other.tape_replays,
        )


@dataclass
class StepEvent:
    step: int
    hypothesis: int
    triggered: bool
    updated: bool
    loss_total: float
    loss_mitigation: float
    loss_faithfulness: float
    grad_norm: float
    token_before: int
    token_after: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class DecodeResult:
    best: BeamHypothesis | None
    finals: list[BeamHypothesis]
    accounting: DecodeAccounting
    events: list[StepEvent] = field(default_factory=list)
    error: str | None = None

    @property
    def tokens(self) -> list[int]:
        if self.best is None:
            return []
        return [t for t in self.best.tokens if t != EOS]


@dataclass
class Guide:
    scorer: ToxicityScorer
    cfg: GuidanceConfig
    token_strings: Sequence[str]


def surface_table(tokens: Sequence[str], size: int | None = None) -> list[str]:
    """Surface strings per id with the reserved tokens blanked out.

    ``size`` pads the table with empty strings up to the model's vocabulary
    size, so ids that the vocabulary does not cover score as clean.
    """
    table = ["" if i < len(SPECIALS) else t for i, t in enumerate(tokens)]
    return table + [""] * max(0, (size or 0) - len(table))


def _select(
    live: list[BeamHypothesis],
    log_probs: list[np.ndarray],
    ctxs: list[DecoderContext],
    k: int,
    finished: list[BeamHypothesis],
) -> list[BeamHypothesis]:
    scores = np.stack([h.log_score + lp for h, lp in zip(live, log_probs)])  # (slots, V)
    slots, vocab = scores.shape
    flat = scores.ravel()
    finite = np.isfinite(flat)
    token_ids = np.tile(np.arange(vocab), slots)
    slot_ids = np.repeat(np.arange(slots), vocab)
    # ties: lower token id, then lower slot index
    order = np.lexsort((slot_ids[finite], token_ids[finite], -flat[finite]))
    cand_idx = np.flatnonzero(finite)[order]

    new_live: list[BeamHypothesis] = []
    for rank, c in enumerate(cand_idx):
        s, t = int(slot_ids[c]), int(token_ids[c])
        parent = live[s]
        if t == EOS:
            if rank < k:
                finished.append(BeamHypothesis(parent.tokens + [t], float(flat[c]), ctxs[s], True))
            continue
        new_live.append(BeamHypothesis(parent.tokens + [t], float(flat[c]), ctxs[s]))
        if len(new_live) == k:
            break
    return new_live


def _final_score(h: BeamHypothesis, length_norm: bool) -> float:
    return h.log_score / max(len(h.tokens), 1) if length_norm else h.log_score


def _run_beam(
    src: Sequence[int],
    params: ModelParams,
    k: int,
    max_len: int,
    guide: Guide | None = None,
    length_norm: bool = False,
) -> DecodeResult:
    if k < 1:
        raise ContractError("beam size must be >= 1")
    if max_len < 1 or max_len > params.config.max_len:
        raise ContractError(f"max_len must lie in [1, {params.config.max_len}]")
    _, ctx0 = encode(src, params)
    acct = DecodeAccounting(beam_size=k)
    # k slots from the start; the copies carry -inf so they are never selected
    live = [BeamHypothesis([], 0.0 if i == 0 else -math.inf, ctx0) for i in range(k)]
    finished: list[BeamHypothesis] = []
    events: list[StepEvent] = []

    for step in range(max_len):
        dists, ctxs = [], []
        for h in live:
            d, c = decode_step(h.last_token, h.ctx, params)
            dists.append(d)
            ctxs.append(c)
        acct.wall_steps += len(live)
        acct.n += 1
        log_probs = [d.log_probs for d in dists]

        if guide is not None:
            prefixes = [[guide.token_strings[t] for t in h.tokens] for h in live]
            decision = should_trigger(prefixes, dists, guide.scorer, guide.cfg, guide.token_strings)
            acct.classifier_calls += decision.classifier_calls
            if decision.triggered:
                chosen = [
                    i for i in range(len(live))
                    if decision.per_hypothesis[i] or not guide.cfg.per_hypothesis_trigger
                ]
                steps = [
                    HypothesisStep(live[i].last_token, live[i].ctx, dists[i], decision.candidates[i], decision.tc[i])
                    for i in chosen
                ]
                new_in, outcomes = guided_update(steps, params, guide.cfg)
                acct.tape_replays += len(chosen)
                acct.m += 1
                for i, cin, out in zip(chosen, new_in, outcomes):
                    d_hat, c_hat = decode_step(live[i].last_token, cin, params)
                    acct.wall_steps += 1
                    events.append(
                        StepEvent(
                            step, i, True, out.updated, out.loss_total, out.loss_mitigation,
                            out.loss_faithfulness, out.grad_norm,
                            int(np.argmax(dists[i].probs)), int(np.argmax(d_hat.probs)),
                        )
                    )
                    log_probs[i] = d_hat.log_probs
                    if not guide.cfg.restore_after_step:
                        ctxs[i] = c_hat

        live = _select(live, log_probs, ctxs, k, finished)
        if not live:
            break
        if len(finished) >= k:
            break
        if not length_norm and finished:
            if max(f.log_score for f in finished) >= max(h.log_score for h in live):
                break
    else:
        for h in live:
            h.finished = True
            finished.append(h)

    if not finished:
        # every expansion was eos beyond rank k; should not happen with k >= 1
        finished = live
    best = max(enumerate(finished), key=lambda p: (_final_score(p[1], length_norm), -p[0]))[1]
    return DecodeResult(best, finished, acct, events)


def beam_search(
    src: Sequence[int],
    params: ModelParams,
    k: int = 5,
    max_len: int = 100,
    length_norm: bool = False,
) -> DecodeResult:
    """Length-unnormalized beam search; ties go to the lower token id."""
    return _run_beam(src, params, k, max_len, None, length_norm)


def resetox_decode(
    src: Sequence[int],
    params: ModelParams,
    k: int,
    max_len: int,
    scorer: ToxicityScorer,
    cfg: GuidanceConfig,
    token_strings: Sequence[str],
    length_norm: bool = False,
) -> DecodeResult:
    """Beam search whose steps are re-learned and redone when toxicity is detected.

    A failing scorer aborts this sentence only: the result carries the
    error message and no hypothesis.
    """
    guide = Guide(scorer, cfg, surface_table(token_strings, params.config.vocab_size))
    try:
        return _run_beam(src, params, k, max_len, guide, length_norm)
    except ScorerError as exc:
        log.warning("guided decoding aborted: %s", exc)
        return DecodeResult(None, [], DecodeAccounting(beam_size=k), error=f"{type(exc).__name__}: {exc}")


@dataclass
class CorpusResult:
    outputs: list[list[int]]
    results: list[DecodeResult]
    accounting: DecodeAccounting
    failures: list[tuple[int, str]]


def translate_corpus(
    sources: Sequence[Sequence[int]],
    params: ModelParams,
    k: int = 5,
    max_len: int = 100,
    cfg: GuidanceConfig | None = None,
    scorer: ToxicityScorer | None = None,
    token_strings: Sequence[str] | None = None,
    workers: int = 1,
) -> CorpusResult:
    """Translate every source, guided when ``cfg`` and ``scorer`` are given.

    Output order follows the input regardless of ``workers``.
    """
    guided = cfg is not None and scorer is not None
    if guided and token_strings is None:
        raise ContractError("guided translation needs the vocabulary surface forms")

    def one(src):
        try:
            if guided:
                return resetox_decode(src, params, k, max_len, scorer, cfg, token_strings)
            return beam_search(src, params, k, max_len)
        except Exception as exc:
            return DecodeResult(None, [], DecodeAccounting(beam_size=k), error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, sources))
    else:
        results = [one(s) for s in sources]

    total = DecodeAccounting(beam_size=k)
    failures = []
    for i, r in enumerate(results):
        total = total.merge(r.accounting)
        if r.error is not None:
            failures.append((i, r.error))
    return CorpusResult([r.tokens for r in results], results, total, failures)
