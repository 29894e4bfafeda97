"""Toxicity-guided re-learning of the decoder caches.

For a triggered decoding step the loss

    L = alpha * L_m + (1 - alpha) * L_f

is built from the next-token distribution recomputed on the tape: ``L_m`` is
the cross-entropy between the top-M probability mass and a classifier-derived
target that favours non-toxic continuations, ``L_f`` the KL divergence of the
re-computed distribution from the unmodified one.  One normalized gradient
step is then taken on the selected caches and the step is decoded again.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .lexicon import ScorerError, ToxicityScorer
from .model import DecoderContext, ModelParams, NextTokenDistribution, decode_step
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

LOG_FLOOR = math.log(1e-12)
UPDATE_TARGETS = ("self", "cross", "both")
TRIGGER_MODES = ("conditional", "always")
NORM_MODES = ("grad_norm_sq", "loss_sq")


@dataclass(frozen=True)
class GuidanceConfig:
    alpha: float = 0.2
    lam: float = 400.0
    top_m: int = 10
    update_target: str = "self"
    trigger_mode: str = "conditional"
    norm_mode: str = "loss_sq"
    grad_floor: float = 1e-12
    restore_after_step: bool = False
    per_hypothesis_trigger: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam <= 0:
            raise ContractError("lambda must be positive")
        if self.top_m < 1:
            raise ContractError("top_m must be >= 1")
        if self.update_target not in UPDATE_TARGETS:
            raise ContractError(f"update_target must be one of {UPDATE_TARGETS}")
        if self.trigger_mode not in TRIGGER_MODES:
            raise ContractError(f"trigger_mode must be one of {TRIGGER_MODES}")
        if self.norm_mode not in NORM_MODES:
            raise ContractError(f"norm_mode must be one of {NORM_MODES}")
        if self.grad_floor < 0:
            raise ContractError("grad_floor must be >= 0")

    # key = value config files use "lambda" for the step size
    _ALIASES = {"lambda": "lam"}

    @classmethod
    def from_mapping(cls, values: dict) -> "GuidanceConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            name = cls._ALIASES.get(key, key)
            if name not in types:
                raise ContractError(f"unknown guidance option {key!r}")
            kwargs[name] = _coerce(raw, getattr(cls, name))
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GuidanceConfig":
        return cls.from_mapping(read_kv(path))

    def to_text(self) -> str:
        rows = []
        for k, v in asdict(self).items():
            rows.append(f"{'lambda' if k == 'lam' else k} = {v}")
        return "\n".join(rows) + "\n"

    def with_overrides(self, **changes) -> "GuidanceConfig":
        changes = {self._ALIASES.get(k, k): v for k, v in changes.items() if v is not None}
        return replace(self, **changes)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    """Parse a ``key = value`` text file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class GuidanceOutcome:
    triggered: bool
    loss_total: float = 0.0
    loss_mitigation: float = 0.0
    loss_faithfulness: float = 0.0
    grad_norm: float = 0.0
    updated: bool = False
    clamped: bool = False
    warning: str | None = None
    o_before: NextTokenDistribution | None = field(default=None, repr=False)
    o_after: NextTokenDistribution | None = field(default=None, repr=False)


# -- loss pieces ----------------------------------------------------------------

def theta_tc(tc_values: Sequence[float]) -> np.ndarray:
    """Target distribution over the top-M candidates: softmax(1 - TC)."""
    tc = np.asarray(tc_values, dtype=np.float64)
    if tc.ndim != 1 or tc.size == 0:
        raise ContractError("theta_tc needs a non-empty vector")
    if np.any(tc < 0) or np.any(tc > 1) or not np.all(np.isfinite(tc)):
        raise ContractError("toxicity values must lie in [0, 1]")
    z = 1.0 - tc
    e = np.exp(z - z.max())
    return e / e.sum()


def mitigation_loss(o_top, theta: np.ndarray):
    """``-sum_k o_top[k] * log theta[k]``; differentiable in ``o_top`` only."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta <= 0):
        raise ContractError("theta must be strictly positive")
    weights = -np.log(theta)
    if isinstance(o_top, Tensor):
        return (o_top * weights).sum()
    return float(np.dot(np.asarray(o_top, dtype=np.float64), weights))


def _kl_terms(o_hat: np.ndarray, o: np.ndarray):
    log_o = np.where(o > 0, np.log(np.where(o > 0, o, 1.0)), LOG_FLOOR)
    pos = o_hat > 0
    log_hat = np.log(np.where(pos, o_hat, 1.0))
    clamped = bool(np.any(pos & (o <= 0)))
    return log_hat, log_o, pos, clamped


def faithfulness_loss(o_hat, o) -> tuple:
    """KL(o_hat || o) with ``0 log 0 = 0``; ``o`` is treated as a constant.

    Returns ``(loss, clamped)``; ``clamped`` is set when ``o_hat`` puts mass
    where ``o`` has none, in which case ``log o`` is floored at ``log 1e-12``.
    """
    ref = o.probs if isinstance(o, NextTokenDistribution) else np.asarray(o, dtype=np.float64)
    src = o_hat.probs_tensor if isinstance(o_hat, NextTokenDistribution) and o_hat.probs_tensor is not None else o_hat
    if isinstance(src, NextTokenDistribution):
        src = src.probs
    if isinstance(src, Tensor):
        p = src.data
        log_hat, log_o, pos, clamped = _kl_terms(p, ref)
        value = np.asarray(np.sum(np.where(pos, p * (log_hat - log_o), 0.0)))
        grad_local = np.where(pos, log_hat + 1.0 - log_o, 0.0)
        return Tensor._make(value, (src,), lambda g: (g * grad_local,)), clamped
    p = np.asarray(src, dtype=np.float64)
    if p.shape != ref.shape:
        raise ContractError("distributions differ in length")
    log_hat, log_o, pos, clamped = _kl_terms(p, ref)
    return float(np.sum(np.where(pos, p * (log_hat - log_o), 0.0))), clamped


def combined_loss(l_m, l_f, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    return alpha * l_m + (1.0 - alpha) * l_f


def top_m_indices(probs: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest probabilities, ties broken toward lower ids."""
    return np.argsort(-probs, kind="stable")[:m]


# -- trigger ----------------------------------------------------------------------

@dataclass
class TriggerDecision:
    triggered: bool
    per_hypothesis: list[bool]
    candidates: list[np.ndarray]
    tc: list[np.ndarray]
    classifier_calls: int


def should_trigger(
    prefixes: Sequence[Sequence[str]],
    dists: Sequence[NextTokenDistribution],
    scorer: ToxicityScorer,
    cfg: GuidanceConfig,
    token_strings: Sequence[str],
) -> TriggerDecision:
    """Score every hypothesis' top-M continuations and decide whether to redo the step.

    ``token_strings[i]`` is the surface form of token id ``i``; special
    tokens should map to the empty string so they do not affect scoring.
    """
    cands, tcs, flags = [], [], []
    calls = 0
    for prefix, dist in zip(prefixes, dists):
        if cfg.top_m > dist.probs.size:
            raise ContractError("top_m exceeds the vocabulary size")
        idx = top_m_indices(dist.probs, cfg.top_m)
        base = [t for t in prefix if t]
        tc = np.empty(idx.size)
        for j, tok in enumerate(idx):
            surface = token_strings[tok]
            try:
                tc[j] = scorer(base + [surface] if surface else base)
            except Exception as exc:
                raise ScorerError(f"scorer {getattr(scorer, 'name', scorer)!r} failed: {exc}") from exc
            calls += 1
        if np.any((tc < 0) | (tc > 1)):
            raise ContractError(f"scorer {getattr(scorer, 'name', scorer)!r} returned a value outside [0, 1]")
        cands.append(idx)
        tcs.append(tc)
        flags.append(cfg.trigger_mode == "always" or bool(np.any(tc > 0)))
    return TriggerDecision(any(flags), flags, cands, tcs, calls)


# -- update -----------------------------------------------------------------------

@dataclass
class HypothesisStep:
    """Inputs for re-learning one hypothesis' context at the current step."""

    prev_token: int
    ctx: DecoderContext
    o: NextTokenDistribution
    candidates: np.ndarray
    tc: np.ndarray


def guided_update(
    steps: Sequence[HypothesisStep],
    params: ModelParams,
    cfg: GuidanceConfig,
) -> tuple[list[DecoderContext], list[GuidanceOutcome]]:
    """One gradient step on the context of every hypothesis in ``steps``.

    The per-hypothesis losses are summed into one objective and
    backpropagated once.  Caches are disjoint between hypotheses, so each
    hypothesis' gradient is that of its own loss; each is normalized by its
    own denominator (``||g_h||^2`` or ``L_h^2``) and applied once.  Returns
    the updated incoming contexts (not yet extended by the current position)
    and one outcome per hypothesis.
    """
    leaves_all: list[list[Tensor]] = []
    losses = []
    outcomes = []
    total = None
    for st in steps:
        tracked, leaves = st.ctx.leaves(cfg.update_target)
        leaves_all.append(leaves)
        o_hat, _ = decode_step(st.prev_token, tracked, params)
        if not leaves:
            # nothing selected (e.g. empty self cache at the first step)
            o_hat = NextTokenDistribution(o_hat.probs, o_hat.logits, Tensor(o_hat.probs))
        ref = o_hat.probs.copy()
        theta = theta_tc(st.tc)
        l_m = mitigation_loss(o_hat.probs_tensor[st.candidates], theta)
        l_f, clamped = faithfulness_loss(o_hat.probs_tensor, ref)
        loss = combined_loss(l_m, l_f, cfg.alpha)
        total = loss if total is None else total + loss
        losses.append(loss)
        outcomes.append(GuidanceOutcome(
            True, float(loss.data), float(l_m.data), float(l_f.data), clamped=clamped, o_before=st.o,
        ))

    if total is not None and total.requires_grad:
        total.backward()

    new_ctxs = []
    for st, leaves, out in zip(steps, leaves_all, outcomes):
        grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
        sq = sum(float(np.sum(g * g)) for g in grads)
        out.grad_norm = math.sqrt(sq)
        if not math.isfinite(out.grad_norm):
            out.warning = "non-finite gradient; update skipped"
            log.warning(out.warning)
        elif leaves and out.grad_norm > 0.0 and out.grad_norm >= cfg.grad_floor:
            denom = (sq if cfg.norm_mode == "grad_norm_sq" else out.loss_total**2) + 1e-12
            scale = cfg.lam / denom
            # descent: the step lowers L
            new_ctxs.append(st.ctx.with_selected(cfg.update_target, [l.data - scale * g for l, g in zip(leaves, grads)]))
            out.updated = True
            continue
        new_ctxs.append(st.ctx)
    return new_ctxs, outcomes


def context_update(
    ctx: DecoderContext,
    prev_token: int,
    o: NextTokenDistribution,
    tc: Sequence[float],
    params: ModelParams,
    cfg: GuidanceConfig,
) -> tuple[DecoderContext, GuidanceOutcome]:
    """Single-hypothesis form of :func:`guided_update` that also redoes the step."""
    cands = top_m_indices(o.probs, cfg.top_m)
    (new_ctx,), (outcome,) = guided_update(
        [HypothesisStep(prev_token, ctx, o, cands, np.asarray(tc, dtype=np.float64))], params, cfg
    )
    if outcome.updated:
        outcome.o_after, _ = decode_step(prev_token, new_ctx, params)
    else:
        outcome.o_after = o
    return new_ctx, outcome
