"""Finite-difference check of the guidance loss against the tape gradients.

The full objective ``alpha * L_m + (1 - alpha) * L_f`` is differentiated
with respect to the self- and cross-attention caches of a live decoding
step.  The reference distribution ``o`` comes from the unmodified context,
and the check is run at a randomly perturbed context so that the KL term
has a non-zero gradient as well.

Relative errors use an absolute floor of 1e-7 in the denominator.  The
forward pass carries round-off near 1e-15, i.e. a few 1e-12 in the
difference quotient at ``eps = 3e-4``; without the floor, coordinates whose
true gradient is near zero would report that noise as a relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .guidance import GuidanceConfig, combined_loss, faithfulness_loss, mitigation_loss, theta_tc, top_m_indices
from .lexicon import ToxicityScorer
from .model import BOS, EOS, DecoderContext, ModelParams, decode_step, encode
from .tensor import Tensor, finite_diff_check


@dataclass
class GradcheckReport:
    worst_self: float
    worst_cross: float
    n_self: int
    n_cross: int
    grad_norm_at_origin: float

    @property
    def worst(self) -> float:
        return max(self.worst_self, self.worst_cross)

    def to_text(self) -> str:
        return (
            f"self_kv worst_rel_error = {self.worst_self:.3e} over {self.n_self} coordinates\n"
            f"cross_kv worst_rel_error = {self.worst_cross:.3e} over {self.n_cross} coordinates\n"
            f"grad_norm_at_unmodified_context = {self.grad_norm_at_origin:.3e}\n"
            f"worst = {self.worst:.3e}\n"
        )


def _pack(ctx: DecoderContext) -> tuple[np.ndarray, list[tuple[str, int, int, tuple, int]]]:
    """Flatten every cache array into one vector; returns the vector and a layout."""
    parts, layout, offset = [], [], 0
    for kind, pairs in (("self", ctx.self_kv), ("cross", ctx.cross_kv)):
        for layer, (k, v) in enumerate(pairs):
            for which, a in enumerate((k, v)):
                a = np.asarray(a)
                layout.append((kind, layer, which, a.shape, offset))
                parts.append(a.ravel())
                offset += a.size
    return np.concatenate(parts), layout


def _unpack(x: Tensor, layout) -> DecoderContext:
    self_kv: dict[int, list] = {}
    cross_kv: dict[int, list] = {}
    for kind, layer, which, shape, offset in layout:
        size = int(np.prod(shape))
        piece = x[offset : offset + size].reshape(*shape)
        (self_kv if kind == "self" else cross_kv).setdefault(layer, [None, None])[which] = piece
    return DecoderContext(
        [tuple(self_kv[l]) for l in sorted(self_kv)],
        [tuple(cross_kv[l]) for l in sorted(cross_kv)],
    )


def live_context(src: Sequence[int], prefix: Sequence[int], params: ModelParams) -> tuple[DecoderContext, int]:
    """Context after feeding ``prefix`` (without its last token), and that last token."""
    _, ctx = encode(src, params)
    tokens = [BOS] + list(prefix)
    for tok in tokens[:-1]:
        _, ctx = decode_step(tok, ctx, params)
    return ctx, tokens[-1]


def find_state(
    sources: Sequence[Sequence[int]],
    params: ModelParams,
    scorer: ToxicityScorer,
    token_strings: Sequence[str],
    top_m: int,
    min_mass: float = 0.05,
    max_len: int = 40,
) -> tuple[list[int], list[int]]:
    """First greedy decoding state whose top-M holds a toxic candidate with real mass.

    Returns ``(src, prefix)``; falls back to the first source and a
    three-token greedy prefix when no such state exists.
    """
    fallback = None
    for src in sources:
        _, ctx = encode(src, params)
        prev, prefix = BOS, []
        for _ in range(max_len):
            o, ctx = decode_step(prev, ctx, params)
            cands = top_m_indices(o.probs, top_m)
            words = [token_strings[t] for t in prefix]
            toxic = [c for c in cands if scorer(words + [token_strings[c]]) > 0]
            if prefix and toxic and o.probs[toxic].sum() >= min_mass:
                return list(src), prefix
            prev = int(np.argmax(o.probs))
            if prev == EOS:
                break
            prefix.append(prev)
            if fallback is None and len(prefix) == 3:
                fallback = (list(src), list(prefix))
    if fallback is None:
        raise ValueError("no usable decoding state in the given sources")
    return fallback


def loss_fn(prev_token: int, layout, params: ModelParams, o_ref: np.ndarray, cands: np.ndarray, tc: np.ndarray, alpha: float):
    theta = theta_tc(tc)

    def f(x: Tensor) -> Tensor:
        dist, _ = decode_step(prev_token, _unpack(x, layout), params)
        l_m = mitigation_loss(dist.probs_tensor[cands], theta)
        l_f, _ = faithfulness_loss(dist.probs_tensor, o_ref)
        return combined_loss(l_m, l_f, alpha)

    return f


def run_gradcheck(
    params: ModelParams,
    src: Sequence[int],
    prefix: Sequence[int],
    scorer: ToxicityScorer,
    token_strings: Sequence[str],
    cfg: GuidanceConfig,
    n_samples: int = 200,
    seed: int = 0,
    perturbation: float = 0.3,
    eps: float = 3e-4,
    floor: float = 1e-7,
) -> GradcheckReport:
    if not prefix:
        raise ValueError("gradcheck needs a non-empty prefix so the self cache is populated")
    rng = np.random.default_rng(seed)
    ctx, prev = live_context(src, prefix, params)
    o, _ = decode_step(prev, ctx, params)
    cands = top_m_indices(o.probs, cfg.top_m)
    words = [token_strings[t] for t in prefix]
    tc = np.array([scorer(words + [token_strings[c]]) for c in cands], dtype=np.float64)

    x0, layout = _pack(ctx)
    f = loss_fn(prev, layout, params, o.probs, cands, tc, cfg.alpha)

    # gradient at the unmodified context (zero for alpha = 0)
    probe = Tensor(x0.copy(), requires_grad=True)
    f(probe).backward()
    origin_norm = float(np.linalg.norm(probe.grad)) if probe.grad is not None else 0.0

    x = x0 + perturbation * rng.standard_normal(x0.shape)
    self_end = next(off for kind, *_, off in layout if kind == "cross")
    n_self = max(n_samples // 2, 1)
    n_cross = max(n_samples - n_self, 1)
    self_idx = rng.choice(self_end, size=min(n_self, self_end), replace=False)
    cross_idx = self_end + rng.choice(x.size - self_end, size=min(n_cross, x.size - self_end), replace=False)
    xt = Tensor(x)
    worst_self = finite_diff_check(f, xt, eps, [(int(i),) for i in self_idx], floor)
    worst_cross = finite_diff_check(f, xt, eps, [(int(i),) for i in cross_idx], floor)
    return GradcheckReport(worst_self, worst_cross, len(self_idx), len(cross_idx), origin_norm)
