"""Toy pre-LN encoder-decoder transformer with explicit decoder caches.

The decoder caches hold post-projection keys and values per layer: the
self-attention pair grows by one row per decoded position, the
cross-attention pair is computed once from the encoder output.  Contexts
are ordinary values passed in and out of :func:`decode_step` so callers can
copy, perturb and restore them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence, Union

import numpy as np

from . import _accel
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    embedding,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    softmax_columns,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
_NEG = -1e9

Array = Union[np.ndarray, Tensor]


class VocabularyError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 2
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int = 128
    max_len: int = 128

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ContractError(f"ModelConfig.{f.name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must equal n_heads * d_k")
        if self.max_len < 100:
            raise ContractError("max_len must be >= 100")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Tensor views sharing memory with the parameter arrays."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class DecoderContext:
    """Per-layer decoder caches for one hypothesis.

    ``self_kv[l]`` is the (keys, values) pair of decoder layer ``l`` over
    the positions decoded so far, each of shape (t, d_model).
    ``cross_kv[l]`` is the pair over the source, shape (S, d_model).
    Entries are arrays, or Tensors when a gradient with respect to the
    cache is wanted.
    """

    self_kv: list[tuple[Array, Array]]
    cross_kv: list[tuple[Array, Array]]

    @property
    def length(self) -> int:
        return int(self.self_kv[0][0].shape[0])

    @property
    def source_length(self) -> int:
        return int(self.cross_kv[0][0].shape[0])

    def copy(self) -> "DecoderContext":
        def cp(a):
            return _data(a).copy()

        return DecoderContext(
            [(cp(k), cp(v)) for k, v in self.self_kv],
            [(cp(k), cp(v)) for k, v in self.cross_kv],
        )

    def leaves(self, target: str = "both") -> tuple["DecoderContext", list[Tensor]]:
        """Copy with the caches selected by ``target`` as gradient-tracking leaves.

        ``target`` is one of ``self``, ``cross``, ``both``.  Returns the new
        context and the flat list of leaf tensors in a fixed order
        (self pairs by layer, then cross pairs by layer).
        """
        if target not in ("self", "cross", "both"):
            raise ContractError(f"unknown update target {target!r}")
        track_self = target in ("self", "both")
        track_cross = target in ("cross", "both")
        out: list[Tensor] = []

        def wrap(pairs, track):
            res = []
            for k, v in pairs:
                if track:
                    kt, vt = Tensor(_data(k), requires_grad=True), Tensor(_data(v), requires_grad=True)
                    out.extend([kt, vt])
                    res.append((kt, vt))
                else:
                    res.append((_data(k), _data(v)))
            return res

        ctx = DecoderContext(wrap(self.self_kv, track_self), wrap(self.cross_kv, track_cross))
        return ctx, out

    def selected_arrays(self, target: str) -> list[np.ndarray]:
        arrs: list[np.ndarray] = []
        if target in ("self", "both"):
            for k, v in self.self_kv:
                arrs.extend([_data(k), _data(v)])
        if target in ("cross", "both"):
            for k, v in self.cross_kv:
                arrs.extend([_data(k), _data(v)])
        return arrs

    def with_selected(self, target: str, arrays: Sequence[np.ndarray]) -> "DecoderContext":
        """New context with the ``target`` caches replaced, in ``selected_arrays`` order."""
        it = iter(arrays)
        self_kv = [(_data(k), _data(v)) for k, v in self.self_kv]
        cross_kv = [(_data(k), _data(v)) for k, v in self.cross_kv]
        if target in ("self", "both"):
            self_kv = [(next(it), next(it)) for _ in self_kv]
        if target in ("cross", "both"):
            cross_kv = [(next(it), next(it)) for _ in cross_kv]
        return DecoderContext(self_kv, cross_kv)


@dataclass
class NextTokenDistribution:
    probs: np.ndarray
    logits: np.ndarray
    probs_tensor: Tensor | None = field(default=None, repr=False)

    @property
    def log_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        return z - np.log(np.exp(z).sum())


def _data(x: Array) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _pe(cfg: ModelConfig) -> np.ndarray:
    key = (cfg.max_len, cfg.d_model)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = positional_encoding(cfg.max_len, cfg.d_model)
    return _PE_CACHE[key]


# -- parameters --------------------------------------------------------------

def _attn_names(prefix: str, with_kv: bool = True) -> list[str]:
    names = [f"{prefix}.wq", f"{prefix}.bq"]
    if with_kv:
        names += [f"{prefix}.wk", f"{prefix}.bk", f"{prefix}.wv", f"{prefix}.bv"]
    return names + [f"{prefix}.wo", f"{prefix}.bo"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, D)}

    def attn(prefix):
        for n in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{n}"] = (D, D)
            shapes[f"{prefix}.b{n}"] = (D,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (D,)
        shapes[f"{prefix}.b"] = (D,)

    def ff(prefix):
        shapes[f"{prefix}.w1"] = (D, F)
        shapes[f"{prefix}.b1"] = (F,)
        shapes[f"{prefix}.w2"] = (F, D)
        shapes[f"{prefix}.b2"] = (D,)

    for l in range(cfg.n_layers_enc):
        ln(f"enc.{l}.ln1")
        attn(f"enc.{l}.attn")
        ln(f"enc.{l}.ln2")
        ff(f"enc.{l}.ff")
    ln("enc.ln")
    for l in range(cfg.n_layers_dec):
        ln(f"dec.{l}.ln1")
        attn(f"dec.{l}.self")
        ln(f"dec.{l}.ln2")
        attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln3")
        ff(f"dec.{l}.ff")
    ln("dec.ln")
    shapes["out.w"] = (D, V)
    shapes["out.b"] = (V,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded initialization: scaled-normal matrices, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed":
            arrays[name] = rng.normal(0.0, cfg.d_model**-0.5, shape)
        elif leaf == "g":
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, shape[0] ** -0.5, shape)
    arrays["out.w"] *= 0.5
    return ModelParams(cfg, arrays)


# -- attention ----------------------------------------------------------------

def self_attention(q: Tensor, k: Tensor, v: Tensor, d_k: int, causal_mask: bool = False) -> Tensor:
    """Column-convention attention ``V . softmax_cols(K^T Q / sqrt(d_k))``.

    ``q`` is (d_k, Tq), ``k`` is (d_k, Tk), ``v`` is (d_v, Tk); the result
    is (d_v, Tq).  With ``causal_mask`` the last Tq keys are aligned with
    the queries and key j is hidden from query i when j lies after i.
    """
    if d_k <= 0:
        raise ContractError("d_k must be positive")
    if q.shape[0] != k.shape[0] or k.shape[1] != v.shape[1]:
        raise DimensionError(
            f"attention: incompatible shapes q={list(q.shape)} k={list(k.shape)} v={list(v.shape)}"
        )
    scores = matmul(k.T, q) * (1.0 / math.sqrt(d_k))
    if causal_mask:
        tk, tq = scores.shape
        offset = tk - tq
        j = np.arange(tk)[:, None]
        i = np.arange(tq)[None, :]
        scores = scores + np.where(j > i + offset, -np.inf, 0.0)
    return matmul(v, softmax_columns(scores))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, n_heads, d // n_heads)
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(axes).reshape(*lead, t, h * dk)


def _heads_attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask=None) -> Tensor:
    """Row-convention multi-head attention over (..., T, D) inputs."""
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    d_k = qh.shape[-1]
    scores = matmul(qh, kh.transpose(*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = scores + mask
    return _merge_heads(matmul(softmax(scores, axis=-1), vh))


def _lin(x: Tensor, P: dict, w: str, b: str) -> Tensor:
    return matmul(x, P[w]) + P[b]


def _ln(x: Tensor, P: dict, prefix: str) -> Tensor:
    return layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])


def _ff(x: Tensor, P: dict, prefix: str) -> Tensor:
    h = _lin(x, P, f"{prefix}.w1", f"{prefix}.b1").relu()
    return _lin(h, P, f"{prefix}.w2", f"{prefix}.b2")


def _embed(ids: np.ndarray, P: dict, cfg: ModelConfig, offset: int = 0) -> Tensor:
    t = ids.shape[-1]
    if offset + t > cfg.max_len:
        raise LengthError(f"position {offset + t - 1} exceeds max_len {cfg.max_len}")
    return embedding(P["embed"], ids) * math.sqrt(cfg.d_model) + _pe(cfg)[offset : offset + t]


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabularyError(f"token id outside [0, {cfg.vocab_size})")


# -- encoder ------------------------------------------------------------------

def encoder_states(src: np.ndarray, P: dict, cfg: ModelConfig, src_mask: np.ndarray | None = None) -> Tensor:
    """Encoder output for ``src`` of shape (S,) or (B, S)."""
    x = _embed(src, P, cfg)
    add = None
    if src_mask is not None:
        add = np.where(src_mask, 0.0, _NEG)[:, None, None, :]
    for l in range(cfg.n_layers_enc):
        h = _ln(x, P, f"enc.{l}.ln1")
        p = f"enc.{l}.attn"
        q, k, v = _lin(h, P, f"{p}.wq", f"{p}.bq"), _lin(h, P, f"{p}.wk", f"{p}.bk"), _lin(h, P, f"{p}.wv", f"{p}.bv")
        x = x + _lin(_heads_attend(q, k, v, cfg.n_heads, add), P, f"{p}.wo", f"{p}.bo")
        x = x + _ff(_ln(x, P, f"enc.{l}.ln2"), P, f"enc.{l}.ff")
    return _ln(x, P, "enc.ln")


def cross_caches(enc: Tensor, P: dict, cfg: ModelConfig) -> list[tuple[Tensor, Tensor]]:
    out = []
    for l in range(cfg.n_layers_dec):
        p = f"dec.{l}.cross"
        out.append((_lin(enc, P, f"{p}.wk", f"{p}.bk"), _lin(enc, P, f"{p}.wv", f"{p}.bv")))
    return out


def encode(src: Sequence[int], params: ModelParams) -> tuple[np.ndarray, DecoderContext]:
    """Encode one source sentence; returns encoder states and an empty-prefix context."""
    cfg = params.config
    ids = np.asarray(src, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractError("encode expects a non-empty 1-D token sequence")
    if ids.size > cfg.max_len:
        raise LengthError(f"source length {ids.size} exceeds max_len {cfg.max_len}")
    _check_ids(ids, cfg)
    P = params.tensors()
    with no_grad():
        enc = encoder_states(ids, P, cfg)
        cross = [(k.data, v.data) for k, v in cross_caches(enc, P, cfg)]
    empty = np.zeros((0, cfg.d_model))
    ctx = DecoderContext([(empty, empty) for _ in range(cfg.n_layers_dec)], cross)
    return enc.data, ctx


# -- decoder ------------------------------------------------------------------

def decode_step(prev_token: int, ctx: DecoderContext, params: ModelParams) -> tuple[NextTokenDistribution, DecoderContext]:
    """Feed ``prev_token`` at the next position; returns o_{i+1} and the extended context.

    If any cache entry of ``ctx`` is a Tensor the step runs through the
    Tensor ops (recorded on the tape unless gradients are disabled) and
    ``probs_tensor`` of the result is differentiable with respect to those
    entries.  Plain arrays take the compiled fast path.
    The returned context always holds plain arrays.
    """
    cfg = params.config
    if not 0 <= prev_token < cfg.vocab_size:
        raise VocabularyError(f"token id {prev_token} outside [0, {cfg.vocab_size})")
    pos = ctx.length
    if pos >= cfg.max_len:
        raise LengthError(f"position {pos} exceeds max_len {cfg.max_len}")
    tracked = any(isinstance(a, Tensor) for pair in ctx.self_kv + ctx.cross_kv for a in pair)
    if tracked:
        return _decode_step_tape(prev_token, ctx, params)
    return _decode_step_fast(prev_token, ctx, params)


def _decode_step_fast(prev_token: int, ctx: DecoderContext, params: ModelParams):
    cfg = params.config
    A = params.arrays
    pos = ctx.length
    x = A["embed"][prev_token] * math.sqrt(cfg.d_model) + _pe(cfg)[pos]
    new_self = []
    for l in range(cfg.n_layers_dec):
        s, c = f"dec.{l}.self", f"dec.{l}.cross"
        sk, sv = ctx.self_kv[l]
        ck, cv = ctx.cross_kv[l]
        x, nk, nv = _accel.decoder_layer_step(
            x, _data(sk), _data(sv), _data(ck), _data(cv), cfg.n_heads,
            A[f"dec.{l}.ln1.g"], A[f"dec.{l}.ln1.b"],
            A[f"{s}.wq"], A[f"{s}.bq"], A[f"{s}.wk"], A[f"{s}.bk"], A[f"{s}.wv"], A[f"{s}.bv"], A[f"{s}.wo"], A[f"{s}.bo"],
            A[f"dec.{l}.ln2.g"], A[f"dec.{l}.ln2.b"],
            A[f"{c}.wq"], A[f"{c}.bq"], A[f"{c}.wo"], A[f"{c}.bo"],
            A[f"dec.{l}.ln3.g"], A[f"dec.{l}.ln3.b"],
            A[f"dec.{l}.ff.w1"], A[f"dec.{l}.ff.b1"], A[f"dec.{l}.ff.w2"], A[f"dec.{l}.ff.b2"],
        )
        new_self.append((nk, nv))
    logits, probs = _accel.output_distribution(x, A["dec.ln.g"], A["dec.ln.b"], A["out.w"], A["out.b"])
    new_ctx = DecoderContext(new_self, [(_data(k), _data(v)) for k, v in ctx.cross_kv])
    return NextTokenDistribution(probs=probs, logits=logits), new_ctx


def _decode_step_tape(prev_token: int, ctx: DecoderContext, params: ModelParams):
    cfg = params.config
    P = params.tensors()
    pos = ctx.length
    x = _embed(np.array([prev_token]), P, cfg, offset=pos)  # (1, D)
    new_self = []
    for l in range(cfg.n_layers_dec):
        s, c = f"dec.{l}.self", f"dec.{l}.cross"
        h = _ln(x, P, f"dec.{l}.ln1")
        q = _lin(h, P, f"{s}.wq", f"{s}.bq")
        k = _lin(h, P, f"{s}.wk", f"{s}.bk")
        v = _lin(h, P, f"{s}.wv", f"{s}.bv")
        sk, sv = ctx.self_kv[l]
        K = concat([sk, k], axis=0)
        V = concat([sv, v], axis=0)
        new_self.append((K.data, V.data))
        x = x + _lin(_heads_attend(q, K, V, cfg.n_heads), P, f"{s}.wo", f"{s}.bo")
        h = _ln(x, P, f"dec.{l}.ln2")
        q = _lin(h, P, f"{c}.wq", f"{c}.bq")
        ck, cv = ctx.cross_kv[l]
        ck = ck if isinstance(ck, Tensor) else Tensor(ck)
        cv = cv if isinstance(cv, Tensor) else Tensor(cv)
        x = x + _lin(_heads_attend(q, ck, cv, cfg.n_heads), P, f"{c}.wo", f"{c}.bo")
        x = x + _ff(_ln(x, P, f"dec.{l}.ln3"), P, f"dec.{l}.ff")
    logits = _lin(_ln(x, P, "dec.ln"), P, "out.w", "out.b").reshape(cfg.vocab_size)
    probs = softmax(logits, axis=-1)
    new_ctx = DecoderContext(new_self, [(_data(k), _data(v)) for k, v in ctx.cross_kv])
    return NextTokenDistribution(probs=probs.data, logits=logits.data, probs_tensor=probs), new_ctx


def decoder_logits(
    tgt_in: np.ndarray,
    enc: Tensor,
    P: dict,
    cfg: ModelConfig,
    src_mask: np.ndarray | None = None,
) -> Tensor:
    """Teacher-forced decoder over a whole prefix; (T,) or (B, T) ids -> logits."""
    x = _embed(tgt_in, P, cfg)
    t = tgt_in.shape[-1]
    causal = np.where(np.arange(t)[None, :] > np.arange(t)[:, None], _NEG, 0.0)
    cross_mask = None
    if src_mask is not None:
        cross_mask = np.where(src_mask, 0.0, _NEG)[:, None, None, :]
    for l, (ck, cv) in enumerate(cross_caches(enc, P, cfg)):
        s, c = f"dec.{l}.self", f"dec.{l}.cross"
        h = _ln(x, P, f"dec.{l}.ln1")
        q, k, v = _lin(h, P, f"{s}.wq", f"{s}.bq"), _lin(h, P, f"{s}.wk", f"{s}.bk"), _lin(h, P, f"{s}.wv", f"{s}.bv")
        x = x + _lin(_heads_attend(q, k, v, cfg.n_heads, causal), P, f"{s}.wo", f"{s}.bo")
        h = _ln(x, P, f"dec.{l}.ln2")
        q = _lin(h, P, f"{c}.wq", f"{c}.bq")
        x = x + _lin(_heads_attend(q, ck, cv, cfg.n_heads, cross_mask), P, f"{c}.wo", f"{c}.bo")
        x = x + _ff(_ln(x, P, f"dec.{l}.ln3"), P, f"dec.{l}.ff")
    return _lin(_ln(x, P, "dec.ln"), P, "out.w", "out.b")


def forward_logits(src: Sequence[int], tgt_in: Sequence[int], params: ModelParams) -> np.ndarray:
    """Non-cached full-prefix pass: logits for every position of ``tgt_in``."""
    cfg = params.config
    src = np.asarray(src, dtype=np.int64)
    tgt = np.asarray(tgt_in, dtype=np.int64)
    _check_ids(src, cfg)
    _check_ids(tgt, cfg)
    P = params.tensors()
    with no_grad():
        enc = encoder_states(src, P, cfg)
        return decoder_logits(tgt, enc, P, cfg).data


def sequence_log_probs(src: Sequence[int], tgt: Sequence[int], params: ModelParams) -> np.ndarray:
    """Teacher-forced log-probabilities of each token of ``tgt`` (bos is prepended)."""
    tgt = list(tgt)
    logits = forward_logits(src, [BOS] + tgt[:-1], params) if tgt else np.zeros((0, params.config.vocab_size))
    with no_grad():
        lp = log_softmax(Tensor(logits), axis=-1).data
    return lp[np.arange(len(tgt)), tgt]
