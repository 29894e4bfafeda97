"""Teacher-forced maximum-likelihood training of the toy model."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .corpus import Pair
from .model import BOS, EOS, PAD, ModelConfig, ModelParams, decoder_logits, encoder_states, init_params
from .tensor import ContractError, cross_entropy, no_grad
from .weights import Vocabulary, save_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_path: str = ""

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "epsilon", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ContractError(f"TrainConfig.{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("adam betas must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: type(f.default) for f in fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ContractError(f"unknown training options {sorted(unknown)}")
        return cls(**{k: kinds[k](v) for k, v in values.items()})


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams):
        super().__init__(message)
        self.last_good = last_good


def encode_pairs(pairs: Sequence[Pair], vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(p.src), vocab.encode(p.tgt)) for p in pairs]


def make_batch(examples: Sequence[tuple[list[int], list[int]]]):
    """Pad a batch; returns src ids, src mask, decoder inputs and targets."""
    S = max(len(s) for s, _ in examples)
    T = max(len(t) for _, t in examples) + 1
    B = len(examples)
    src = np.full((B, S), PAD, dtype=np.int64)
    tgt_in = np.full((B, T), PAD, dtype=np.int64)
    tgt_out = np.full((B, T), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(examples):
        src[i, : len(s)] = s
        tgt_in[i, : len(t) + 1] = [BOS] + t
        tgt_out[i, : len(t) + 1] = t + [EOS]
    return src, src != PAD, tgt_in, tgt_out


def batch_loss(params: dict, cfg: ModelConfig, batch):
    src, mask, tgt_in, tgt_out = batch
    enc = encoder_states(src, params, cfg, mask)
    logits = decoder_logits(tgt_in, enc, params, cfg, mask)
    return cross_entropy(logits, tgt_out, ignore_index=PAD)


class Adam:
    def __init__(self, shapes: dict[str, tuple], lr: float, b1: float, b2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(
    pairs: Sequence[Pair],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    init: ModelParams | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Fit the model; returns parameters and one loss record per epoch.

    Record 0 is the loss of the initial parameters over the training set.
    """
    if not pairs:
        raise ContractError("cannot train on an empty corpus")
    if len(vocab) > model_cfg.vocab_size:
        raise ContractError("vocabulary larger than the model's vocab_size")
    data = encode_pairs(pairs, vocab)
    rng = np.random.default_rng(train_cfg.seed)
    params = init.copy() if init is not None else init_params(model_cfg, train_cfg.seed)
    opt = Adam({k: v.shape for k, v in params.arrays.items()}, train_cfg.learning_rate,
               train_cfg.beta1, train_cfg.beta2, train_cfg.epsilon)

    curve = [{"epoch": 0, "loss": corpus_loss(params, data, train_cfg.batch_size)}]
    last_good = params.copy()
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = make_batch([data[i] for i in order[start : start + train_cfg.batch_size]])
            P = params.tensors(requires_grad=True)
            loss = batch_loss(P, model_cfg, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                if train_cfg.checkpoint_path:
                    save_weights(last_good, train_cfg.checkpoint_path)
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}", last_good)
            loss.backward()
            grads = {k: t.grad for k, t in P.items() if t.grad is not None}
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > train_cfg.clip_norm:
                scale = train_cfg.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
            opt.step(params.arrays, grads)
            n_tok = int((batch[3] != PAD).sum())
            total += value * n_tok
            count += n_tok
        curve.append({"epoch": epoch, "loss": total / count})
        log.info("epoch %d loss %.4f", epoch, total / count)
        last_good = params.copy()
    if train_cfg.checkpoint_path:
        save_weights(params, train_cfg.checkpoint_path)
    return params, curve


def corpus_loss(params: ModelParams, data, batch_size: int = 64) -> float:
    """Token-averaged teacher-forced cross-entropy, without recording a tape."""
    P = params.tensors()
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            batch = make_batch(data[start : start + batch_size])
            n_tok = int((batch[3] != PAD).sum())
            total += float(batch_loss(P, params.config, batch).data) * n_tok
            count += n_tok
    return total / max(count, 1)


def evaluate_heldout(params: ModelParams, pairs: Sequence[Pair], vocab: Vocabulary, max_len: int = 100) -> dict:
    """Teacher-forced NLL per token and greedy exact-match rate."""
    from .decoding import beam_search

    if not pairs:
        raise ContractError("held-out set is empty")
    data = encode_pairs(pairs, vocab)
    nll = corpus_loss(params, data)
    hits = 0
    for src, tgt in data:
        out = beam_search(src, params, k=1, max_len=max_len).tokens
        hits += out == tgt
    return {"nll": nll, "exact_match": hits / len(data)}


def write_curve(curve: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in curve:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
