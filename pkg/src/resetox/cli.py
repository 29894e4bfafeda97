"""Command-line driver: gen-data, train, translate, evaluate, ablate, gradcheck.

Exit status: 0 success, 1 contract or usage error, 2 I/O or format error,
3 gradient check above threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fixture
from .corpus import CorpusFormatError, CorpusSpec, Pair, generate, load_jsonl, save_jsonl, vocabulary_tokens
from .decoding import DecodeResult, surface_table, translate_corpus
from .gradcheck import find_state, run_gradcheck
from .guidance import GuidanceConfig, read_kv
from .lexicon import LexiconError, LexiconScorer, ToxicityLexicon, load_lexicon
from .metrics import (
    MetricReport,
    bleu,
    chrf,
    etox_count,
    fluency_nll,
    reduction,
    removal_baseline,
    similarity_proxy,
)
from .model import ModelConfig, ModelParams
from .tensor import ContractError
from .training import TrainConfig, train, write_curve
from .weights import Vocabulary, WeightFormatError, load_weights, save_weights

log = logging.getLogger("resetox")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_GATE = 0, 1, 2, 3
GRADCHECK_THRESHOLD = 1e-3
NORM_FLAGS = {"grad": "grad_norm_sq", "loss": "loss_sq"}


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers ---------------------------------------------------------------------------

def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


@contextmanager
def atomic_dir(path: str | os.PathLike):
    """Populate a sibling temp directory, then move it into place."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if target.exists():
        old = target.with_name(f".{target.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        target.rename(old)
    tmp.rename(target)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def write_manifest(out: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    rec = {"command": command, "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"}}
    if extra:
        rec.update(extra)
    (out / "manifest.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _lexicon(args) -> ToxicityLexicon:
    if args.lexicon:
        return load_lexicon(_require(args.lexicon, "lexicon"))
    return load_lexicon(fixture.data_path(fixture.LEXICON), language_tag="synthetic")


def _params(args) -> ModelParams:
    if args.checkpoint:
        return load_weights(_require(args.checkpoint, "checkpoint"))
    return load_weights(fixture.data_path(fixture.CHECKPOINT))


def _vocab(args) -> Vocabulary:
    path = getattr(args, "vocab", None)
    if path:
        return Vocabulary.load(_require(path, "vocabulary"))
    if args.checkpoint:
        sibling = Path(args.checkpoint).with_name("vocab.txt")
        if sibling.exists():
            return Vocabulary.load(sibling)
    return Vocabulary.load(fixture.data_path(fixture.VOCAB))


def _guidance(args, **overrides) -> GuidanceConfig:
    if args.config:
        cfg = GuidanceConfig.load(_require(args.config, "guidance config"))
    else:
        cfg = GuidanceConfig.load(fixture.data_path(fixture.GUIDANCE))
    return cfg.with_overrides(
        alpha=overrides.get("alpha", getattr(args, "alpha", None)),
        lam=args.lam,
        top_m=args.top_m,
        update_target=overrides.get("update_target", getattr(args, "target", None)),
        trigger_mode=overrides.get("trigger_mode", getattr(args, "trigger", None)),
        norm_mode=NORM_FLAGS.get(args.norm) if args.norm else None,
    )


def read_lines(path: str | os.PathLike) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def read_sources(path: str | None) -> tuple[list[str], list[str] | None]:
    """Sources (and references when available) from a jsonl corpus or plain text."""
    if path is None:
        test = fixture.reference().corpus.test
        return [p.src for p in test], [p.tgt for p in test]
    p = _require(path, "input")
    if p.suffix == ".jsonl":
        pairs = load_jsonl(p)
        return [x.src for x in pairs], [x.tgt for x in pairs]
    return read_lines(p), None


def _translate(sources: Sequence[str], params, vocab, lexicon, args, cfg: GuidanceConfig | None):
    ids = [vocab.encode(s) for s in sources]
    scorer = LexiconScorer(lexicon) if cfg is not None else None
    res = translate_corpus(
        ids, params, k=args.beam, max_len=args.max_len, cfg=cfg, scorer=scorer,
        token_strings=vocab.tokens, workers=args.workers,
    )
    outs = [" ".join(vocab.decode(o)) for o in res.outputs]
    return outs, res


def _event_lines(results: Sequence[DecodeResult]) -> list[str]:
    lines = []
    for i, r in enumerate(results):
        for e in r.events:
            rec = json.loads(e.to_json())
            rec["sentence"] = i
            lines.append(json.dumps(rec, sort_keys=True))
    return lines


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    values = read_kv(_require(args.config, "corpus spec")) if args.config else read_kv(fixture.data_path(fixture.CORPUS_SPEC))
    spec = CorpusSpec.from_mapping(values)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    lexicon = sorted(_lexicon(args).entries) if args.lexicon else None
    corpus = generate(spec, lexicon)
    with atomic_dir(args.out) as out:
        save_jsonl(corpus.train, out / "train.jsonl")
        save_jsonl(corpus.test, out / "test.jsonl")
        (out / "corpus.cfg").write_text(spec.to_text(), encoding="utf-8")
        Vocabulary(vocabulary_tokens()).save(out / "vocab.txt")
        write_manifest(out, "gen-data", args, {"n_train": len(corpus.train), "n_test": len(corpus.test),
                                               "n_corrupted": corpus.n_corrupted})
    print(f"wrote {len(corpus.train)} training and {len(corpus.test)} test pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.data:
        data = _require(args.data, "data directory")
        pairs = load_jsonl(_require(str(data / "train.jsonl"), "training corpus"))
        vocab = Vocabulary.load(_require(str(data / "vocab.txt"), "vocabulary"))
    else:
        pairs = fixture.reference().corpus.train
        vocab = Vocabulary.load(fixture.data_path(fixture.VOCAB))
    values = read_kv(_require(args.config, "training config")) if args.config else read_kv(fixture.data_path(fixture.TRAIN))
    tcfg = TrainConfig.from_mapping(values)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    params, curve = train(pairs, vocab, ModelConfig(), tcfg)
    with atomic_dir(args.out) as out:
        save_weights(params, out / "model.weights")
        vocab.save(out / "vocab.txt")
        write_curve(curve, out / "curve.jsonl")
        write_manifest(out, "train", args, {"final_loss": curve[-1]["loss"]})
    print(f"trained {tcfg.epochs} epochs, final loss {curve[-1]['loss']:.4f}; weights in {args.out}/model.weights")
    return EXIT_OK


def cmd_translate(args) -> int:
    params, vocab, lexicon = _params(args), _vocab(args), _lexicon(args)
    sources, _ = read_sources(args.input)
    cfg = _guidance(args) if args.guidance == "on" else None
    outs, res = _translate(sources, params, vocab, lexicon, args, cfg)
    if args.baseline == "remove-words":
        outs = removal_baseline(outs, lexicon)
    with atomic_dir(args.out) as out:
        (out / "translations.txt").write_text("".join(o + "\n" for o in outs), encoding="utf-8")
        (out / "events.jsonl").write_text("".join(l + "\n" for l in _event_lines(res.results)), encoding="utf-8")
        acct = asdict(res.accounting)
        write_manifest(out, "translate", args, {
            "accounting": acct,
            "guidance": asdict(cfg) if cfg else None,
            "failures": res.failures,
        })
    for i, err in res.failures:
        log.error("sentence %d failed: %s", i, err)
    print(f"translated {len(outs)} sentences (m = {res.accounting.m}, wall_steps = {res.accounting.wall_steps})")
    return EXIT_OK


def report_for(
    hyps: Sequence[str],
    refs: Sequence[str],
    lexicon: ToxicityLexicon,
    sources: Sequence[str] | None = None,
    params: ModelParams | None = None,
    vocab: Vocabulary | None = None,
    baseline_count: int | None = None,
) -> MetricReport:
    count, _ = etox_count(hyps, lexicon)
    rep = MetricReport(bleu(hyps, refs), chrf(hyps, refs), count, n_sentences=len(hyps))
    if baseline_count is not None:
        rep.reduction_pct = reduction(baseline_count, count)
    if sources is not None and params is not None and vocab is not None:
        sims, nlls = [], []
        for s, h in zip(sources, hyps):
            src_ids, hyp_ids = vocab.encode(s), vocab.encode(h)
            if hyp_ids:
                sims.append(similarity_proxy(src_ids, hyp_ids, params))
            nlls.append(fluency_nll(hyp_ids, src_ids, params))
        rep.similarity = float(np.mean(sims)) if sims else None
        rep.fluency_nll = float(np.mean(nlls))
    return rep


def write_report(rep: MetricReport, out: Path, language: str) -> None:
    text = rep.to_text()
    red = "n/a" if rep.reduction_pct is None else f"{rep.reduction_pct:.1f}"
    text += "\nlanguage\tetox\treduction_pct\tbleu\tchrf\n"
    text += f"{language}\t{rep.etox_count}\t{red}\t{rep.bleu:.2f}\t{rep.chrf:.2f}\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    rec = json.loads(rep.to_json())
    rec["language"] = language
    (out / "report.jsonl").write_text(json.dumps(rec, sort_keys=True) + "\n", encoding="utf-8")


def cmd_evaluate(args) -> int:
    hyps = read_lines(_require(args.hyp, "hypothesis file"))
    refs = read_lines(_require(args.ref, "reference file"))
    lexicon = _lexicon(args)
    if args.baseline == "remove-words":
        hyps = removal_baseline(hyps, lexicon)
    baseline_count = None
    if args.baseline_hyp:
        baseline_count, _ = etox_count(read_lines(_require(args.baseline_hyp, "baseline hypothesis file")), lexicon)
    sources = read_lines(_require(args.src, "source file")) if args.src else None
    params = _params(args) if sources is not None else None
    vocab = _vocab(args) if sources is not None else None
    rep = report_for(hyps, refs, lexicon, sources, params, vocab, baseline_count)
    with atomic_dir(args.out) as out:
        write_report(rep, out, lexicon.language_tag)
        write_manifest(out, "evaluate", args)
    sys.stdout.write(rep.to_text())
    return EXIT_OK


ABLATE_COLUMNS = ("alpha", "target", "trigger", "etox_count", "chrf", "bleu", "similarity", "n", "m", "wall_steps", "classifier_calls")


def ablation_rows(
    sources: Sequence[str],
    refs: Sequence[str],
    params: ModelParams,
    vocab: Vocabulary,
    lexicon: ToxicityLexicon,
    base: GuidanceConfig,
    alphas: Sequence[float],
    targets: Sequence[str],
    triggers: Sequence[str],
    beam: int = 5,
    max_len: int = 100,
    workers: int = 1,
) -> list[dict]:
    """One row per (alpha, target, trigger) configuration, in grid order."""
    ids = [vocab.encode(s) for s in sources]
    scorer = LexiconScorer(lexicon)
    rows = []
    for alpha in alphas:
        for target in targets:
            for trigger in triggers:
                cfg = replace(base, alpha=alpha, update_target=target, trigger_mode=trigger)
                res = translate_corpus(ids, params, beam, max_len, cfg, scorer, vocab.tokens, workers)
                outs = [" ".join(vocab.decode(o)) for o in res.outputs]
                sims = [similarity_proxy(i, o, params) for i, o in zip(ids, res.outputs) if o]
                rows.append({
                    "alpha": alpha, "target": target, "trigger": trigger,
                    "etox_count": etox_count(outs, lexicon)[0],
                    "chrf": chrf(outs, refs), "bleu": bleu(outs, refs),
                    "similarity": float(np.mean(sims)) if sims else 0.0,
                    "n": res.accounting.n, "m": res.accounting.m,
                    "wall_steps": res.accounting.wall_steps, "classifier_calls": res.accounting.classifier_calls,
                    "outputs": outs,
                })
    return rows


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_ablate(args) -> int:
    alphas = [float(a) for a in args.alpha.split(",")] if args.alpha else [0.0, 0.2, 0.5, 0.8, 1.0]
    targets = args.target.split(",") if args.target else ["self"]
    triggers = args.trigger.split(",") if args.trigger else ["conditional"]
    if not alphas or not targets or not triggers:
        raise UsageError("ablation grid is empty")
    for t in targets:
        if t not in ("self", "cross", "both"):
            raise UsageError(f"unknown update target {t!r}")
    for t in triggers:
        if t not in ("conditional", "always"):
            raise UsageError(f"unknown trigger mode {t!r}")
    params, vocab, lexicon = _params(args), _vocab(args), _lexicon(args)
    sources, refs = read_sources(args.input)
    if refs is None:
        raise UsageError("ablation needs references: pass a .jsonl corpus as --input")
    base = _guidance(args, alpha=alphas[0], update_target=targets[0], trigger_mode=triggers[0])
    rows = ablation_rows(sources, refs, params, vocab, lexicon, base, alphas, targets, triggers,
                         args.beam, args.max_len, args.workers)
    table = "\t".join(ABLATE_COLUMNS) + "\n"
    table += "".join("\t".join(_fmt(r[c]) for c in ABLATE_COLUMNS) + "\n" for r in rows)
    with atomic_dir(args.out) as out:
        (out / "ablation.tsv").write_text(table, encoding="utf-8")
        with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps({c: r[c] for c in ABLATE_COLUMNS}, sort_keys=True) + "\n")
        write_manifest(out, "ablate", args, {"guidance": asdict(base)})
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    params, vocab, lexicon = _params(args), _vocab(args), _lexicon(args)
    sources, _ = read_sources(args.input)
    cfg = _guidance(args)
    tokens = surface_table(vocab.tokens, params.config.vocab_size)
    scorer = LexiconScorer(lexicon)
    src, prefix = find_state([vocab.encode(s) for s in sources], params, scorer, tokens, cfg.top_m)
    seed = 0 if args.seed is None else args.seed
    rep = run_gradcheck(params, src, prefix, scorer, tokens, cfg, n_samples=args.samples, seed=seed)
    sys.stdout.write(rep.to_text())
    if args.out:
        with atomic_dir(args.out) as out:
            (out / "gradcheck.txt").write_text(rep.to_text(), encoding="utf-8")
            write_manifest(out, "gradcheck", args)
    if rep.worst > GRADCHECK_THRESHOLD:
        log.error("gradient check failed: worst relative error %.3e > %.0e", rep.worst, GRADCHECK_THRESHOLD)
        return EXIT_GATE
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_model_flags(p):
    p.add_argument("--checkpoint", help="weight file (default: the shipped reference checkpoint)")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt next to the checkpoint, else the shipped one)")
    p.add_argument("--lexicon", help="toxicity word list, one entry per line")


def _add_guidance_flags(p, grid: bool = False):
    p.add_argument("--config", help="guidance config (key = value)")
    if grid:
        p.add_argument("--alpha", help="comma-separated alpha grid (default 0,0.2,0.5,0.8,1)")
        p.add_argument("--target", help="comma-separated update targets from self, cross, both")
        p.add_argument("--trigger", help="comma-separated trigger modes from conditional, always")
    else:
        p.add_argument("--alpha", type=float)
        p.add_argument("--target", choices=("self", "cross", "both"))
        p.add_argument("--trigger", choices=("conditional", "always"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--top-m", dest="top_m", type=_positive_int)
    p.add_argument("--norm", choices=tuple(NORM_FLAGS))


def _add_decode_flags(p):
    p.add_argument("--beam", type=_positive_int, default=5)
    p.add_argument("--max-len", dest="max_len", type=_positive_int, default=100)
    p.add_argument("--workers", type=_positive_int, default=1, help="sentences decoded concurrently")
    p.add_argument("--input", help="sources: .jsonl corpus (src/tgt) or one sentence per line (default: shipped test set)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resetox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic parallel corpus")
    p.add_argument("--config", help="corpus spec (key = value)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lexicon")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy model")
    p.add_argument("--config", help="training config (key = value)")
    p.add_argument("--data", help="directory written by gen-data (default: the reference corpus)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="beam search, optionally with guided re-learning of the caches")
    _add_model_flags(p)
    _add_guidance_flags(p)
    _add_decode_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--guidance", choices=("on", "off"), default="on")
    p.add_argument("--baseline", choices=("none", "remove-words"), default="none")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU, chrF, toxicity and proxy metrics")
    _add_model_flags(p)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--src", help="sources, enables the similarity and fluency proxies")
    p.add_argument("--baseline-hyp", dest="baseline_hyp", help="baseline outputs, enables the reduction column")
    p.add_argument("--baseline", choices=("none", "remove-words"), default="none")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep alpha, update target and trigger mode")
    _add_model_flags(p)
    _add_guidance_flags(p, grid=True)
    _add_decode_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the guidance gradient")
    _add_model_flags(p)
    _add_guidance_flags(p)
    p.add_argument("--input", help="sources to search for a live toxic decoding state")
    p.add_argument("--samples", type=_positive_int, default=200, help="cache coordinates to check")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"resetox: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, WeightFormatError, CorpusFormatError, LexiconError, UnicodeDecodeError) as exc:
        print(f"resetox: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ValueError) as exc:
        print(f"resetox: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
