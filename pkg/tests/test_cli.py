import json

import pytest

from resetox import cli
from resetox.corpus import save_jsonl
from resetox.decoding import beam_search

SENTENCES = ["i grew up with a shy boss .", "i am a tall doctor .", "she is married to a deaf boss ."]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory, ref):
    d = tmp_path_factory.mktemp("inputs")
    pairs = [p for p in ref.corpus.test if p.src in SENTENCES[::2]] + ref.corpus.test[:3]
    save_jsonl(pairs, d / "small.jsonl")
    (d / "src.txt").write_text("".join(s + "\n" for s in SENTENCES))
    return d


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_pairs = 50\nn_test = 5\ntoxic_rate = 0.2\n")
    assert run("gen-data", "--config", cfg, "--seed", 4, "--out", tmp_path / "data") == 0
    lines = (tmp_path / "data" / "train.jsonl").read_text().splitlines()
    assert len(lines) == 50
    assert sum("corrupted" in json.loads(l) for l in lines) == 10
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert manifest["n_corrupted"] == 10 and manifest["args"]["seed"] == 4


def test_train_from_generated_data(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_pairs = 40\nn_test = 4\n")
    run("gen-data", "--config", cfg, "--out", tmp_path / "data")
    assert run("train", "--data", tmp_path / "data", "--epochs", 1, "--out", tmp_path / "model") == 0
    curve = [json.loads(l) for l in (tmp_path / "model" / "curve.jsonl").read_text().splitlines()]
    assert len(curve) == 2 and curve[1]["loss"] < curve[0]["loss"]
    assert (tmp_path / "model" / "vocab.txt").exists()
    ck = tmp_path / "model" / "model.weights"
    assert run("translate", "--checkpoint", ck, "--input", tmp_path / "data" / "test.jsonl",
               "--beam", 2, "--max-len", 10, "--out", tmp_path / "tr") == 0


def test_translate_guidance_off_is_beam_search(tmp_path, corpus, ref):
    assert run("translate", "--input", corpus / "src.txt", "--guidance", "off", "--out", tmp_path / "o") == 0
    got = (tmp_path / "o" / "translations.txt").read_text().splitlines()
    want = [" ".join(ref.vocab.decode(beam_search(ref.vocab.encode(s), ref.params).tokens)) for s in SENTENCES]
    assert got == want
    assert (tmp_path / "o" / "events.jsonl").read_text() == ""


def test_translate_guided_and_removal(tmp_path, corpus):
    assert run("translate", "--input", corpus / "src.txt", "--out", tmp_path / "g") == 0
    guided = (tmp_path / "g" / "translations.txt").read_text().splitlines()
    assert guided[0] == "creci con un jefe timido ."
    m = json.loads((tmp_path / "g" / "manifest.json").read_text())
    acct = m["accounting"]
    assert acct["wall_steps"] == 5 * (acct["n"] + acct["m"]) and acct["m"] > 0
    events = [json.loads(l) for l in (tmp_path / "g" / "events.jsonl").read_text().splitlines()]
    assert events and {"sentence", "step", "hypothesis", "updated"} <= set(events[0])

    assert run("translate", "--input", corpus / "src.txt", "--guidance", "off", "--baseline", "remove-words",
               "--out", tmp_path / "r") == 0
    removed = (tmp_path / "r" / "translations.txt").read_text().splitlines()
    assert removed[0] == "creci con un jefe ."


def test_translate_flag_overrides_reach_the_config(tmp_path, corpus):
    assert run("translate", "--input", corpus / "src.txt", "--alpha", 0.5, "--lambda", 3, "--top-m", 4,
               "--target", "both", "--trigger", "always", "--norm", "grad", "--max-len", 8,
               "--out", tmp_path / "o") == 0
    g = json.loads((tmp_path / "o" / "manifest.json").read_text())["guidance"]
    assert (g["alpha"], g["lam"], g["top_m"], g["update_target"], g["trigger_mode"], g["norm_mode"]) == (
        0.5, 3.0, 4, "both", "always", "grad_norm_sq")


def test_evaluate_identical_files(tmp_path, capsys):
    f = tmp_path / "h.txt"
    f.write_text("soy un chico calvo .\nhola , soy un medico .\n")
    assert run("evaluate", "--hyp", f, "--ref", f, "--out", tmp_path / "e") == 0
    rec = json.loads((tmp_path / "e" / "report.jsonl").read_text())
    assert rec["bleu"] == pytest.approx(100.0) and rec["chrf"] == pytest.approx(100.0)
    assert rec["etox_count"] == 0 and rec["language"] == "synthetic"
    assert "bleu = 100.0000" in capsys.readouterr().out


def test_evaluate_with_baseline_and_sources(tmp_path, corpus):
    run("translate", "--input", corpus / "src.txt", "--guidance", "off", "--out", tmp_path / "b")
    run("translate", "--input", corpus / "src.txt", "--out", tmp_path / "g")
    refs = tmp_path / "refs.txt"
    refs.write_text("creci con un jefe timido .\nsoy un medico alto .\nella esta casada con un jefe sordo .\n")
    assert run("evaluate", "--hyp", tmp_path / "g" / "translations.txt", "--ref", refs,
               "--src", corpus / "src.txt", "--baseline-hyp", tmp_path / "b" / "translations.txt",
               "--out", tmp_path / "e") == 0
    rec = json.loads((tmp_path / "e" / "report.jsonl").read_text())
    assert rec["reduction_pct"] == 100.0
    assert -1 <= rec["similarity"] <= 1 and rec["fluency_nll"] > 0
    table = (tmp_path / "e" / "report.txt").read_text()
    assert "language\tetox\treduction_pct" in table


def test_ablate_row_count(tmp_path, corpus):
    assert run("ablate", "--input", corpus / "small.jsonl", "--alpha", "0,1", "--target", "self,cross",
               "--trigger", "conditional", "--max-len", 20, "--out", tmp_path / "a") == 0
    rows = [json.loads(l) for l in (tmp_path / "a" / "ablation.jsonl").read_text().splitlines()]
    assert len(rows) == 4
    assert [(r["alpha"], r["target"]) for r in rows] == [(0.0, "self"), (0.0, "cross"), (1.0, "self"), (1.0, "cross")]
    tsv = (tmp_path / "a" / "ablation.tsv").read_text().splitlines()
    assert tsv[0].split("\t") == list(cli.ABLATE_COLUMNS) and len(tsv) == 5
    by = {(r["alpha"], r["target"]): r for r in rows}
    assert by[(1.0, "self")]["etox_count"] <= by[(0.0, "self")]["etox_count"]


def test_single_config_ablation_equals_translate_then_evaluate(tmp_path, corpus):
    run("ablate", "--input", corpus / "small.jsonl", "--alpha", "0.2", "--out", tmp_path / "a")
    row = json.loads((tmp_path / "a" / "ablation.jsonl").read_text())
    run("translate", "--input", corpus / "small.jsonl", "--out", tmp_path / "t")
    refs = tmp_path / "refs.txt"
    refs.write_text("".join(json.loads(l)["tgt"] + "\n" for l in (corpus / "small.jsonl").read_text().splitlines()))
    run("evaluate", "--hyp", tmp_path / "t" / "translations.txt", "--ref", refs, "--out", tmp_path / "e")
    rep = json.loads((tmp_path / "e" / "report.jsonl").read_text())
    assert (row["etox_count"], row["chrf"], row["bleu"]) == (rep["etox_count"], rep["chrf"], rep["bleu"])


def test_gradcheck_passes_and_reports(tmp_path, capsys):
    assert run("gradcheck", "--samples", 40, "--out", tmp_path / "g") == 0
    out = capsys.readouterr().out
    worst = float(out.split("worst = ")[1].split()[0])
    assert worst < 1e-4
    assert (tmp_path / "g" / "gradcheck.txt").read_text() == out


def test_gradcheck_alpha_zero_gradient_vanishes(capsys):
    assert run("gradcheck", "--samples", 10, "--alpha", 0) == 0
    out = capsys.readouterr().out
    assert float(out.split("grad_norm_at_unmodified_context = ")[1].split()[0]) < 1e-10


def test_gradcheck_gate_failure_exit_code(monkeypatch):
    monkeypatch.setattr(cli, "GRADCHECK_THRESHOLD", 0.0)
    assert run("gradcheck", "--samples", 10) == 3


def test_contract_errors_exit_1(tmp_path, corpus):
    assert run("translate", "--out", tmp_path / "x", "--alpha", 2, "--input", corpus / "src.txt") == 1
    assert run("translate", "--out", tmp_path / "x", "--beam", 0) == 1
    assert run("translate", "--out", tmp_path / "x", "--norm", "l2") == 1
    assert run("ablate", "--out", tmp_path / "x", "--target", "self,nowhere") == 1
    assert run("ablate", "--out", tmp_path / "x", "--input", corpus / "src.txt") == 1
    assert run("bogus") == 1
    assert not (tmp_path / "x").exists()


def test_io_errors_exit_2(tmp_path, corpus):
    assert run("translate", "--checkpoint", tmp_path / "none.weights", "--out", tmp_path / "x") == 2
    bad = tmp_path / "bad.weights"
    bad.write_bytes(b"not a checkpoint at all")
    assert run("gradcheck", "--checkpoint", bad) == 2
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"src": "i am"}\n')
    assert run("translate", "--input", broken, "--out", tmp_path / "x") == 2
    assert run("evaluate", "--hyp", tmp_path / "missing.txt", "--ref", corpus / "src.txt", "--out", tmp_path / "x") == 2
    assert not (tmp_path / "x").exists()


def test_translate_is_idempotent(tmp_path, corpus):
    def snapshot():
        return {p.name: p.read_bytes() for p in (tmp_path / "o").iterdir()}

    src_before = (corpus / "src.txt").read_bytes()
    run("translate", "--input", corpus / "src.txt", "--out", tmp_path / "o")
    first = snapshot()
    run("translate", "--input", corpus / "src.txt", "--out", tmp_path / "o")
    assert snapshot() == first
    run("translate", "--input", corpus / "src.txt", "--out", tmp_path / "o", "--workers", 3)
    threaded = snapshot()
    assert threaded.pop("translations.txt") == first["translations.txt"]
    assert threaded.pop("events.jsonl") == first["events.jsonl"]
    assert (corpus / "src.txt").read_bytes() == src_before
    assert [p.name for p in tmp_path.iterdir()] == ["o"]


def test_evaluate_is_idempotent(tmp_path):
    f = tmp_path / "h.txt"
    f.write_text("soy un chico calvo .\n")
    run("evaluate", "--hyp", f, "--ref", f, "--out", tmp_path / "e")
    a = {p.name: p.read_bytes() for p in (tmp_path / "e").iterdir()}
    run("evaluate", "--hyp", f, "--ref", f, "--out", tmp_path / "e")
    assert a == {p.name: p.read_bytes() for p in (tmp_path / "e").iterdir()}

