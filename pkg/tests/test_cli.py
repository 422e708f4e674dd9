import csv
import json

import numpy as np
import pytest

from reuselab.cli import main
from reuselab.model import checkpoint
from reuselab.similarity import read_capture

COPY_CFG = {
    "schema_version": 1,
    "task": {"kind": "copy", "vocab": 6, "seq_len": 9},
    "model": {"n_layers": 3, "n_heads": 2, "d_model": 16, "d_ff": 32},
    "train": {"steps": 12, "batch_size": 8, "log_every": 6, "eval_size": 16},
}


def _write(path, obj):
    path.write_text(json.dumps(obj, indent=2))
    return str(path)


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestCost:
    def test_table_row(self, tmp_path, capsys):
        base = _write(tmp_path / "b.json", {"schema_version": 1, "model": {
            "n_layers": 12, "n_heads": 12, "d_model": 768, "d_ff": 3072, "vocab_size": 30522, "max_len": 512}})
        reuse = json.loads((tmp_path / "b.json").read_text())
        reuse["model"]["schedule"] = {"variant": "full", "P": 6}
        reuse = _write(tmp_path / "r.json", reuse)
        code, out, _ = _run(["cost", "--config", reuse, "--baseline", base, "--n", 512], capsys)
        assert code == 0
        (row,) = csv.DictReader(out.splitlines())
        assert float(row["params_ratio"]) == pytest.approx(0.94, abs=0.01)
        assert float(row["flops_ratio"]) == pytest.approx(0.90, abs=0.01)

    def test_sweep_json(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.json", COPY_CFG)
        code, out, _ = _run(["cost", "--config", cfg, "--sweep-k", "0..2", "--n", 9, "--format", "json",
                             "--out", tmp_path / "o"], capsys)
        assert code == 0
        rows = json.loads((tmp_path / "o" / "cost.json").read_text())
        assert [r["name"] for r in rows] == ["K=0", "K=1", "K=2"]
        assert (tmp_path / "o" / "manifest.json").exists()


class TestConfigErrors:
    def test_unknown_key_has_line(self, tmp_path, capsys):
        bad = dict(COPY_CFG, train={"steps": 1, "learning_rate": 0.1})
        cfg = _write(tmp_path / "bad.json", bad)
        code, _, err = _run(["train", "--config", cfg, "--seed", 0, "--out", tmp_path / "o"], capsys)
        assert code == 2
        assert "bad.json:" in err and "learning_rate" in err
        line = int(err.split("bad.json:")[1].split(":")[0])
        assert "learning_rate" in (tmp_path / "bad.json").read_text().splitlines()[line - 1]

    def test_schema_version(self, tmp_path, capsys):
        cfg = _write(tmp_path / "v.json", dict(COPY_CFG, schema_version=2))
        code, _, err = _run(["train", "--config", cfg, "--seed", 0, "--out", tmp_path / "o"], capsys)
        assert code == 2 and "schema_version" in err

    def test_invalid_schedule(self, tmp_path, capsys):
        bad = json.loads(json.dumps(COPY_CFG))
        bad["model"]["schedule"] = {"variant": "full", "P": 7}
        cfg = _write(tmp_path / "s.json", bad)
        code, _, err = _run(["train", "--config", cfg, "--seed", 0, "--out", tmp_path / "o"], capsys)
        assert code == 2 and "P" in err

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = _run(["cost", "--config", tmp_path / "none.json"], capsys)
        assert code == 2 and "not found" in err

    def test_seed_required(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.json", COPY_CFG)
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
        assert exc.value.code == 2


class TestTrainAndSimilarity:
    def test_pipeline(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.json", COPY_CFG)
        code, _, _ = _run(["train", "--config", cfg, "--seed", 3, "--out", tmp_path / "run"], capsys)
        assert code == 0
        ck = checkpoint.load(tmp_path / "run" / "checkpoint.ratt")
        assert ck.step == 12 and ck.seed == 3
        metrics = [json.loads(line) for line in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
        assert [m["step"] for m in metrics] == [6, 12]
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["seeds"]["seed"] == 3 and "checkpoint.ratt" in manifest["artifacts"]

        corpus = np.random.default_rng(0).integers(0, 6, size=(10, 9))
        (tmp_path / "probe.txt").write_text("\n".join(" ".join(map(str, r)) for r in corpus) + "\n")
        code, _, _ = _run(["similarity", "--checkpoint", tmp_path / "run" / "checkpoint.ratt",
                           "--corpus", tmp_path / "probe.txt", "--convergence", "5,10",
                           "--dump-capture", "--out", tmp_path / "sim"], capsys)
        assert code == 0
        rep = json.loads((tmp_path / "sim" / "similarity.json").read_text())
        assert rep["T"] == 10 and np.allclose(np.diag(rep["all_pairs"]), 1.0)
        for name in ("all_pairs.csv", "adjacent_profiles.csv", "all_pairs.svg", "all_pairs_T5.svg"):
            assert (tmp_path / "sim" / name).exists()

        cap = read_capture(tmp_path / "sim" / "capture.bin")
        assert cap.scores.shape == (10, 3, 2, 9, 9)
        code, _, _ = _run(["similarity", "--capture-file", tmp_path / "sim" / "capture.bin",
                           "--out", tmp_path / "sim2"], capsys)
        assert code == 0
        assert (tmp_path / "sim" / "all_pairs.csv").read_text() == (tmp_path / "sim2" / "all_pairs.csv").read_text()

    def test_training_deterministic(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.json", COPY_CFG)
        for d in ("a", "b"):
            assert _run(["train", "--config", cfg, "--seed", 1, "--out", tmp_path / d], capsys)[0] == 0
        a = (tmp_path / "a" / "checkpoint.ratt").read_bytes()
        assert a == (tmp_path / "b" / "checkpoint.ratt").read_bytes()

    def test_corpus_too_long(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.json", dict(COPY_CFG, train={"steps": 1}))
        _run(["train", "--config", cfg, "--seed", 0, "--out", tmp_path / "run"], capsys)
        (tmp_path / "long.txt").write_text(" ".join(["1"] * 20) + "\n")
        code, _, err = _run(["similarity", "--checkpoint", tmp_path / "run" / "checkpoint.ratt",
                             "--corpus", tmp_path / "long.txt", "--out", tmp_path / "s"], capsys)
        assert code == 2 and "max_len" in err

    def test_similarity_needs_input(self, tmp_path, capsys):
        code, _, err = _run(["similarity", "--out", tmp_path / "s"], capsys)
        assert code == 2

    def test_sweep(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.json", COPY_CFG)
        code, _, _ = _run(["sweep", "--config", cfg, "--seed", 0, "--k", "0,1,2", "--steps", 3,
                           "--out", tmp_path / "sw"], capsys)
        assert code == 0
        rows = list(csv.DictReader((tmp_path / "sw" / "sweep.csv").read_text().splitlines()))
        assert [int(r["K"]) for r in rows] == [0, 1, 2]


class TestTheoryAndGradcheck:
    def test_lemma1(self, tmp_path, capsys):
        code, out, _ = _run(["theory", "lemma1", "--seed", 2, "--samples", 3000, "--out", tmp_path / "t"], capsys)
        assert code == 0
        rep = json.loads((tmp_path / "t" / "lemma1.json").read_text())
        assert {r["distribution"] for r in rep["results"]} == {"gaussian", "rademacher"}

    def test_lemma2(self, tmp_path, capsys):
        code, _, _ = _run(["theory", "lemma2", "--seed", 2, "--trials", 5, "--epsilon", "0,0.1",
                           "--out", tmp_path / "t"], capsys)
        assert code == 0
        assert (tmp_path / "t" / "epsilon_sweep.csv").read_text().startswith("epsilon_target")

    def test_lemma2_unreachable(self, tmp_path, capsys):
        code, _, err = _run(["theory", "lemma2", "--seed", 2, "--trials", 1, "--epsilon", "3"], capsys)
        assert code == 2

    def test_gradcheck_pass_and_fail(self, capsys):
        assert _run(["gradcheck", "--seed", 0, "--schedule", "skip"], capsys)[0] == 0
        assert _run(["gradcheck", "--seed", 0, "--schedule", "baseline", "--corrupt-gradient"], capsys)[0] == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
