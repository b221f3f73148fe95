"""Command-line interface: outputs, exit codes, schemas and golden files."""

import json
import os
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from fpkit.cli import load_schema, main
from fpkit.evalcore import EvalSet, write_evalset
from oracles import calibrated_logits

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"
FOUR = str(DATA / "four_rows.csv")
GMM = str(DATA / "gmm_1d.json")

TRAIN_ARGS = ["train", "--method", "fmfp", "--dataset", "two_moons", "--seed", "7", "--epochs", "8",
              "--n-train", "120", "--n-test", "60", "--label-noise", "0.1"]
SIM_ARGS = ["simulate", "--spec", GMM, "--sweep", "--grid", "0.5:1:11", "--n-mc", "20000", "--seed", "3",
            "--shards", "2"]


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestEvaluate:
    def test_two_reports(self, capsys):
        code, out, err = run(capsys, ["evaluate", FOUR, "--scores", "msp,energy"])
        assert code == 0
        doc = json.loads(out)
        assert [r["score_kind"] for r in doc["reports"]] == ["msp", "energy"]
        assert doc["log_base"] == "natural"
        jsonschema.validate(doc, load_schema("report"))
        assert '"command": "evaluate"' in err

    def test_x1000(self, capsys):
        _, plain, _ = run(capsys, ["evaluate", FOUR, "--scores", "msp,margin"])
        _, scaled, _ = run(capsys, ["evaluate", FOUR, "--scores", "msp,margin", "--x1000"])
        for a, b in zip(json.loads(plain)["reports"], json.loads(scaled)["reports"]):
            assert b["aurc"] == 1000 * a["aurc"]
            assert b["e_aurc"] == 1000 * a["e_aurc"]
            assert b["auroc"] == a["auroc"]

    def test_missing_file(self, capsys):
        code, out, err = run(capsys, ["evaluate", str(DATA / "nope.csv")])
        assert code == 2 and out == "" and "error" in err

    def test_malformed_reports_line(self, capsys):
        code, _, err = run(capsys, ["evaluate", str(DATA / "malformed.csv")])
        assert code == 2 and "line 3" in err

    def test_degenerate_gives_nulls(self, capsys, tmp_path):
        path = tmp_path / "all_right.csv"
        write_evalset(EvalSet(np.array([[2.0, 0.0], [0.0, 1.0]]), np.array([0, 1])), path)
        code, out, _ = run(capsys, ["evaluate", str(path)])
        assert code == 0
        rep = json.loads(out)["reports"][0]
        assert rep["auroc"] is None and "DegenerateLabels" in rep["null_reasons"]["auroc"]

    def test_unknown_flag_and_score(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["evaluate", FOUR, "--bogus"])
        assert info.value.code == 2
        code, _, _ = run(capsys, ["evaluate", FOUR, "--scores", "doctor_none"])
        assert code == 2

    def test_threads_keep_order(self, capsys, monkeypatch):
        _, serial, _ = run(capsys, ["evaluate", FOUR, "--scores", "energy,msp,max_logit,odin_t"])
        monkeypatch.setenv("FPKIT_THREADS", "4")
        _, parallel, _ = run(capsys, ["evaluate", FOUR, "--scores", "energy,msp,max_logit,odin_t"])
        assert serial == parallel


class TestOtherCommands:
    def test_rc_curve(self, capsys):
        code, out, _ = run(capsys, ["rc-curve", FOUR])
        lines = out.splitlines()
        assert code == 0 and lines[0] == "coverage,risk" and len(lines) == 5

    def test_fit_temperature_calibrated(self, capsys, tmp_path):
        z, y, _ = calibrated_logits(20_000, 5, np.random.default_rng(0))
        path = tmp_path / "holdout.csv"
        write_evalset(EvalSet(z, y), path)
        out_csv = tmp_path / "scaled.csv"
        code, out, _ = run(capsys, ["fit-temperature", str(path), "--apply", str(path),
                                    "--apply-output", str(out_csv)])
        assert code == 0
        doc = json.loads(out)
        jsonschema.validate(doc, load_schema("temperature"))
        assert 0.95 <= doc["T"] <= 1.05
        assert doc["fit_split"] == "holdout.csv"
        assert out_csv.read_text().startswith("l0,l1,l2,l3,l4,label\n")

    def test_decompose(self, capsys, tmp_path):
        q = np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
        logits = tmp_path / "l.csv"
        write_evalset(EvalSet(np.log(q), np.array([0, 1, 1])), logits)
        post = tmp_path / "q.csv"
        post.write_text("q0,q1\n" + "\n".join(f"{a},{b}" for a, b in q) + "\n")
        code, out, _ = run(capsys, ["decompose", str(logits), "--rule", "brier", "--posterior", str(post)])
        assert code == 0
        doc = json.loads(out)
        jsonschema.validate(doc, load_schema("decomposition"))
        assert doc["total"] == pytest.approx(doc["calibration_term"] + doc["grouping"] + doc["aleatoric"])

    def test_decompose_rejects_focal(self):
        with pytest.raises(SystemExit):
            main(["decompose", FOUR, "--rule", "focal"])

    def test_simulate_summary(self, capsys):
        code, out, _ = run(capsys, ["simulate", "--spec", GMM, "--n-mc", "5000"])
        assert code == 0
        doc = json.loads(out)
        jsonschema.validate(doc, load_schema("simulate"))
        assert doc["chow_region"]["intervals"][0][1] == pytest.approx(0.6931471805599453)

    def test_simulate_sweep_header(self, capsys):
        code, out, _ = run(capsys, SIM_ARGS)
        assert code == 0 and out.splitlines()[0] == "delta,fp_risk,fp_stderr,ood_risk,ood_stderr"

    def test_mixture_schema(self):
        jsonschema.validate(json.loads(Path(GMM).read_text()), load_schema("mixture"))

    def test_bad_spec(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"classes": [{"mean": [0], "variance": -1, "prior": 1}], "ood": {"kind": "uniform", '
                       '"low": [-1], "high": [1]}}')
        code, _, err = run(capsys, ["simulate", "--spec", str(bad)])
        assert code == 2 and "variances" in err

    def test_train_outputs(self, capsys, tmp_path):
        code, _, err = run(capsys, TRAIN_ARGS + ["--out-dir", str(tmp_path)])
        assert code == 0
        assert {p.name for p in tmp_path.iterdir()} == {"model.json", "test_logits.csv", "history.csv",
                                                       "config.json"}
        cfg = json.loads(err.splitlines()[0])["config"]["train"]
        assert cfg["sam_rho"] == 0.05 and cfg["swa_start"] == 4
        code, out, _ = run(capsys, ["evaluate", str(tmp_path / "test_logits.csv")])
        assert code == 0 and json.loads(out)["n"] == 60

    def test_train_diverged_exit(self, capsys, tmp_path):
        code, _, err = run(capsys, ["train", "--epochs", "3", "--lr", "1e8", "--momentum", "0",
                                    "--out-dir", str(tmp_path)])
        assert code == 4 and "non-finite" in err

    def test_train_invalid_config(self, capsys, tmp_path):
        code, _, _ = run(capsys, ["train", "--method", "sam", "--sam-rho", "0", "--out-dir", str(tmp_path)])
        assert code == 2

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "fpkit.cli", "evaluate", FOUR], capture_output=True,
                              text=True, env={**os.environ, "FPKIT_THREADS": "1"})
        assert proc.returncode == 0 and json.loads(proc.stdout)["reports"][0]["score_kind"] == "msp"


def train_outputs(capsys, out_dir: Path) -> dict[str, str]:
    assert main(TRAIN_ARGS + ["--out-dir", str(out_dir)]) == 0
    capsys.readouterr()
    return {name: (out_dir / name).read_text() for name in ("history.csv", "test_logits.csv", "model.json")}


class TestGolden:
    def test_evaluate(self, capsys):
        _, out, _ = run(capsys, ["evaluate", FOUR, "--scores", "msp,energy,margin", "--x1000"])
        assert out == (GOLDEN / "evaluate_four_rows.json").read_text()

    def test_simulate(self, capsys):
        _, out, _ = run(capsys, SIM_ARGS)
        assert out == (GOLDEN / "simulate_sweep.csv").read_text()

    def test_train(self, capsys, tmp_path):
        got = train_outputs(capsys, tmp_path)
        assert got["history.csv"] == (GOLDEN / "train_history.csv").read_text()

    def test_runs_byte_identical(self, capsys, tmp_path):
        a = train_outputs(capsys, tmp_path / "a")
        b = train_outputs(capsys, tmp_path / "b")
        assert a == b
        assert run(capsys, SIM_ARGS)[1] == run(capsys, SIM_ARGS)[1]
