import csv
import json
import math
import time

import numpy as np
import pytest

from cagpy.cli import (DIAGNOSE_DEFAULTS, EXIT_DIVERGED, EXIT_ERROR, EXIT_OK, RunConfig, load_run_config, main,
                       parse_config_text)
from cagpy.errors import ConfigError, ParseError
from cagpy.trainer import load_checkpoint, read_records


def write(path, text):
    path.write_text(text)
    return str(path)


def small_run(tmp_path, **extra):
    lines = {"synth_n": 80, "budget_i": 6, "epochs": 5, "out": str(tmp_path / "run")}
    lines.update(extra)
    return write(tmp_path / "run.cfg", "".join(f"{k} = {v}\n" for k, v in lines.items()))


class TestConfigGrammar:
    def test_comments_blank_lines_and_types(self):
        got = parse_config_text("# header\n\nepochs = 12   # trailing\nlr=0.05\nard = false\nmethod = exact\n")
        assert got == {"epochs": 12, "lr": 0.05, "ard": False, "method": "exact"}

    @pytest.mark.parametrize("text,row", [("epochs 3\n", 1), ("seed = 1\nbogus = 2\n", 2),
                                          ("seed = 1\n\nseed = 2\n", 3)])
    def test_structural_errors_carry_the_line(self, text, row):
        with pytest.raises(ParseError) as info:
            parse_config_text(text)
        assert info.value.row == row

    @pytest.mark.parametrize("text", ["epochs = 1.5\n", "lr = abc\n", "lr = nan\n", "ard = maybe\n"])
    def test_bad_values(self, text):
        with pytest.raises(ParseError):
            parse_config_text(text)

    def test_dumps_round_trip(self):
        cfg = RunConfig(epochs=7, ard=False, loss="projected_nll", lr=0.25)
        assert RunConfig(**parse_config_text(cfg.dumps())) == cfg

    def test_layering(self, tmp_path):
        path = write(tmp_path / "c.cfg", "epochs = 9\nbudget_i = 4\n")
        cfg = load_run_config(path, {"epochs": 3, "seed": None}, base={"budget_i": 2, "synth_n": 50})
        assert (cfg.epochs, cfg.budget_i, cfg.synth_n, cfg.seed) == (3, 4, 50, 0)

    @pytest.mark.parametrize("over", [{"alpha": 1.0}, {"method": "exact", "loss": "elbo"},
                                      {"dataset": "/nonexistent.csv"}, {"lr": -1.0}])
    def test_semantic_errors(self, over):
        with pytest.raises(ConfigError):
            load_run_config(None, over)


class TestTrain:
    def test_outputs(self, tmp_path, capsys):
        assert main(["train", "--config", small_run(tmp_path)]) == EXIT_OK
        out = tmp_path / "run"
        recs = read_records(out / "records.jsonl")
        assert [r.epoch for r in recs] == list(range(5))
        line = json.loads((out / "records.jsonl").read_text().splitlines()[0])
        assert set(line) == {"epoch", "loss", "params", "test_nll", "test_rmse", "wallclock_s"}
        assert set(line["params"]) == {"log_outputscale", "log_lengthscales", "log_noise"}
        final = json.loads((out / "final.eval.json").read_text())
        assert final["epochs_run"] == 5 and final["diverged_at"] is None
        assert math.isfinite(final["test_nll"]) and 0 <= final["coverage_error_95"] <= 1
        assert json.loads(capsys.readouterr().out)["n_test"] == final["n_test"] == 8
        assert RunConfig(**parse_config_text((out / "run.cfg").read_text())).epochs == 5
        with open(out / "checkpoint.bin", "rb") as fh:
            assert load_checkpoint(fh)["epoch"] == 5

    def test_flags_override_file(self, tmp_path):
        assert main(["train", "--config", small_run(tmp_path), "--epochs", "2", "--method", "exact"]) == EXIT_OK
        final = json.loads((tmp_path / "run" / "final.eval.json").read_text())
        assert final["epochs_run"] == 2 and final["method"] == "exact" and final["loss"] == "exact_nll"

    def test_zero_epochs(self, tmp_path):
        assert main(["train", "--config", small_run(tmp_path, epochs=0)]) == EXIT_OK
        assert (tmp_path / "run" / "records.jsonl").read_text() == ""
        assert math.isfinite(json.loads((tmp_path / "run" / "final.eval.json").read_text())["test_nll"])

    def test_malformed_config(self, tmp_path, capsys):
        path = write(tmp_path / "bad.cfg", "epochs = 3\nthis line is wrong\n")
        assert main(["train", "--config", path]) == EXIT_ERROR
        assert "bad.cfg:2" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == EXIT_ERROR

    def test_divergence_exit_code(self, tmp_path):
        assert main(["train", "--config", small_run(tmp_path), "--lr", "1000", "--epochs", "30"]) == EXIT_DIVERGED
        final = json.loads((tmp_path / "run" / "final.eval.json").read_text())
        assert final["diverged_at"] is not None

    def test_csv_dataset(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.uniform(size=(60, 2))
        rows = "\n".join(f"{a},{b},{math.sin(4 * a) + 0.1 * c}" for (a, b), c in zip(X, rng.standard_normal(60)))
        data = write(tmp_path / "d.csv", "a,b,target\n" + rows + "\n")
        code = main(["train", "--config", small_run(tmp_path), "--dataset", data, "--target-col", "target"])
        assert code == EXIT_OK
        assert json.loads((tmp_path / "run" / "final.eval.json").read_text())["n_test"] == 6

    def test_default_run_budget(self, tmp_path):
        t0 = time.perf_counter()
        code = main(["train", "--out", str(tmp_path / "r"), "--method", "cagp_opt", "--budget-i", "16",
                     "--epochs", "300"])
        assert code == EXIT_OK and time.perf_counter() - t0 < 120
        final = json.loads((tmp_path / "r" / "final.eval.json").read_text())
        assert math.isfinite(final["test_nll"]) and final["n_test"] == 512 - round(0.9 * 512)


class TestEval:
    def test_round_trip_matches_final(self, tmp_path):
        cfg = small_run(tmp_path)
        assert main(["train", "--config", cfg]) == EXIT_OK
        assert main(["eval", "--config", cfg]) == EXIT_OK
        final = json.loads((tmp_path / "run" / "final.eval.json").read_text())
        again = json.loads((tmp_path / "run" / "eval.json").read_text())
        for key in ("test_nll", "test_rmse", "coverage_error_95", "n_test", "params"):
            assert again[key] == final[key]

    def test_dataset_mismatch(self, tmp_path):
        cfg = small_run(tmp_path)
        assert main(["train", "--config", cfg]) == EXIT_OK
        assert main(["eval", "--config", cfg, "--seed", "1"]) == EXIT_ERROR


class TestVerify:
    @pytest.mark.parametrize("suite", ["lemma-s1", "prop-s1-monotonicity", "all"])
    def test_suites_pass(self, suite, capsys):
        assert main(["verify", suite]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out and "checks passed" in out

    def test_unknown_suite(self, capsys):
        assert main(["verify", "nope"]) == EXIT_ERROR
        assert "unknown suite" in capsys.readouterr().err


class TestDiagnose:
    def read(self, path):
        with open(path) as fh:
            return list(csv.DictReader(fh))

    def test_rows_per_epoch_and_policy(self, tmp_path):
        out = tmp_path / "d"
        assert main(["diagnose-policies", "--out", str(out), "--epochs", "6"]) == EXIT_OK
        rows = self.read(out / "policy_distances.csv")
        assert len(rows) == 18
        assert {(int(r["epoch"]), r["policy"]) for r in rows} == {(e, p) for e in range(6)
                                                                  for p in ("cg", "random", "opt")}
        assert all(0 <= float(r["distance"]) <= math.sqrt(8) * math.pi / 2 + 1e-9 for r in rows)

    def test_full_budget_spans_everything(self, tmp_path):
        cfg = write(tmp_path / "c.cfg", "synth_n = 20\ntrain_fraction = 1.0\nbudget_i = 20\nepochs = 2\n")
        out = tmp_path / "d"
        assert main(["diagnose-policies", "--config", cfg, "--out", str(out)]) == EXIT_OK
        for r in self.read(out / "policy_distances.csv"):
            if r["policy"] in ("random", "opt"):
                assert float(r["distance"]) < 1e-6

    def test_uses_diagnostic_defaults(self):
        cfg = load_run_config(None, {}, DIAGNOSE_DEFAULTS)
        assert (cfg.synth_n, cfg.synth_d, cfg.budget_i, cfg.epochs) == (200, 2, 8, 50)

    def test_cap_exceeded(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.cfg", "synth_n = 5000\ntrain_fraction = 1.0\nepochs = 1\n")
        assert main(["diagnose-policies", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_ERROR
        assert "cap" in capsys.readouterr().err
