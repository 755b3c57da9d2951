import csv
import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from vcmm import cli, simgen


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logging.disable(logging.NOTSET)


def run(*args):
    return cli.main([str(a) for a in args])


def read_json(path):
    return json.loads(path.read_text())


def grid_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestGenerate:
    def test_files(self, tmp_path):
        assert run("generate", "--example", 1, "--seed", 7, "--k", 4, "--out", tmp_path, "--quiet") == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["part_000.csv", "part_001.csv", "part_002.csv", "part_003.csv", "truth.json"]
        assert read_json(tmp_path / "truth.json")["scenario"]["seed"] == 7

    @pytest.mark.parametrize("fmt", ["text", "binary"])
    def test_byte_identical_reruns(self, tmp_path, fmt):
        for d in ("a", "b"):
            assert run("--quiet", "generate", "--example", 3, "--n", 500, "--seed", 7, "--format", fmt, "--out", tmp_path / d) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_invalid_example(self, tmp_path, capsys):
        assert run("generate", "--example", 9, "--out", tmp_path) == 2
        assert "--example" in capsys.readouterr().err

    def test_non_numeric_flag(self, tmp_path, capsys):
        assert run("generate", "--n", "many", "--out", tmp_path) == 2
        assert "--n" in capsys.readouterr().err

    def test_out_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VCMM_OUT", str(tmp_path / "env"))
        assert run("--quiet", "generate", "--n", 100) == 0
        assert (tmp_path / "env" / "truth.json").exists()


class TestFit:
    def test_ss_against_direct(self, tmp_path):
        code = run("--quiet", "fit", "--example", 1, "--seed", 3, "--method", "ss", "--reference", "direct", "--out", tmp_path)
        assert code == 0
        doc = read_json(tmp_path / "fit.json")
        assert doc["reference"]["method"] == "direct"
        assert doc["reference"]["correlation"]["beta1"] >= 0.99
        assert doc["reference"]["correlation"]["alpha"] >= 0.99
        assert "train_mse_beta1" in doc["metrics"]
        rows = grid_rows(tmp_path / "beta_grid.csv")
        assert rows[0] == ["h1", "beta0", "beta0_lower", "beta0_upper", "beta1", "beta1_lower", "beta1_upper"]
        assert len(rows) == 1001
        v = np.array(rows[1:], dtype=float)
        assert np.all(v[:, 5] <= v[:, 4]) and np.all(v[:, 4] <= v[:, 6])

    def test_dataset_directory(self, tmp_path):
        run("--quiet", "generate", "--example", 1, "--seed", 2, "--format", "binary", "--out", tmp_path / "data")
        assert run("--quiet", "fit", "--data", tmp_path / "data", "--out", tmp_path / "a", "--lam", 0.01) == 0
        assert run("--quiet", "fit", "--seed", 2, "--out", tmp_path / "b", "--lam", 0.01) == 0
        a, b = read_json(tmp_path / "a" / "fit.json"), read_json(tmp_path / "b" / "fit.json")
        assert a["fit"]["beta"] == b["fit"]["beta"]

    def test_dataset_without_truth_needs_basis(self, tmp_path, capsys):
        run("--quiet", "generate", "--n", 200, "--out", tmp_path / "data")
        (tmp_path / "data" / "truth.json").unlink()
        assert run("--quiet", "fit", "--data", tmp_path / "data", "--out", tmp_path / "o") == 2
        assert "--basis" in capsys.readouterr().err
        simgen.scenario_basis(simgen.ScenarioSpec()).save(tmp_path / "basis.json")
        code = run("--quiet", "fit", "--data", tmp_path / "data", "--basis", tmp_path / "basis.json", "--out", tmp_path / "o")
        assert code == 0
        assert "metrics" not in read_json(tmp_path / "o" / "fit.json")

    def test_onestep_mode_within_budget(self, tmp_path):
        code = run("--quiet", "fit", "--example", 3, "--n", 4000, "--method", "onestep", "--mode", "onestep",
                   "--budget-c", 8, "--lam", 0.01, "--record", "--out", tmp_path)
        assert code == 0
        led = read_json(tmp_path / "ledger.json")
        assert led["budget"]["passed"] is True
        d = led["ledger"]["d"]
        assert all(v["scalars"] == d + 1 for v in led["budget"]["nodes"].values())
        assert read_json(tmp_path / "fit.json")["budget_passed"] is True
        assert len(list((tmp_path / "messages").iterdir())) == 1 + 8 * 4

    def test_summary_mode_flags_budget(self, tmp_path):
        code = run("--quiet", "fit", "--example", 3, "--n", 2000, "--mode", "summary", "--lam", 0.01, "--out", tmp_path)
        assert code == 0
        assert read_json(tmp_path / "ledger.json")["budget"]["passed"] is False

    def test_svd_full_equals_ss(self, tmp_path):
        for m, extra in (("ss", []), ("svd", ["--svd", "full"])):
            assert run("--quiet", "fit", "--seed", 4, "--method", m, *extra, "--out", tmp_path / m) == 0
        a, b = (read_json(tmp_path / m / "fit.json")["fit"] for m in ("ss", "svd"))
        for key in ("beta", "alpha"):
            x, y = np.array(a[key]), np.array(b[key])
            assert np.max(np.abs(x - y)) <= 1e-10 * np.max(np.abs(x))
        assert b["sigma2_eps"] == pytest.approx(a["sigma2_eps"], rel=1e-10)

    def test_non_convergence_still_writes_reports(self, tmp_path):
        assert run("--quiet", "fit", "--max-iter", 1, "--lam", 0.01, "--out", tmp_path) == 3
        assert read_json(tmp_path / "fit.json")["fit"]["converged"] is False
        assert (tmp_path / "beta_grid.csv").exists() and (tmp_path / "metrics.csv").exists()

    def test_numerical_failure(self, tmp_path, capsys):
        # a 5-row pivot with no penalty cannot identify 38 coefficients
        assert run("--quiet", "fit", "--n", 40, "--k", 8, "--method", "onestep", "--lam", 0, "--out", tmp_path) == 4
        assert "singular" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "args,flag",
        [(["--method", "newton"], "--method"), (["--mode", "onestep"], "--mode"), (["--svd", "qr"], "--svd"),
         (["--lam", "-1"], "--lam"), (["--variance-update", "sometimes"], "--variance-update")],
    )
    def test_validation(self, tmp_path, capsys, args, flag):
        assert run("fit", *args, "--out", tmp_path) == 2
        assert flag in capsys.readouterr().err


class TestConfig:
    def test_file_then_flags(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"seed": 1, "quiet": True, "fit": {"method": "svd", "lam": 0.05, "seed": 2}}))
        ns = cli.build_parser().parse_args(["--config", str(conf), "fit", "--seed", "3"])
        cfg = cli.resolve_config("fit", ns)
        assert cfg["seed"] == 3 and cfg["method"] == "svd" and cfg["lam"] == 0.05 and cfg["quiet"] is True
        ns = cli.build_parser().parse_args(["fit", "--config", str(conf)])
        assert cli.resolve_config("fit", ns)["seed"] == 2

    SAMPLES = dict(out="o", n=500, k=4, q=20, levels=[5, 5], data="d", basis="b.json", reference="direct",
                   mode="summary", svd="full", svd_rank=3, svd_tau=1e-8, variance_update="fixed", max_iter=5,
                   tol_grad=1e-6, tol_param=1e-9, pivot_node=1, gibbs_iter=10, gibbs_burn_in=2, lam=0.1)

    def test_every_flag_has_a_config_key(self, tmp_path):
        for opt in cli.OPTIONS:
            for cmd in opt.commands:
                value = self.SAMPLES.get(opt.name, opt.default)
                if isinstance(value, bool):
                    value = not value
                conf = tmp_path / "c.json"
                conf.write_text(json.dumps({cmd: {opt.name: value}}))
                argv = ["--config", str(conf), cmd] + (["x.vcm"] if cmd == "inspect" else [])
                cfg = cli.resolve_config(cmd, cli.build_parser().parse_args(argv))
                assert cfg[opt.name] == value

    @pytest.mark.parametrize(
        "doc", [{"bogus": 1}, {"fit": {"reps": 3}}, {"fit": 5}, [1, 2]], ids=["top", "wrong-section", "not-object", "list"]
    )
    def test_unknown_keys_rejected(self, tmp_path, capsys, doc):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps(doc))
        assert run("--config", conf, "fit", "--out", tmp_path) == 2
        assert "--config" in capsys.readouterr().err

    def test_no_cv_flag(self, tmp_path):
        cfg = cli.resolve_config("fit", cli.build_parser().parse_args(["fit", "--no-cv"]))
        assert cfg["cv"] is False


class TestReplicate:
    def test_single_rep_equals_report(self, tmp_path):
        code = run("--quiet", "replicate", "--example", 1, "--n", 400, "--seed", 5, "--reps", 1,
                   "--methods", "direct,ss", "--out", tmp_path)
        assert code == 0
        summ = read_json(tmp_path / "summary.json")
        _, reports = simgen.replicate_one(simgen.ScenarioSpec(example=1, N=400, seed=5), ["direct", "ss"])
        for m in ("direct", "ss"):
            for key, val in reports[m].scalars().items():
                if key != "elapsed":
                    assert summ["summary"][key][m] == pytest.approx([float(val), 0.0], rel=1e-12, abs=1e-300)
        rows = grid_rows(tmp_path / "table.csv")
        assert rows[0] == ["metric", "direct", "ss"]

    def test_prints_table(self, tmp_path, capsys):
        assert run("replicate", "--n", 300, "--reps", 2, "--methods", "ss", "--out", tmp_path) == 0
        assert "metric" in capsys.readouterr().out


class TestInspect:
    def test_message_and_partition(self, tmp_path, capsys):
        run("--quiet", "fit", "--n", 400, "--method", "onestep", "--mode", "onestep", "--lam", 0.01, "--record",
            "--out", tmp_path / "f")
        run("--quiet", "generate", "--n", 100, "--format", "binary", "--out", tmp_path / "g")
        capsys.readouterr()
        msg = sorted((tmp_path / "f" / "messages").iterdir())[1]
        assert run("inspect", msg, tmp_path / "g" / "part_000.vpt", "--full") == 0
        out = capsys.readouterr().out
        docs = json.loads("[" + out.replace("}\n{", "},\n{") + "]")
        assert docs[0]["kind"] == "THETA_BROADCAST" and len(docs[0]["payload"]) == docs[0]["n_scalars"]
        assert docs[1]["type"] == "partition" and len(docs[1]["rows"]) == docs[1]["n"]

    def test_unknown_file(self, tmp_path, capsys):
        (tmp_path / "x").write_bytes(b"nope")
        assert run("inspect", tmp_path / "x") == 2
        assert "magic" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vcmm.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "replicate" in proc.stdout
