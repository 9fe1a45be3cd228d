import csv
import json
import math

import numpy as np
import pytest

from riskctmdp.cli import main, read_policy_csv
from riskctmdp.config import ConfigError, compile_expression, fixture_path, load_config


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fixture_doc(name):
    return json.loads(fixture_path(name).read_text())


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_solve_constant_cost(tmp_path, capsys):
    assert main(["solve", "--fixture", "constant_cost", "--out", str(tmp_path)]) == 0
    value = rows(tmp_path / "value.csv")
    assert len(value) == 201 * 3
    for r in value:
        assert float(r["phi"]) == pytest.approx(math.exp(float(r["theta"]) * 0.5), rel=1e-4)
    report = dict((r["key"], r["value"]) for r in rows(tmp_path / "report.csv"))
    assert report["upper_bound_violations"] == "0" and report["n_converged"] == "true"


def test_certify_gaussian(tmp_path, capsys):
    assert main(["certify", "--fixture", "gaussian", "--out", str(tmp_path)]) == 0
    cert = {r["name"]: float(r["value"]) for r in rows(tmp_path / "certificate.csv")}
    assert cert["rho2"] == pytest.approx(0.9072, rel=1e-12)
    assert cert["M1"] == 2.0
    assert rows(tmp_path / "violations.csv") == []
    assert "rho2" in capsys.readouterr().out


def test_certify_failure_exit_code(tmp_path):
    doc = fixture_doc("two_state")
    doc["certificate"]["L0"] = 0.1
    assert main(["certify", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "o")]) == 1
    assert {r["check_id"] for r in rows(tmp_path / "o" / "violations.csv")} == {"cost_bound"}


@pytest.mark.slow
def test_verify_two_state(tmp_path):
    assert main(["verify", "--fixture", "two_state", "--out", str(tmp_path), "--threads", "4"]) == 0
    report = rows(tmp_path / "verify.csv")
    assert list(report[0]) == ["check_id", "lhs", "rhs", "margin", "passed"]
    assert all(r["passed"] == "true" for r in report)
    ids = [r["check_id"] for r in report]
    assert "oracle_minimizer" in ids and "fk_optimal:x0=1" in ids
    assert sum(i.startswith("fk_infimum:x0=0") for i in ids) == 20


def test_simulate_and_policy_round_trip(tmp_path, capsys):
    assert main(["solve", "--fixture", "two_state", "--out", str(tmp_path)]) == 0
    policy = read_policy_csv(tmp_path / "value.csv", 2)
    assert policy.actions.shape == (201, 2)
    args = ["simulate", "--fixture", "two_state", "--policy", str(tmp_path / "value.csv"), "--num-traj", "2000"]
    assert main(args + ["--out", str(tmp_path / "a"), "--dump"]) == 0
    est = rows(tmp_path / "a" / "estimate.csv")[0]
    assert float(est["j_log"]) == pytest.approx(math.log(float(est["estimate"])), rel=1e-12)
    dump = rows(tmp_path / "a" / "trajectories.csv")
    assert len(dump) == 2000
    samples = np.exp([float(r["cost_integral"]) for r in dump])
    assert samples.mean() == pytest.approx(float(est["estimate"]), rel=1e-12)


def test_simulate_truncated_mode(tmp_path):
    args = ["simulate", "--fixture", "constant_cost", "--num-traj", "10", "--delta", "0.1", "--n", "2", "--x0", "0"]
    assert main(args + ["--out", str(tmp_path)]) == 0
    est = rows(tmp_path / "estimate.csv")[0]
    assert float(est["estimate"]) == pytest.approx(math.exp(0.2) * math.exp(0.5 * 0.9), rel=1e-12)
    assert float(est["std_error"]) == 0
    args[-1] = "7"
    assert main(args + ["--out", str(tmp_path)]) == 2


class TestDeterminism:
    def test_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["solve", "--fixture", "two_state", "--out", str(tmp_path / sub)]) == 0
            assert main(["simulate", "--fixture", "two_state", "--num-traj", "5000",
                         "--policy", str(tmp_path / "a" / "value.csv"), "--out", str(tmp_path / sub)]) == 0
        for name in ("value.csv", "report.csv", "estimate.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_thread_count_invariance(self, tmp_path):
        outs = []
        for threads in ("1", "4"):
            d = tmp_path / threads
            assert main(["simulate", "--fixture", "two_state", "--num-traj", "10000",
                         "--threads", threads, "--out", str(d)]) == 0
            outs.append((d / "estimate.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_seed_flag(self, tmp_path):
        base = ["simulate", "--fixture", "two_state", "--num-traj", "1000"]
        main(base + ["--out", str(tmp_path / "a")])
        main(base + ["--seed", "5", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "estimate.csv").read_bytes() != (tmp_path / "b" / "estimate.csv").read_bytes()


def test_output_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("RISKCTMDP_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["certify", "--fixture", "two_state"]) == 0
    assert (tmp_path / "env" / "certificate.csv").is_file()


class TestConfigErrors:
    @pytest.mark.parametrize(
        "edit, field",
        [
            (lambda d: d["model"].pop("alpha"), "model.alpha"),
            (lambda d: d["model"]["kernel"].update(type="nope"), "model.kernel.type"),
            (lambda d: d.update(solve={"delta_list": [0.1, 0.2]}), "solve.delta_list"),
            (lambda d: d.update(solve={"n_list": [4, 2]}), "solve.n_list"),
            (lambda d: d.update(solve={"tol": -1}), "solve.tol"),
            (lambda d: d["model"]["cost"].update(values=[[1, 2, 3]]), "model.cost.values"),
            (lambda d: d["model"]["kernel"].update(rates=[[1.0]]), "model.kernel.rates"),
        ],
    )
    def test_field_named(self, tmp_path, capsys, edit, field):
        doc = fixture_doc("two_state")
        edit(doc)
        code = main(["solve", "--config", write_config(tmp_path, doc), "--out", str(tmp_path)])
        assert code == 2
        assert field in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert main(["solve", "--config", str(tmp_path / "none.json")]) == 2
        assert "file not found" in capsys.readouterr().err

    def test_bad_flags(self, tmp_path, capsys):
        assert main(["solve", "--fixture", "two_state", "--tol", "0", "--out", str(tmp_path)]) == 2
        assert "--tol" in capsys.readouterr().err
        assert main(["simulate", "--fixture", "two_state", "--threads", "0", "--out", str(tmp_path)]) == 2

    def test_csv_kernel_relative_path(self, tmp_path):
        doc = fixture_doc("two_state")
        rates = np.array(doc["model"]["kernel"].pop("rates")).reshape(4, 2)
        (tmp_path / "rates.csv").write_text("\n".join(",".join(map(repr, r)) for r in rates.tolist()))
        doc["model"]["kernel"]["csv"] = "rates.csv"
        cfg = load_config(write_config(tmp_path, doc))
        np.testing.assert_array_equal(cfg.model.kernel.rates, load_config("fixture:two_state").model.kernel.rates)


class TestExpressions:
    def test_evaluates(self):
        fn = compile_expression("M*(x**2 + 1)*(1 - 0.3*a) + log1p(abs(x))", {"M": 2.0})
        assert fn(np.array([3.0]), np.array([1.0]))[0] == pytest.approx(2 * 10 * 0.7 + math.log(4))

    @pytest.mark.parametrize(
        "text",
        ["__import__('os').system('true')", "x.__class__", "[x for x in ()]", "open('f')", "lambda: 1", "y + 1", "exp(x=1)"],
    )
    def test_rejects_unsafe(self, text):
        with pytest.raises(ConfigError):
            compile_expression(text)
