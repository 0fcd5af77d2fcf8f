import csv
import io
import json

import numpy as np
import pytest

from align_distort.cli import main
from align_distort.core import avg_util, load_instance
from align_distort.instances import nlhf_bound


def _run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


@pytest.fixture
def random_file(tmp_path, capsys):
    prefix = str(tmp_path / "r")
    assert _run(capsys, "gen", "random", "--m", "5", "--beta", "4", "--seed", "3",
                "--out", prefix)[0] == 0
    return prefix + ".instance.json"


class TestGen:
    def test_universal(self, tmp_path, capsys):
        prefix = str(tmp_path / "u")
        rc, out, _ = _run(capsys, "gen", "universal-lb", "--m", "100", "--beta", "5",
                          "--eps", "1e-3", "--xi", "1", "--out", prefix)
        assert rc == 0
        assert "max |p(x>y) - 1/2| = 0.000e+00" in out
        analytics = json.load(open(prefix + ".analytics.json"))
        assert analytics["distortion_floor"] == pytest.approx(2.4712925914163907, rel=1e-12)
        assert load_instance(prefix + ".instance.json").m == 100

    def test_rlhf_rejects_large_beta(self, capsys, tmp_path):
        rc, _, err = _run(capsys, "gen", "rlhf-lb", "--beta", "8", "--out",
                          str(tmp_path / "x"))
        assert rc == 2
        msg = json.loads(err.strip().splitlines()[-1])
        assert "11926" in msg["message"]

    def test_unbounded_sequence_files(self, tmp_path, capsys):
        prefix = str(tmp_path / "s")
        assert _run(capsys, "gen", "unbounded-seq", "--beta", "5", "--m", "14", "--eps", "1e-3",
                    "--out", prefix)[0] == 0
        au = json.load(open(prefix + ".analytics.json"))["avg_util"]
        assert all(b < a for a, b in zip(au, au[1:]))
        rows = list(csv.DictReader(open(prefix + ".sequence.csv")))
        assert len(rows) == 14
        assert float(rows[0]["avg_util"]) == pytest.approx(1 / 3)


class TestRun:
    def test_population_nlhf_within_bound(self, random_file, capsys):
        rc, out, _ = _run(capsys, "run", "--instance", random_file, "--method", "nlhf")
        assert rc == 0
        row = next(csv.DictReader(io.StringIO(out)))
        assert float(row["ratio"]) <= nlhf_bound(4.0) + 1e-9

    def test_point_ball(self, random_file, capsys):
        rc, out, _ = _run(capsys, "run", "--instance", random_file, "--method", "nlhf",
                          "--tau", "0", "--format", "json")
        assert rc == 0
        rep = json.loads(out)["reports"][0]
        np.testing.assert_allclose(rep["policy"], 0.2)
        au = avg_util(load_instance(random_file))
        # the ball is the single point pi_ref, which is also the benchmark
        assert rep["method_util"] == pytest.approx(au.mean())
        assert rep["ratio"] == pytest.approx(rep["optimal_util"] / au.mean())

    def test_byte_identical(self, random_file, tmp_path, capsys):
        args = ["run", "--instance", random_file, "--method", "all", "--mode", "empirical",
                "--n", "300", "--d", "2", "--trials", "3", "--seed", "8"]
        _run(capsys, *args, "--out", str(tmp_path / "a.csv"))
        _run(capsys, *args, "--out", str(tmp_path / "b.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_config_file_and_override(self, random_file, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"instance": random_file, "method": "rlhf", "tau": 0.0}))
        rc, out, _ = _run(capsys, "run", "--config", str(cfg), "--format", "json")
        assert json.loads(out)["reports"][0]["method"] == "rlhf"
        assert json.loads(out)["config"]["tau"] == 0.0
        rc, out, _ = _run(capsys, "run", "--config", str(cfg), "--method", "borda",
                          "--format", "json")
        assert json.loads(out)["reports"][0]["method"] == "borda"

    def test_unknown_config_field(self, random_file, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"instance": random_file, "temperature": 1}))
        rc, _, err = _run(capsys, "run", "--config", str(cfg))
        assert rc == 2 and "temperature" in err

    def test_convergence_mode(self, random_file, capsys):
        rc, out, _ = _run(capsys, "run", "--instance", random_file, "--mode", "convergence",
                          "--n-grid", "100,1000", "--trials", "4", "--format", "json")
        tab = json.loads(out)["tables"]["win_rates"]
        assert tab["n"] == [100, 1000] and tab["mean_error"][1] < tab["mean_error"][0]

    def test_curves(self, capsys):
        rc, out, _ = _run(capsys, "run", "--mode", "curves", "--betas", "5")
        row = next(csv.DictReader(io.StringIO(out)))
        assert float(row["nlhf_bound"]) == pytest.approx(nlhf_bound(5.0))


class TestTools:
    def test_winrates(self, random_file, capsys):
        rc, out, _ = _run(capsys, "winrates", "--instance", random_file, "--format", "json")
        p = np.array(json.loads(out)["win_rates"])
        np.testing.assert_allclose(p + p.T, 1.0, atol=1e-12)

    def test_mle_sampled(self, random_file, capsys):
        rc, out, _ = _run(capsys, "mle", "--instance", random_file, "--n", "2000", "--seed", "1",
                          "--format", "json")
        assert abs(sum(json.loads(out)["reward"])) < 1e-9

    def test_policy_dpo_needs_lambda(self, random_file, capsys):
        rc, _, err = _run(capsys, "policy", "--instance", random_file, "--method", "dpo")
        assert rc == 2 and "lambda" in err

    def test_policy_optimal(self, random_file, capsys):
        rc, out, _ = _run(capsys, "policy", "--instance", random_file, "--method", "optimal",
                          "--format", "json")
        pi = json.loads(out)["policy"]
        assert max(pi) == 1.0


class TestVerify:
    def test_sandwich_suite(self, tmp_path, capsys):
        rc, _, err = _run(capsys, "verify", "sandwich", "--seed", "1", "--out",
                          str(tmp_path / "v.json"))
        assert rc == 0
        assert "[PASS] criterion 1" in err
        assert json.load(open(tmp_path / "v.json"))["passed"]
