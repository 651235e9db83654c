import json
import subprocess
import sys

import pytest

from oilbench import cli
from oilbench.harness import ROW_FIELDS, preset

HEADER = "round,env_steps,loss,avg_cumulative_loss,cumulative_regret,cumulative_reward,eta_t,sigma_t,inner_iters,solver_converged"


def bundle(path):
    """File name -> bytes, leaving out wall-clock timings."""
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if not p.name.endswith(".timings.json")}


class TestFormatting:
    def test_header_constant(self):
        assert ",".join(ROW_FIELDS) == HEADER

    def test_values(self):
        assert cli.format_value(True) == "true"
        assert cli.format_value(3) == "3"
        assert float(cli.format_value(0.1)) == 0.1
        assert cli.format_value(float("nan")) == "nan"

    def test_json_safe(self):
        assert json.loads(cli.dumps({"a": float("inf"), "b": [1.5]})) == {"a": "inf", "b": [1.5]}

    def test_seeds(self):
        assert cli.parse_seeds("1, 2,3") == (1, 2, 3)
        with pytest.raises(ValueError):
            cli.parse_seeds("a")
        with pytest.raises(ValueError):
            cli.parse_seeds(",")


class TestRun:
    def test_toy_csv(self, tmp_path):
        code = cli.main(["run", "--preset", "toy_simple", "--algo", "ftrl", "--loss", "l2", "--seeds", "7",
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_OK
        lines = (tmp_path / "toy_simple_ftrl_seed7.csv").read_text().splitlines()
        assert lines[0] == HEADER and len(lines) == 251
        meta = json.loads((tmp_path / "toy_simple_ftrl_seed7.json").read_text())
        assert meta["rounds"] == 250 and meta["complete"]
        manifest = json.loads((tmp_path / "toy_simple_ftrl_manifest.json").read_text())
        assert [r["seed"] for r in manifest["runs"]] == [7]

    def test_three_seeds(self, tmp_path):
        code = cli.main(["run", "--preset", "gridworld_adversarial", "--algo", "ftl", "--seeds", "1,2,3",
                         "--rounds", "10", "--out", str(tmp_path)])
        assert code == 0
        assert len(list(tmp_path.glob("*.csv"))) == 3
        assert (tmp_path / "gridworld_adversarial_ftl_manifest.json").exists()
        for p in tmp_path.glob("*.csv"):
            assert len(p.read_text().splitlines()) == 11

    def test_identical_invocations(self, tmp_path):
        args = ["run", "--preset", "toy_adversarial", "--algo", "ogd", "--eta", "0.01", "--seeds", "3",
                "--rounds", "40"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        assert bundle(tmp_path / "a") == bundle(tmp_path / "b")

    def test_config_file(self, tmp_path):
        cfg = preset("toy_simple", algo="ogd", rounds=5).to_dict()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["run", "--config", str(path), "--seeds", "2", "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "toy_simple_ogd_seed2.csv").exists()

    def test_out_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
        assert cli.main(["run", "--preset", "toy_simple", "--rounds", "3", "--seeds", "0"]) == 0
        assert (tmp_path / "env" / "toy_simple_ftl_seed0.csv").exists()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_incomplete_exit_code(self, tmp_path):
        code = cli.main(["run", "--preset", "toy_adversarial", "--algo", "ogd", "--eta", "100000",
                         "--seeds", "0", "--out", str(tmp_path)])
        assert code == cli.EXIT_INCOMPLETE
        meta = json.loads((tmp_path / "toy_adversarial_ogd_seed0.json").read_text())
        assert not meta["complete"] and meta["error"]


class TestUsageErrors:
    @pytest.mark.parametrize("argv", [
        [],
        ["run"],
        ["run", "--preset", "nope"],
        ["run", "--preset", "toy_simple", "--algo", "adam"],
        ["run", "--preset", "toy_simple", "--loss", "hinge"],
        ["run", "--preset", "toy_simple", "--eta", "-1"],
        ["run", "--preset", "toy_simple", "--eta", "1", "--alpha", "1"],
        ["run", "--preset", "toy_simple", "--seeds", "x"],
        ["run", "--preset", "toy_simple", "--config", "c.json"],
        ["tune", "--preset", "toy_simple", "--algo", "ftl"],
        ["verify", "--suite", "nope"],
    ])
    def test_exit_two(self, argv, tmp_path, capsys):
        assert cli.main(argv + (["--out", str(tmp_path)] if argv[:1] == ["run"] else [])) == cli.EXIT_CONFIG

    def test_bad_config_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"env": {"type": "toy"}, "total_interactions": 10, "speed": 3}))
        assert cli.main(["run", "--config", str(path)]) == cli.EXIT_CONFIG


class TestTune:
    def test_ranking_file(self, tmp_path):
        code = cli.main(["tune", "--preset", "toy_adversarial", "--algo", "ogd", "--seeds", "1",
                         "--out", str(tmp_path)])
        assert code == 0
        report = json.loads((tmp_path / "tune_toy_adversarial_ogd.json").read_text())
        assert len(report["ranking"]) == 11 and report["pilot_interactions"] == 2000 and report["pilot_batch"] == 100
        first = report["best_eta"]
        cli.main(["tune", "--preset", "toy_adversarial", "--algo", "ogd", "--seeds", "1", "--out", str(tmp_path)])
        assert json.loads((tmp_path / "tune_toy_adversarial_ogd.json").read_text())["best_eta"] == first


class TestVerify:
    def test_probes_pass(self, tmp_path):
        assert cli.main(["verify", "--suite", "probes", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "verify_probes.json").read_text())["passed"]

    def test_reformulation_pass(self, tmp_path):
        assert cli.main(["verify", "--suite", "reformulation", "--seeds", "0,1", "--out", str(tmp_path)]) == 0

    def test_injected_fault_and_replay(self, tmp_path):
        code = cli.main(["verify", "--suite", "reformulation", "--seeds", "0", "--inject-fault", "sigma",
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_VERIFY_FAILED
        repro = tmp_path / "verify_reformulation_reproducer.json"
        failures = json.loads(repro.read_text())["failures"]
        assert failures and all(f["fault"] == "sigma" for f in failures)
        assert cli.main(["verify", "--replay", str(repro), "--out", str(tmp_path)]) == cli.EXIT_VERIFY_FAILED

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "oilbench", "verify", "--suite", "probes", "--out",
                               str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0 and "PASS" in proc.stdout
