import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from aoisched.cli import main
from aoisched.core import ConfigError
from aoisched.experiment import cell_seeds, ci_half_width, load_config, parse_config, run_experiment

SMALL = {
    "name": "small",
    "system": {"num_flows": 3, "num_servers": 1},
    "traffic": {"rho": [0.5, 1.0], "delay_model": "bernoulli_half", "horizon": 200},
    "service": {"kind": "exponential", "rate": 1.0},
    "policies": ["prmp-MAF-LGFS", "np-RAND-FCFS", "np-MASIF-LGFS"],
    "penalty": {"kind": "max"},
    "replications": 4,
    "seed": 7,
}


def write(tmp_path, raw, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def test_rho_converted_to_rate():
    raw = dict(SMALL, system={"num_flows": 50, "num_servers": 3},
               service={"kind": "shifted_exponential", "shift": 1 / 3, "rate": 1.5})
    cfg = parse_config(raw)
    assert cfg.rates[0] == pytest.approx(0.5 * 3 / 50)
    raw2 = dict(SMALL, traffic={"rate": [0.02], "horizon": 10})
    raw2["system"] = {"num_flows": 50, "num_servers": 3}
    assert parse_config(raw2).rhos[0] == pytest.approx(1 / 3)


@pytest.mark.parametrize("patch,key", [
    ({"replications": 0}, "replications"),
    ({"warmup": 0.5}, "warmup"),
    ({"policies": ["np-FOO-LGFS"]}, "policies"),
    ({"traffic": {"rho": [1.0], "rate": [1.0]}}, "traffic"),
    ({"traffic": {"rho": [1.0, 1.0]}}, "traffic"),
    ({"service": {"kind": "pareto"}}, "service"),
    ({"bogus": 1}, "bogus"),
])
def test_invalid_configs_name_offending_key(patch, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(dict(SMALL, **patch))


def test_multiple_errors_reported_together():
    with pytest.raises(ConfigError) as exc:
        parse_config(dict(SMALL, replications=0, warmup=0.7))
    assert "replications" in str(exc.value) and "warmup" in str(exc.value)


def test_seeds_do_not_depend_on_policy_list():
    a = cell_seeds(7, "np-RAND-FCFS", 0.5, 3)
    b = cell_seeds(7, "prmp-MAF-LGFS", 0.5, 3)
    assert a[0] == b[0] and a[1] != b[1]


def test_adding_a_policy_leaves_other_cells_unchanged(tmp_path):
    r1 = run_experiment(parse_config(dict(SMALL, policies=["np-RAND-FCFS"])), tmp_path / "a")
    r2 = run_experiment(parse_config(SMALL), tmp_path / "b")
    for rho in r1.config.rhos:
        assert np.array_equal(r1.values("np-RAND-FCFS", rho), r2.values("np-RAND-FCFS", rho))


def test_outputs_byte_identical(tmp_path):
    cfg = parse_config(SMALL)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b", workers=2)
    for f in ("results.csv", "replications.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_results_layout(tmp_path):
    res = run_experiment(parse_config(SMALL), tmp_path)
    header = (tmp_path / "results.csv").read_text().splitlines()[0].split(",")
    assert header[:7] == ["policy", "rho", "rate", "penalty_kind", "mean", "ci_half", "n_seeds"]
    masif = res.cell("np-MASIF-LGFS", 0.5)
    assert masif["lower_bound_mean"] <= masif["mean"]
    assert res.cell("np-RAND-FCFS", 0.5)["lower_bound_mean"] == ""
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["warmup"] == 0.1 and manifest["traffic"]["horizon"] == 200


def test_ci_half_width():
    # t_{0.975, 3} * s / sqrt(4) with s = std of (1, 2, 3, 4)
    assert ci_half_width([1, 2, 3, 4]) == pytest.approx(3.182446305284263 * 1.2909944487358056 / 2, rel=1e-9)
    assert ci_half_width([5.0]) == 0.0


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("AOI_OUTPUT_DIR", str(tmp_path / "env"))
    res = run_experiment(parse_config(dict(SMALL, replications=1)))
    assert res.output_dir == tmp_path / "env" / "small"
    assert (res.output_dir / "results.csv").exists()


def test_trace_dumps(tmp_path):
    raw = dict(SMALL, replications=1, output={"dump_traces": True})
    res = run_experiment(parse_config(raw), tmp_path)
    dumps = list((tmp_path / "traces").glob("*.json"))
    assert len(dumps) == len(res.rows)


def test_cli_simulate(tmp_path, capsys):
    cfg = write(tmp_path, dict(SMALL, replications=2))
    assert main(["simulate", str(cfg), "--output", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "results.csv").exists()


def test_cli_simulate_zero_replications_is_config_error(tmp_path, capsys):
    cfg = write(tmp_path, dict(SMALL, replications=0))
    assert main(["simulate", str(cfg)]) == 2
    assert "replications" in capsys.readouterr().err


def test_cli_verify_nbu_and_penalties(tmp_path, capsys):
    assert main(["verify", "nbu"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and len(report["distributions"]) == 4
    bad = write(tmp_path, {"distributions": [{"kind": "hyperexponential", "p": 0.5, "rate": 0.5, "rate2": 5,
                                              "unchecked": True}]}, "h.yaml")
    assert main(["verify", "nbu", str(bad)]) == 1
    capsys.readouterr()
    pcfg = write(tmp_path, {"trials": 200, "penalties": [{"kind": "avg"}, {"kind": "max"}]}, "p.yaml")
    assert main(["verify", "penalty-props", str(pcfg)]) == 0


def test_cli_verify_dominance(tmp_path, capsys):
    raw = dict(SMALL, policies=["prmp-MAF-LGFS", "np-RAND-FCFS"], replications=2)
    assert main(["verify", "dominance", str(write(tmp_path, raw))]) == 0
    assert json.loads(capsys.readouterr().out)["n_violations"] == 0
    swapped = dict(raw, policies=["prmp-RAND-LGFS", "prmp-MAF-LGFS"], replications=3,
                   traffic={"rho": [1.0], "horizon": 500})
    assert main(["verify", "dominance", str(write(tmp_path, swapped, "neg.yaml"))]) == 1
    capsys.readouterr()
    nonexp = dict(raw, service={"kind": "constant", "value": 1.0})
    assert main(["verify", "dominance", str(write(tmp_path, nonexp, "c.yaml"))]) == 2


def test_cli_verify_xi_bound_and_work_efficiency(tmp_path, capsys):
    raw = {"system": {"num_flows": 5, "num_servers": 2}, "traffic": {"rho": [0.8], "horizon": 300},
           "service": {"kind": "shifted_exponential", "shift": 0.3333333333333333, "rate": 1.5},
           "policies": ["np-MASIF-LGFS", "np-RAND-FCFS"], "replications": 20, "seed": 1}
    assert main(["verify", "xi-bound", str(write(tmp_path, raw))]) == 0
    assert main(["verify", "work-efficiency", str(write(tmp_path, dict(raw, replications=3), "w.yaml"))]) == 0
    capsys.readouterr()
    prmp = dict(raw, policies=["np-MASIF-LGFS", "prmp-RAND-LGFS"])
    assert main(["verify", "xi-bound", str(write(tmp_path, prmp, "p.yaml"))]) == 2


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "nonsense", "x.yaml"])
    assert exc.value.code == 2
    assert main(["verify", "dominance", "/nonexistent.yaml"]) == 2


def test_cli_schedule_gen_and_validate(tmp_path, capsys):
    f = tmp_path / "s.csv"
    assert main(["schedule", "gen", str(f), "--rate", "2", "--horizon", "20", "--delay-model", "bernoulli_half"]) == 0
    capsys.readouterr()
    assert main(["schedule", "validate", str(f)]) == 0
    assert json.loads(capsys.readouterr().out)["generations"] > 0
    f.write_text("seq,gen_time,arrival_time\n1,2.0,1.0\n")
    assert main(["schedule", "validate", str(f)]) == 2


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "aoisched.cli", "verify", "nbu"], capture_output=True, text=True)
    assert out.returncode == 0
