import json

import pytest

from lqpi.cli import DEFAULTS, ConfigError, load_config, main, run


def write(tmp_path, cfg, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def report(out):
    return json.loads((out / "report.json").read_text())


SMALL = {"grid": {"n_steps": 100}, "monte_carlo": {"K": 500, "seed": 3}}


def test_defaults_and_env_seed(tmp_path):
    cfg = load_config({}, env={})
    assert cfg["pipeline"] == "section5-repro" and cfg["monte_carlo"]["seed"] == 12345
    assert cfg["ladder"][0] == 1.0 and cfg["ladder"][-1] == 2.0**-15
    assert load_config({}, env={"LQPI_SEED": "99"})["monte_carlo"]["seed"] == 99
    assert load_config(write(tmp_path, {"x0": 2.0}), env={})["x0"] == [2.0]
    assert DEFAULTS["monte_carlo"]["seed"] == 12345


@pytest.mark.parametrize("bad", [
    {"pipeline": "nope"},
    {"colour": 1},
    {"grid": {"n_steps": 0}},
    {"grid": {"dt": 0.1}},
    {"grid": 5},
    {"monte_carlo": {"K": 1.5}},
    {"monte_carlo": {"seed": -1}},
    {"ladder": [0.5, 1.0]},
    {"ladder": []},
    {"truncations": ["a"]},
    {"scenario": {"name": "unknown"}},
    {"bsde_backend": "magic"},
    {"tolerances": {"norm_cap": -1}},
    {"basis": {"kappa": "x"}},
    {"workers": 0},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        load_config(bad, env={})


def test_bad_seed_env_and_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config({}, env={"LQPI_SEED": "x"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", env={})
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json", env={})
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json", env={})


@pytest.mark.parametrize("bad", [
    {"pipeline": "nope"},
    {"scenario": {"name": "psd_scalar", "params": {"bogus": 1}}},
    {"scenario": {"name": "psd_random"}, "x0": [1.0, 2.0, 3.0]},
    {"truncations": [1.5]},
    {"s": 2.0},
])
def test_run_exits_1_on_config_errors(tmp_path, bad, capsys):
    assert run(bad, out=tmp_path / "o", env={}) == 1
    assert "configuration error" in capsys.readouterr().err


def test_psd_solve(tmp_path):
    out = tmp_path / "o"
    cfg = {"pipeline": "psd-solve", "scenario": {"name": "psd_scalar"}, **SMALL}
    assert run(cfg, out=out, env={}) == 0
    rep = report(out)
    assert rep["schema"] == 1 and rep["verdict"] == "Solvable"
    assert rep["gamma_hat"] > 0 and rep["stderr"] > 0
    assert abs(rep["cost"] - rep["value"]) <= 3 * rep["stderr"] + 0.05
    assert (out / "theta.csv").read_text().startswith("t,Theta_00\n")
    assert "workers" not in rep["config"] and "output_dir" not in rep["config"]


def test_psd_solve_rejects_indefinite(tmp_path):
    out = tmp_path / "o"
    assert run({"pipeline": "psd-solve", **SMALL}, out=out, env={}) == 2
    assert report(out)["verdict"] == "AssumptionViolated"


def test_ladder_screens_indefinite(tmp_path):
    out = tmp_path / "o"
    cfg = {"pipeline": "solvability-ladder", "scenario": {"name": "indefinite_unbounded"}, **SMALL}
    assert run(cfg, out=out, env={}) == 2
    rep = report(out)
    assert rep["verdict"] == "AssumptionViolated" and rep["ladder"] == [] and rep["gamma_d"] < 0


def test_weak_closed_loop_psd(tmp_path):
    out = tmp_path / "o"
    cfg = {"pipeline": "weak-closed-loop", "scenario": {"name": "psd_scalar"},
           "ladder": [2.0**-k for k in range(11)], **SMALL}
    assert run(cfg, out=out, env={}) == 0
    rep = report(out)
    assert rep["verdict"] == "Solvable" and rep["extraction"]["singular_at_T"] is False
    assert (out / "convergence.csv").exists() and (out / "theta_limit.csv").exists()


def test_weak_closed_loop_short_ladder_is_not_converged(tmp_path):
    out = tmp_path / "o"
    cfg = {"pipeline": "weak-closed-loop", "ladder": [1.0, 0.5], **SMALL}
    assert run(cfg, out=out, env={}) == 2
    assert report(out)["verdict"] == "NotConverged"


def test_section5_extraction_not_converged(tmp_path):
    out = tmp_path / "o"
    cfg = {"ladder": [2.0**-k for k in range(9)], "truncations": [0.5, 0.9, 0.99], **SMALL}
    assert run(cfg, out=out, env={}) == 2
    rep = report(out)
    assert rep["verdict"] == "NotConverged" and rep["extraction"]["t_prime"] == 0.99


def test_oracle_compare(tmp_path):
    out = tmp_path / "o"
    cfg = {"pipeline": "oracle-compare", "scenario": {"name": "psd_scalar"}, "grid": {"n_steps": 1000}}
    assert run(cfg, out=out, env={}) == 0
    lines = (out / "oracle_compare.csv").read_text().splitlines()
    assert lines[0] == "depth,h,tree_value,riccati_value,gap"
    gaps = [abs(float(line.split(",")[4])) for line in lines[1:]]
    assert len(gaps) == 4 and all(a > b for a, b in zip(gaps, gaps[1:]))
    rep = report(out)
    assert all(d["gradient_max"] <= 1e-10 for d in rep["depths"])
    assert min(rep["empirical_orders"]) >= 0.8


def test_oracle_compare_indefinite(tmp_path):
    out = tmp_path / "o"
    cfg = {"pipeline": "oracle-compare", "scenario": {"name": "indefinite_unbounded"}}
    assert run(cfg, out=out, env={}) == 2


def test_section5_repro_defaults(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(write(tmp_path, {"pipeline": "section5-repro"})), "--out", str(out)]) == 0
    rep = report(out)
    assert rep["verdict"] == "Solvable" and rep["extraction"]["singular_at_T"] is True
    mean, se = rep["limit_norm"]["mean"], rep["limit_norm"]["stderr"]
    assert abs(mean - 9) <= 3 * se
    assert all(r["norm"] <= 9 + 3 * r["stderr"] for r in rep["ladder"])
    assert (out / "theta_eps.csv").read_text().startswith("epsilon,t,theta\n")
    assert (out / "lambda_eps.csv").read_text().startswith("epsilon,t,w,lambda\n")


def test_reruns_are_byte_identical_and_worker_free(tmp_path):
    cfg = write(tmp_path, {"scenario": {"name": "psd_scalar"}, "pipeline": "weak-closed-loop",
                           "ladder": [2.0**-k for k in range(8)], **SMALL})
    outs = []
    for k, workers in enumerate(["1", "1", "4"]):
        out = tmp_path / f"o{k}"
        assert main(["run", "--config", str(cfg), "--out", str(out), "--workers", workers]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    for other in outs[1:]:
        assert sorted(p.name for p in other.iterdir()) == names
        for name in names:
            assert (other / name).read_bytes() == (outs[0] / name).read_bytes()
    text = (outs[0] / "ladder.csv").read_bytes()
    assert b"\r" not in text and text.endswith(b"\n")
    value = text.decode().splitlines()[2].split(",")[1]
    assert len(value.replace(".", "").replace("-", "").lstrip("0")) <= 17
    assert float(value) == float(repr(float(value)))


def test_seed_env_changes_results(tmp_path):
    cfg = {"pipeline": "psd-solve", "scenario": {"name": "psd_scalar"}, **SMALL}
    run(cfg, out=tmp_path / "a", env={})
    run(cfg, out=tmp_path / "b", env={"LQPI_SEED": "4"})
    ra, rb = report(tmp_path / "a"), report(tmp_path / "b")
    assert rb["config"]["monte_carlo"]["seed"] == 4
    assert ra["cost"] != rb["cost"] and ra["value"] == rb["value"]


def test_scenarios_listing(capsys):
    assert main(["scenarios"]) == 0
    names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert names == ["section5", "psd_scalar", "psd_random", "indefinite_unbounded"]


def test_argument_errors():
    with pytest.raises(SystemExit) as err:
        main(["run"])
    assert err.value.code == 2
    with pytest.raises(SystemExit):
        main([])
