"""Command-line entry point: ``lqpi run --config FILE`` and ``lqpi scenarios``.

A config is one JSON document.  Every key is optional; missing keys take the
values in :data:`DEFAULTS`, so the section5 reproduction needs only

    {"pipeline": "section5-repro"}

Defaults
--------
=====================  ======================  ==========================================
key                    default                 meaning
=====================  ======================  ==========================================
scenario.name          "section5"              built-in scenario (``lqpi scenarios``)
scenario.params        {}                      scenario parameter overrides
pipeline               "section5-repro"        psd-solve | solvability-ladder |
                                               weak-closed-loop | section5-repro |
                                               oracle-compare
s                      0.0                     initial time
x0                     [1.0]                   initial state (scalar broadcasts)
grid.n_steps           1000                    Euler / Riccati grid size on [s, T]
monte_carlo.K          10000                   number of paths
monte_carlo.seed       12345                   ensemble seed (env LQPI_SEED overrides)
ladder                 [2^0, ..., 2^-15]       decreasing epsilon ladder
truncations            [0.5, 0.9, 0.99]        T' values for weak closed-loop extraction
depths                 [3, 4, 5, 6]            tree depths for oracle-compare
lambda_levels          [-1.0, 0.0, 1.0]        W2 levels for lambda_eps.csv
bsde_backend           "auto"                  auto | ode | exponential | lsmc
basis.degree           3                       LSMC polynomial degree
basis.kappa            null                    LSMC exponential tilt
workers                1                       worker threads (never changes output)
output_dir             "lqpi-out"              where files are written
tolerances.*           see LadderCaps and      norm_cap, cauchy_rel, superlinear_slope,
                       ExtractionThresholds    gamma_tol, screen_depth,
                                               extraction_cauchy_rel, growth_factor
=====================  ======================  ==========================================

Exit status: 0 on success, 2 on a Diverging / AssumptionViolated /
NotConverged outcome, 1 on a configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ._csv import write_csv
from .bsde import BasisSpec
from .model import SCENARIOS, TimeGrid, UnknownScenario, builtin_scenario
from .oracle import NotConvex, build_tree, estimate_gamma, tree_exact_optimal, tree_gradient
from .simulate import control_l2_norm, sample_ensemble, simulate_filtered_state
from .solvability import (ASSUMPTION_VIOLATED, DIVERGING, SOLVABLE, AssumptionError, ExtractionThresholds,
                          LadderCaps, NotConverged, default_ladder, epsilon_ladder,
                          extract_weak_closed_loop, lambda_at, solve_psd, riccati_value)

SCHEMA = 1
PIPELINES = ("psd-solve", "solvability-ladder", "weak-closed-loop", "section5-repro", "oracle-compare")
BACKENDS = ("auto", "ode", "exponential", "lsmc")
NOT_CONVERGED = "NotConverged"
FAILING_VERDICTS = (DIVERGING, ASSUMPTION_VIOLATED, NOT_CONVERGED)

DEFAULTS: dict[str, Any] = {
    "scenario": {"name": "section5", "params": {}},
    "pipeline": "section5-repro",
    "s": 0.0,
    "x0": [1.0],
    "grid": {"n_steps": 1000},
    "monte_carlo": {"K": 10000, "seed": 12345},
    "ladder": default_ladder(15),
    "truncations": [0.5, 0.9, 0.99],
    "depths": [3, 4, 5, 6],
    "lambda_levels": [-1.0, 0.0, 1.0],
    "bsde_backend": "auto",
    "basis": {"degree": 3, "kappa": None},
    "workers": 1,
    "output_dir": "lqpi-out",
    "tolerances": {
        "norm_cap": 1e8,
        "cauchy_rel": 1e-3,
        "superlinear_slope": 1.0,
        "gamma_tol": 1e-10,
        "screen_depth": 4,
        "extraction_cauchy_rel": 1e-3,
        "growth_factor": 5.0,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _positive_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{where} must be a positive integer")
    return value


def _float_list(value, where: str) -> list[float]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where} must be a nonempty list of numbers")
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a nonempty list of numbers") from None


def load_config(source: dict | str | os.PathLike, *, env: dict | None = None) -> dict[str, Any]:
    """Merge a config (dict or JSON path) over DEFAULTS and validate it."""
    if not isinstance(source, dict):
        try:
            source = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        if not isinstance(source, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, source)
    env = os.environ if env is None else env
    if env.get("LQPI_SEED"):
        try:
            cfg["monte_carlo"]["seed"] = int(env["LQPI_SEED"])
        except ValueError:
            raise ConfigError("LQPI_SEED must be an integer") from None

    if cfg["pipeline"] not in PIPELINES:
        raise ConfigError(f"unknown pipeline {cfg['pipeline']!r}; choose from {list(PIPELINES)}")
    if cfg["scenario"]["name"] not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg['scenario']['name']!r}; choose from {sorted(SCENARIOS)}")
    if not isinstance(cfg["scenario"]["params"], dict):
        raise ConfigError("scenario.params must be an object")
    if cfg["bsde_backend"] not in BACKENDS:
        raise ConfigError(f"bsde_backend must be one of {list(BACKENDS)}")
    _positive_int(cfg["grid"]["n_steps"], "grid.n_steps")
    _positive_int(cfg["monte_carlo"]["K"], "monte_carlo.K")
    _positive_int(cfg["workers"], "workers")
    seed = cfg["monte_carlo"]["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("monte_carlo.seed must be a 64-bit unsigned integer")
    ladder = _float_list(cfg["ladder"], "ladder")
    if any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ConfigError("ladder must be strictly decreasing and positive")
    cfg["ladder"] = ladder
    cfg["truncations"] = sorted(_float_list(cfg["truncations"], "truncations"))
    cfg["lambda_levels"] = _float_list(cfg["lambda_levels"], "lambda_levels")
    cfg["depths"] = [_positive_int(d, "depths") for d in (cfg["depths"] or [None])]
    x0 = cfg["x0"]
    cfg["x0"] = _float_list(x0 if isinstance(x0, list) else [x0], "x0")
    cfg["s"] = float(cfg["s"])
    for key, value in cfg["tolerances"].items():
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
            raise ConfigError(f"tolerances.{key} must be positive")
    basis = cfg["basis"]
    _positive_int(basis["degree"], "basis.degree")
    if basis["kappa"] is not None and not isinstance(basis["kappa"], (int, float)):
        raise ConfigError("basis.kappa must be a number or null")
    return cfg


# ------------------------------------------------------------------ runner

class _Context:
    def __init__(self, cfg: dict[str, Any]):
        self.cfg = cfg
        try:
            self.spec = builtin_scenario(cfg["scenario"]["name"], cfg["scenario"]["params"])
        except (UnknownScenario, ValueError, TypeError) as exc:
            raise ConfigError(f"scenario: {exc}") from None
        s = cfg["s"]
        if not s < self.spec.T:
            raise ConfigError("s must be below the horizon T")
        for tp in cfg["truncations"]:
            if not s < tp < self.spec.T:
                raise ConfigError("truncations must lie strictly inside (s, T)")
        x0 = np.asarray(cfg["x0"])
        if x0.size == 1:
            x0 = np.full(self.spec.n, x0[0])
        if x0.size != self.spec.n:
            raise ConfigError(f"x0 must have {self.spec.n} components")
        self.x0 = x0
        self.grid = TimeGrid(s, self.spec.T, cfg["grid"]["n_steps"])
        tol = cfg["tolerances"]
        self.caps = LadderCaps(norm_cap=tol["norm_cap"], cauchy_rel=tol["cauchy_rel"],
                               superlinear_slope=tol["superlinear_slope"], gamma_tol=tol["gamma_tol"],
                               screen_depth=int(tol["screen_depth"]))
        self.thresholds = ExtractionThresholds(cauchy_rel=tol["extraction_cauchy_rel"],
                                               growth_factor=tol["growth_factor"])
        b = cfg["basis"]
        self.basis = BasisSpec(degree=b["degree"], kappa=b["kappa"])
        self._ensemble = None

    @property
    def ensemble(self):
        if self._ensemble is None:
            mc = self.cfg["monte_carlo"]
            self._ensemble = sample_ensemble(self.grid, mc["K"], mc["seed"])
        return self._ensemble

    def ladder(self):
        return epsilon_ladder(self.spec, self.cfg["s"], self.x0, self.cfg["ladder"], self.ensemble, self.caps,
                              bsde_backend=self.cfg["bsde_backend"], basis=self.basis,
                              workers=self.cfg["workers"])


def _ladder_csvs(out: Path, report) -> None:
    write_csv(out / "ladder.csv", ["epsilon", "norm", "stderr"],
              ([r.epsilon, r.norm, r.stderr] for r in report.rungs))
    write_csv(out / "cauchy.csv", ["epsilon_i", "epsilon_j", "distance", "stderr"], report.cauchy)


def _extract(ctx: _Context, out: Path, report, result: dict) -> str:
    """Weak closed-loop extraction on a Solvable ladder; returns a verdict."""
    laws = list(report.laws.values())
    try:
        limit, table = extract_weak_closed_loop(laws, ctx.cfg["truncations"], ctx.thresholds, ctx.ensemble)
    except NotConverged as exc:
        result["extraction"] = {"error": str(exc), "t_prime": exc.t_prime}
        return NOT_CONVERGED
    write_csv(out / "convergence.csv",
              ["t_prime", "epsilon_i", "epsilon_j", "theta_dist", "lambda_dist", "lambda_stderr"], table.rows())
    limit.theta.to_csv(out / "theta_limit.csv")
    result["extraction"] = {**table.to_json(), "valid_until": limit.valid_until,
                            "limit_epsilon": limit.epsilon}
    return SOLVABLE


def _psd_solve(ctx: _Context, out: Path, result: dict) -> str:
    try:
        law, est = solve_psd(ctx.spec, ctx.cfg["s"], ctx.x0, ctx.grid, ctx.cfg["bsde_backend"], ctx.ensemble,
                             basis=ctx.basis)
    except AssumptionError as exc:
        result.update(verdict=ASSUMPTION_VIOLATED, reason=str(exc))
        return ASSUMPTION_VIOLATED
    law.theta.to_csv(out / "theta.csv")
    traj = simulate_filtered_state(ctx.spec, law, ctx.ensemble, ctx.cfg["s"], ctx.x0)
    norm, norm_se = control_l2_norm(traj)
    result.update(verdict=SOLVABLE, cost=est.mean, stderr=est.stderr, value=est.value,
                  gamma_hat=est.gamma_hat, control_norm=norm, control_norm_stderr=norm_se)
    return SOLVABLE


def _solvability_ladder(ctx: _Context, out: Path, result: dict) -> str:
    report = ctx.ladder()
    _ladder_csvs(out, report)
    result.update(report.to_json())
    return report.verdict


def _weak_closed_loop(ctx: _Context, out: Path, result: dict) -> str:
    report = ctx.ladder()
    _ladder_csvs(out, report)
    result.update(report.to_json())
    if report.verdict != SOLVABLE:
        # Extraction presumes a Solvable ladder; an open ladder is not a limit.
        return report.verdict if report.verdict in FAILING_VERDICTS else NOT_CONVERGED
    verdict = _extract(ctx, out, report, result)
    result["verdict"] = verdict
    return verdict


def _section5_repro(ctx: _Context, out: Path, result: dict) -> str:
    report = ctx.ladder()
    _ladder_csvs(out, report)
    result.update(report.to_json())
    laws = sorted(report.laws.values(), key=lambda law: -law.epsilon)
    ts = ctx.grid.points
    write_csv(out / "theta_eps.csv", ["epsilon", "t", "theta"],
              ([law.epsilon, t, law.theta[i][0, 0]] for law in laws for i, t in enumerate(ts)))
    levels = ctx.cfg["lambda_levels"]

    def lam_rows():
        for law in laws:
            for t in ts:
                vals = lambda_at(law, t, levels)
                for w, v in zip(levels, vals):
                    yield [law.epsilon, t, w, v[0]]

    write_csv(out / "lambda_eps.csv", ["epsilon", "t", "w", "lambda"], lam_rows())
    if report.verdict != SOLVABLE:
        return report.verdict
    verdict = _extract(ctx, out, report, result)
    result["verdict"] = verdict
    return verdict


def _oracle_compare(ctx: _Context, out: Path, result: dict) -> str:
    s, x0 = ctx.cfg["s"], ctx.x0
    try:
        law, est = solve_psd(ctx.spec, s, x0, ctx.grid, "auto" if ctx.cfg["bsde_backend"] == "lsmc"
                             else ctx.cfg["bsde_backend"], None, basis=ctx.basis)
    except AssumptionError as exc:
        result.update(verdict=ASSUMPTION_VIOLATED, reason=str(exc))
        return ASSUMPTION_VIOLATED
    value = est.value if est.value is not None else riccati_value(law, s, x0)
    rows, table = [], []
    for depth in ctx.cfg["depths"]:
        tree = build_tree(ctx.spec, s, ctx.spec.T, depth)
        try:
            sol = tree_exact_optimal(tree, x0)
        except NotConvex as exc:
            result.update(verdict=ASSUMPTION_VIOLATED, reason=f"tree Hessian not positive at depth {depth}: "
                                                               f"{exc.min_eig:.6g}")
            return ASSUMPTION_VIOLATED
        grad = float(np.max(np.abs(tree_gradient(tree, sol.controls, x0))))
        gap = sol.value - value
        rows.append([depth, tree.h, sol.value, value, gap])
        table.append({"depth": depth, "h": tree.h, "tree_value": sol.value, "riccati_value": value, "gap": gap,
                      "gradient_max": grad, "gamma_d": estimate_gamma(tree)})
    write_csv(out / "oracle_compare.csv", ["depth", "h", "tree_value", "riccati_value", "gap"], rows)
    orders = [float(np.log(abs(a[4] / b[4])) / np.log(a[1] / b[1]))
              for a, b in zip(rows, rows[1:]) if a[4] != 0 and b[4] != 0 and a[1] != b[1]]
    result.update(verdict=SOLVABLE, riccati_value=value, depths=table, empirical_orders=orders)
    return SOLVABLE


_PIPELINES = {
    "psd-solve": _psd_solve,
    "solvability-ladder": _solvability_ladder,
    "weak-closed-loop": _weak_closed_loop,
    "section5-repro": _section5_repro,
    "oracle-compare": _oracle_compare,
}


def _public_config(cfg: dict[str, Any]) -> dict[str, Any]:
    # worker count and output location never affect numbers, so they stay out of the report
    return {k: v for k, v in cfg.items() if k not in ("workers", "output_dir")}


def run(config: dict | str | os.PathLike, *, out: str | os.PathLike | None = None,
        workers: int | None = None, env: dict | None = None) -> int:
    """Run one pipeline and write report.json plus CSVs; returns the exit status."""
    try:
        cfg = load_config(config, env=env)
        if workers is not None:
            cfg["workers"] = _positive_int(workers, "--workers")
        if out is not None:
            cfg["output_dir"] = str(out)
        ctx = _Context(cfg)
    except ConfigError as exc:
        print(f"lqpi: configuration error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    result: dict[str, Any] = {"schema": SCHEMA, "pipeline": cfg["pipeline"], "config": _public_config(cfg)}
    verdict = _PIPELINES[cfg["pipeline"]](ctx, out_dir, result)
    result["verdict"] = verdict
    (out_dir / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True, allow_nan=True) + "\n")
    print(f"{cfg['pipeline']}: {verdict} -> {out_dir / 'report.json'}")
    return 2 if verdict in FAILING_VERDICTS else 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="lqpi", description="LQ control with partial information.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a pipeline from a JSON config")
    p_run.add_argument("--config", required=True, help="JSON config file")
    p_run.add_argument("--out", help="output directory (overrides output_dir)")
    p_run.add_argument("--workers", type=int, help="worker threads (does not change results)")
    sub.add_parser("scenarios", help="list built-in scenarios")
    args = parser.parse_args(argv)
    if args.command == "scenarios":
        for name, (_, description) in SCENARIOS.items():
            print(f"{name:22s} {description}")
        return 0
    return run(args.config, out=args.out, workers=args.workers)


if __name__ == "__main__":
    sys.exit(main())
