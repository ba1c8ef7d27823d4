"""Acceptance gate: one test per criterion, each printing PASS/FAIL in the summary."""

import dataclasses
import json
import math

import numpy as np

import lqpi.solvability as solvability
from acceptance_log import criterion
from lqpi.bsde import solve_bsde_deterministic, solve_bsde_lsmc
from lqpi.cli import run
from lqpi.linalg import pinv
from lqpi.model import SCENARIOS, TimeGrid, builtin_scenario, constant_matrix
from lqpi.oracle import build_tree, estimate_gamma, tree_cost, tree_exact_optimal, tree_gradient, verify_expansion
from lqpi.riccati import gain_path, solve_p1, solve_p2
from lqpi.simulate import sample_ensemble
from lqpi.solvability import (ASSUMPTION_VIOLATED, SOLVABLE, default_ladder, epsilon_ladder,
                              extract_weak_closed_loop, lambda_at, perturbed_feedback, solve_psd, riccati_value)
from oracles import linear_terminal_alpha0, linear_terminal_spec


def penrose(A, X):
    scale = max(1.0, float(np.max(np.abs(A))))
    xs = max(1.0, float(np.max(np.abs(X))))
    return max(np.max(np.abs(A @ X @ A - A)) / scale, np.max(np.abs(X @ A @ X - X)) / xs,
               np.max(np.abs((A @ X).T - A @ X)), np.max(np.abs((X @ A).T - X @ A)))


def test_criterion_1_riccati_closed_form():
    section5 = builtin_scenario("section5")
    with criterion(1, "section5 scenario: P2_eps closed form to 1e-8", 1.0):
        grid = TimeGrid(0.0, 1.0, 2000)
        p1 = solve_p1(section5, grid)
        ts = grid.points
        for eps in (1.0, 0.1, 0.01):
            p2 = solve_p2(section5, p1, grid, eps)
            assert np.max(np.abs(p2.values[:, 0, 0] - eps / (eps + 1 - ts))) <= 1e-8


def test_criterion_2_feedback():
    section5 = builtin_scenario("section5")
    with criterion(2, "section5 scenario: Theta_eps and Lambda_eps (exact path and LSMC)", 10.0):
        grid = TimeGrid(0.0, 1.0, 1000)
        ts = grid.points
        p1 = solve_p1(section5, grid)
        levels = np.array([-1.5, -0.5, 0.0, 0.5, 1.5])
        for eps in (1.0, 0.1, 0.01):
            law = perturbed_feedback(section5, grid, eps, p1=p1)
            assert np.max(np.abs(law.theta.values[:, 0, 0] + 1 / (eps + 1 - ts))) <= 1e-8
            err = 0.0
            for t in ts:
                exact = -np.exp(math.sqrt(2) * levels - 2 * t) * 2 * math.sqrt(1 - t) / (eps + 1 - t)
                err = max(err, float(np.max(np.abs(lambda_at(law, t, levels)[:, 0] - exact))))
            assert err <= 1e-6
        # regression backend: Lambda_eps(0) = -alpha_eps(0)/eps, judged against batch standard errors
        eps = 0.1
        g = TimeGrid(0.0, 1.0, 500)
        p1 = solve_p1(section5, g)
        p2 = solve_p2(section5, p1, g, eps)
        th = gain_path(section5, p1, p2, eps)
        sol = solve_bsde_lsmc(section5, p1, p2, th, g, sample_ensemble(g, 10_000, 4), n_batches=10)
        lam0 = -sol.diagnostics["alpha_mean"][0, 0] / eps
        se = sol.diagnostics["alpha_stderr"][0, 0] / eps
        assert se > 0
        assert abs(lam0 - (-2 / (eps + 1))) <= 3 * se


def test_criterion_3_control_norm():
    section5 = builtin_scenario("section5")
    with criterion(3, "section5 scenario: control norm at eps=0.5 and Solvable ladder", 60.0):
        grid = TimeGrid(0.0, 1.0, 1000)
        ens = sample_ensemble(grid, 10_000, 12345)
        rep = epsilon_ladder(section5, 0.0, [1.0], default_ladder(15), ens)
        half = next(r for r in rep.rungs if r.epsilon == 0.5)
        assert abs(half.norm - 4.0) <= 3 * half.stderr
        assert all(r.norm <= 9 + 3 * r.stderr for r in rep.rungs)
        assert rep.verdict == SOLVABLE


def test_criterion_4_weak_closed_loop():
    section5 = builtin_scenario("section5")
    with criterion(4, "section5 scenario: weak closed-loop limit and singularity at T", 60.0):
        grid = TimeGrid(0.0, 1.0, 1000)
        ens = sample_ensemble(grid, 2000, 12345)
        rep = epsilon_ladder(section5, 0.0, [1.0], default_ladder(17), ens)
        assert rep.verdict == SOLVABLE
        laws = list(rep.laws.values())
        law, table = extract_weak_closed_loop(laws, [0.5, 0.9, 0.99], ensemble=ens)
        j = grid.index(0.9)
        ts = grid.points[: j + 1]
        assert np.max(np.abs(law.theta.values[: j + 1, 0, 0] + 1 / (1 - ts))) <= 1e-3
        # increments of int |Theta*|^2 between truncations follow those of 1/(1 - T')
        assert len(table.growth_ratios) == 2
        assert all(abs(r - 1) <= 0.2 for r in table.growth_ratios)
        assert law.singular_at_T and table.singular_at_T


def test_criterion_5_oracle_equivalence():
    spec = builtin_scenario("psd_scalar")
    with criterion(5, "tree oracle vs Riccati value, order >= 0.8, stationary minimizers", 120.0):
        grid = TimeGrid(0.0, 1.0, 2000)
        law, _ = solve_psd(spec, 0.0, [1.0], grid)
        value = riccati_value(law, 0.0, [1.0])
        depths = [3, 4, 5, 6]
        gaps = []
        for d in depths:
            tree = build_tree(spec, 0.0, 1.0, d)
            sol = tree_exact_optimal(tree, [1.0])
            assert np.max(np.abs(tree_gradient(tree, sol.controls, [1.0]))) <= 1e-10
            gaps.append(abs(sol.value - value))
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        orders = [math.log(gaps[i] / gaps[i + 1]) / math.log(depths[i + 1] / depths[i]) for i in range(3)]
        assert min(orders) >= 0.8


def test_criterion_6_expansion_identity():
    cases = [("psd_scalar", {}), ("section5", {})] + [("psd_random", {"seed": s}) for s in (0, 1, 2)]
    with criterion(6, "cost expansion identity on 100 draws x 5 scenarios", 30.0):
        rng = np.random.default_rng(2024)
        for name, params in cases:
            spec = builtin_scenario(name, params)
            tree = build_tree(spec, 0.0, spec.T, 4)
            x0 = np.ones(spec.n)
            for _ in range(100):
                U, V = rng.standard_normal((2, tree.n_controls))
                lam = rng.uniform(-10, 10)
                res = verify_expansion(tree, U, V, lam, x0)
                assert res <= 1e-10 * (1 + abs(tree_cost(tree, U, x0)))


def test_criterion_7_assumption_screening(monkeypatch):
    with criterion(7, "gamma_d screening and AssumptionViolated without simulation", 30.0):
        assert estimate_gamma(build_tree(builtin_scenario("psd_scalar"), 0.0, 1.0, 5)) >= 1
        assert estimate_gamma(build_tree(builtin_scenario("indefinite_unbounded"), 0.0, 1.0, 5)) < 0
        assert 0 <= estimate_gamma(build_tree(builtin_scenario("section5"), 0.0, 1.0, 5)) <= 0.5

        def forbidden(*args, **kwargs):
            raise AssertionError("simulation ran on an indefinite problem")

        monkeypatch.setattr(solvability, "simulate_filtered_state", forbidden)
        monkeypatch.setattr(solvability, "perturbed_feedback", forbidden)
        ens = sample_ensemble(TimeGrid(0.0, 1.0, 100), 100, 1)
        rep = epsilon_ladder(builtin_scenario("indefinite_unbounded"), 0.0, [1.0], default_ladder(15), ens)
        assert rep.verdict == ASSUMPTION_VIOLATED and rep.rungs == []


def test_criterion_8_property_suites(tmp_path):
    with criterion(8, "pinv, Riccati, LSMC-vs-ODE and worker reproducibility suites", 120.0):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            r, c = rng.integers(1, 7, size=2)
            A = rng.standard_normal((r, c))
            if rng.random() < 0.3 and min(r, c) > 1:
                A[:, -1] = A[:, 0]
            assert penrose(A, pinv(A)) <= 1e-10

        grid = TimeGrid(0.0, 1.0, 200)
        for name in SCENARIOS:
            spec = builtin_scenario(name)
            p1 = solve_p1(spec, grid)
            for path in [p1] + [solve_p2(spec, p1, grid, e) for e in (0.0, 0.1)]:
                assert np.array_equal(path.values[-1], spec.G)
                assert np.array_equal(path.values, np.swapaxes(path.values, 1, 2))

        base = builtin_scenario("psd_random", {"seed": 3})
        z = constant_matrix(np.zeros((2, 2)))
        uncoupled = dataclasses.replace(base, B=z, D1=z, D2=z, S=z)
        p1 = solve_p1(uncoupled, grid)
        assert np.max(np.abs(solve_p2(uncoupled, p1, grid, 0.0).values - p1.values)) <= 1e-8

        spec = linear_terminal_spec()
        exact, (p1, p2, th) = linear_terminal_alpha0(spec, grid)
        sol = solve_bsde_lsmc(spec, p1, p2, th, grid, sample_ensemble(grid, 10_000, 2), n_batches=10)
        est, se = sol.diagnostics["alpha_mean"][0, 0], sol.diagnostics["alpha_stderr"][0, 0]
        assert abs(est - exact) <= 3 * se
        psd = builtin_scenario("psd_scalar")
        p1 = solve_p1(psd, grid)
        p2 = solve_p2(psd, p1, grid, 0.0)
        th = gain_path(psd, p1, p2, 0.0)
        ode = solve_bsde_deterministic(psd, p1, p2, th, grid)
        lsmc = solve_bsde_lsmc(psd, p1, p2, th, grid, sample_ensemble(grid, 2000, 7), n_batches=10)
        gap = np.abs(lsmc.diagnostics["alpha_mean"] - ode.alpha)
        assert np.all(gap <= 3 * lsmc.diagnostics["alpha_stderr"] + 1e-6)

        cfg = {"pipeline": "section5-repro", "grid": {"n_steps": 400}, "monte_carlo": {"K": 2000}}
        outs = []
        for workers in (1, 4):
            out = tmp_path / f"w{workers}"
            assert run(cfg, out=out, workers=workers, env={}) == 0
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir())
        assert names == sorted(p.name for p in outs[1].iterdir())
        for name in names:
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        assert json.loads((outs[0] / "report.json").read_text())["verdict"] == SOLVABLE
