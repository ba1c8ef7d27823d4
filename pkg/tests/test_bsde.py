import dataclasses
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from lqpi.bsde import (BasisSpec, IllConditionedRegression, UnsupportedData, solve_bsde, solve_bsde_deterministic,
                       solve_bsde_exponential, solve_bsde_lsmc)
from lqpi.model import TimeGrid, builtin_scenario, exponential, markov
from lqpi.riccati import MatrixPath, gain_path, solve_p1, solve_p2
from lqpi.simulate import sample_ensemble
from oracles import linear_terminal_alpha0, linear_terminal_spec, scalar_spec

GRID = TimeGrid(0.0, 1.0, 200)


def pipeline(spec, grid=GRID, eps=0.0):
    p1 = solve_p1(spec, grid)
    p2 = solve_p2(spec, p1, grid, eps)
    return p1, p2, gain_path(spec, p1, p2, eps)


def zero_gain(grid=GRID, m=1, n=1):
    return MatrixPath(grid, np.zeros((grid.n_steps + 1, m, n)), False, "Theta")


def section5_alpha(eps, t, w):
    return eps / (eps + 1 - t) * np.exp(math.sqrt(2) * w - 2 * t) * 2 * np.sqrt(1 - t)


def test_zero_data_gives_zero_solution(psd_scalar):
    spec = psd_scalar.homogeneous()
    sol = solve_bsde_deterministic(spec, *pipeline(spec), GRID)
    assert np.array_equal(sol.alpha, np.zeros_like(sol.alpha))
    assert np.array_equal(sol.beta, np.zeros_like(sol.beta))


def test_running_q_with_zero_p2():
    spec = scalar_spec(A=0.0, B=0.0, Q=0.0, G=0.0, q=1.0)
    p1, p2, _ = pipeline(spec)
    assert np.max(np.abs(p2.values)) == 0.0
    sol = solve_bsde_deterministic(spec, p1, p2, zero_gain(), GRID)
    assert np.max(np.abs(sol.alpha[:, 0] - (1 - GRID.points))) <= 1e-12


def test_terminal_datum_closed_form():
    spec = scalar_spec(A=0.7, B=0.0, Q=0.0, G=0.0, g=1.5)
    p1, p2, _ = pipeline(spec)
    sol = solve_bsde_deterministic(spec, p1, p2, zero_gain(), GRID)
    assert np.max(np.abs(sol.alpha[:, 0] - 1.5 * np.exp(0.7 * (1 - GRID.points)))) <= 1e-10
    assert sol.alpha[-1, 0] == 1.5


def test_deterministic_backend_rejects_random_data(section5):
    with pytest.raises(UnsupportedData):
        solve_bsde_deterministic(section5, *pipeline(section5, eps=0.5), GRID)


def test_deterministic_residual_second_order(psd_scalar):
    out = []
    for n in (100, 200):
        g = TimeGrid(0.0, 1.0, n)
        p1, p2, th = pipeline(psd_scalar, g)
        sol = solve_bsde_deterministic(psd_scalar, p1, p2, th, g)
        ts, h = g.points, g.h
        worst = 0.0
        for i in range(1, n):
            c = psd_scalar.coeffs(ts[i])
            Th = th[i]
            M = c.A + c.B @ Th
            F = ((c.C1 + c.D1 @ Th).T @ p1[i] @ [0.3] + (c.C2 + c.D2 @ Th).T @ p2[i] @ [0.2]
                 + Th.T @ [0.1] + p2[i] @ [0.5] + [0.1])
            dA = (sol.alpha[i + 1] - sol.alpha[i - 1]) / (2 * h)
            worst = max(worst, float(np.max(np.abs(dA + M.T @ sol.alpha[i] + F))))
        out.append(worst)
    assert out[1] <= out[0] / 3.5 and out[1] <= 1e-4


@pytest.mark.parametrize("eps", [1.0, 0.5, 0.1, 0.01])
def test_exponential_backend_section5_closed_form(section5, eps):
    grid = TimeGrid(0.0, 1.0, 1000)
    p1, p2, th = pipeline(section5, grid, eps)
    sol = solve_bsde_exponential(section5, p1, p2, th, grid)
    w = np.array([-1.0, 0.0, 0.5, 1.0])
    worst = 0.0
    for i, t in enumerate(grid.points):
        a, b = sol.evaluate(i, w)
        exact = section5_alpha(eps, t, w)
        worst = max(worst, np.max(np.abs(a[:, 0] - exact)), np.max(np.abs(b[:, 0] - math.sqrt(2) * exact)))
    assert worst <= 1e-8
    a, _ = sol.at(0.3337, np.array([0.2]))
    assert a[0, 0] == pytest.approx(section5_alpha(eps, 0.3337, 0.2), abs=1e-8)


def test_exponential_backend_requires_exponential_form(psd_scalar):
    spec = dataclasses.replace(psd_scalar, b=markov(lambda t, w: w[:, None], 1))
    with pytest.raises(UnsupportedData):
        solve_bsde_exponential(spec, *pipeline(psd_scalar), GRID)
    two = dataclasses.replace(psd_scalar, b=exponential(1.0, lambda t: [1.0], 1),
                              q=exponential(2.0, lambda t: [1.0], 1))
    with pytest.raises(UnsupportedData):
        solve_bsde_exponential(two, *pipeline(psd_scalar), GRID)


def test_exponential_backend_regular_data_matches_lsmc_free_reduction():
    # b = e^{kappa W}, no singularity: a' = -((M + kappa N + kappa^2/2) a + P2)
    spec = dataclasses.replace(scalar_spec(A=0.2, C2=0.3, Q=1.0), b=exponential(0.4, lambda t: [1.0], 1))
    p1, p2, th = pipeline(spec)
    sol = solve_bsde_exponential(spec, p1, p2, th, GRID)

    def rhs(t, a):
        T_ = th.at(t)[0, 0]
        L = 0.2 + T_ + 0.4 * 0.3 + 0.08
        return -(L * a + p2.at(t)[0, 0])

    ref = solve_ivp(rhs, (1.0, 0.0), [0.0], t_eval=GRID.points[::-1], rtol=1e-12, atol=1e-14).y[0, ::-1]
    assert np.max(np.abs(sol.alpha_exp[:, 0] - ref)) <= 1e-8


def test_auto_dispatch(psd_scalar, section5):
    assert solve_bsde(psd_scalar, *pipeline(psd_scalar), GRID).backend == "ode"
    assert solve_bsde(section5, *pipeline(section5, eps=0.5), GRID).backend == "exponential"
    spec = dataclasses.replace(psd_scalar, b=markov(lambda t, w: w[:, None], 1))
    with pytest.raises(ValueError):
        solve_bsde(spec, *pipeline(spec), GRID)
    ens = sample_ensemble(GRID, 50, 1)
    assert solve_bsde(spec, *pipeline(spec), GRID, ensemble=ens).backend == "lsmc"
    with pytest.raises(ValueError):
        solve_bsde(spec, *pipeline(spec), GRID, backend="bogus")


def test_lsmc_martingale_terminal_datum(small_ensemble):
    # g = W2(T), A = C2 = 0, Theta = 0: alpha = W2(t), beta = 1
    spec = dataclasses.replace(scalar_spec(B=0.0, G=0.0), g=markov(lambda t, w: w[:, None], 1))
    grid = small_ensemble.grid
    p1, p2, _ = pipeline(spec, grid)
    sol = solve_bsde_lsmc(spec, p1, p2, zero_gain(grid), grid, small_ensemble)
    W = small_ensemble.W2
    assert np.array_equal(sol.alpha[:, -1, 0], W[:, -1])
    K = small_ensemble.K
    # alpha(0) is the sample mean of W2(T), which has standard deviation 1/sqrt(K)
    assert abs(sol.alpha[0, 0, 0]) <= 3 / math.sqrt(K)
    assert np.sqrt(np.mean((sol.alpha[:, :, 0] - W) ** 2)) <= 0.05
    assert abs(np.mean(sol.beta[:, :-1, 0]) - 1.0) <= 0.05


def test_lsmc_deterministic_data_matches_ode(psd_scalar, small_ensemble):
    grid = small_ensemble.grid
    p1, p2, th = pipeline(psd_scalar, grid)
    ode = solve_bsde_deterministic(psd_scalar, p1, p2, th, grid)
    for cv in (True, False):
        sol = solve_bsde_lsmc(psd_scalar, p1, p2, th, grid, small_ensemble, control_variate=cv)
        # every path carries the same alpha, so only the scheme's O(h^2) error remains
        assert np.max(np.abs(sol.diagnostics["alpha_mean"] - ode.alpha)) <= 1e-6
        assert np.max(np.abs(sol.alpha[:, -1] - 0.2)) == 0.0


def test_lsmc_random_data_within_three_stderr_of_exact():
    spec = linear_terminal_spec()
    grid = TimeGrid(0.0, 1.0, 200)
    exact, (p1, p2, th) = linear_terminal_alpha0(spec, grid)
    ens = sample_ensemble(grid, 10_000, 2)
    sol = solve_bsde_lsmc(spec, p1, p2, th, grid, ens, n_batches=10)
    est, se = sol.diagnostics["alpha_mean"][0, 0], sol.diagnostics["alpha_stderr"][0, 0]
    assert se > 0
    assert abs(est - exact) <= 3 * se


def test_lsmc_residual_means(small_ensemble, section5):
    grid = small_ensemble.grid
    p1, p2, th = pipeline(section5, grid, 0.5)
    sol = solve_bsde_lsmc(section5, p1, p2, th, grid, small_ensemble)
    assert np.max(sol.diagnostics["residual_mean_z"]) <= 3.0
    assert sol.basis == BasisSpec(3, math.sqrt(2))
    assert np.all(sol.alpha[:, -1] == 0.0)


def test_lsmc_section5_alpha_at_zero(section5):
    grid = TimeGrid(0.0, 1.0, 500)
    p1, p2, th = pipeline(section5, grid, 0.5)
    sol = solve_bsde_lsmc(section5, p1, p2, th, grid, sample_ensemble(grid, 10_000, 4), n_batches=10)
    est, se = sol.diagnostics["alpha_mean"][0, 0], sol.diagnostics["alpha_stderr"][0, 0]
    assert abs(est - section5_alpha(0.5, 0.0, 0.0)) <= 3 * se


def test_lsmc_is_pure_function_of_ensemble(section5, small_ensemble):
    grid = small_ensemble.grid
    args = pipeline(section5, grid, 0.5)
    a = solve_bsde_lsmc(section5, *args, grid, small_ensemble)
    b = solve_bsde_lsmc(section5, *args, grid, small_ensemble)
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.beta, b.beta)


def test_lsmc_ill_conditioned_basis(psd_scalar, small_ensemble):
    spec = dataclasses.replace(psd_scalar, b=markov(lambda t, w: w[:, None], 1))
    grid = small_ensemble.grid
    with pytest.raises(IllConditionedRegression) as info:
        solve_bsde_lsmc(spec, *pipeline(spec, grid), grid, small_ensemble, BasisSpec(degree=40))
    assert 0 <= info.value.t <= 1 and info.value.cond > 1e12


def test_lsmc_rejects_mismatched_inputs(psd_scalar, small_ensemble):
    with pytest.raises(ValueError):
        solve_bsde_lsmc(psd_scalar, *pipeline(psd_scalar), GRID, sample_ensemble(TimeGrid(0, 1, 10), 5, 1))
    grid = small_ensemble.grid
    with pytest.raises(ValueError):
        solve_bsde_lsmc(psd_scalar, *pipeline(psd_scalar, grid), grid, small_ensemble, n_batches=2000)
    with pytest.raises(ValueError):
        BasisSpec(degree=-1)


def test_basis_design():
    b = BasisSpec(2)
    X = b.design(0.5, 0.0, np.array([-1.0, 0.0, 1.0]))
    assert X.shape == (3, 3) and np.array_equal(X[:, 0], np.ones(3))
    assert b.design(0.0, 0.0, np.zeros(4)).shape == (4, 1)
    t = BasisSpec(0, kappa=1.0).design(0.5, 0.0, np.array([0.0, 1.0]))
    assert t[1, 0] / t[0, 0] == pytest.approx(math.e)
    assert "exp" in BasisSpec(1, 2.0).describe() and "exp" not in BasisSpec(1).describe()


def test_solution_csv_layouts(tmp_path, section5, small_ensemble):
    grid = small_ensemble.grid
    args = pipeline(section5, grid, 0.5)
    solve_bsde_exponential(section5, *args, grid).to_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().split("\n")[0] == "t,alpha_0,alpha_exp_0"
    ens = sample_ensemble(grid, 3, 1)
    solve_bsde_lsmc(section5, *args, grid, ens, BasisSpec(0, math.sqrt(2))).to_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().split("\n")
    assert lines[0] == "path_id,t,alpha_0,beta_0" and len(lines) == 3 * (grid.n_steps + 1) + 2
    spec = builtin_scenario("psd_scalar")
    solve_bsde(spec, *pipeline(spec, grid), grid).to_csv(tmp_path / "o.csv")
    assert (tmp_path / "o.csv").read_text().startswith("t,alpha_0,beta_0\n")
