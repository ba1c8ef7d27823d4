"""Perturbed feedback laws, the epsilon-ladder solvability test and the
extraction of weak closed-loop limits.

For eps > 0 the perturbed problem (R replaced by R + eps I) is uniformly
convex and its optimal control is u_eps = Theta_eps x_hat + Lambda_eps with

    Theta_eps  = -R_^{-1} S_,
    Lambda_eps = -R_^{-1} (B' alpha + D2' beta + D1' P1 sigma1 + D2' P2 sigma2 + rho).

The problem is open-loop solvable iff {u_eps} stays bounded (equivalently,
converges) as eps -> 0; the ladder turns this into a finite decision rule.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.integrate import quad, trapezoid

from .bsde import BasisSpec, BsdeSolution, solve_bsde
from .linalg import mean_stderr, min_eigenvalue
from .model import ProblemSpec, TimeGrid
from .oracle import build_tree, estimate_gamma
from .riccati import BlowUp, MatrixPath, control_blocks, gain_path, solve_p1, solve_p2
from .simulate import (EnsembleFeedforward, FeedbackLaw, MarkovFeedforward, PathEnsemble,
                       path_costs, simulate_filtered_state, simulate_full_state)

SOLVABLE = "Solvable"
DIVERGING = "Diverging"
ASSUMPTION_VIOLATED = "AssumptionViolated"
INCONCLUSIVE = "Inconclusive"


class AssumptionError(ValueError):
    """Positive-semidefinite assumptions fail at some grid sample."""


class NotConverged(RuntimeError):
    def __init__(self, t_prime: float, detail: str):
        super().__init__(f"Cauchy test failed at T'={t_prime:.10g}: {detail}")
        self.t_prime = float(t_prime)


def default_ladder(k_max: int = 15) -> list[float]:
    return [2.0**-k for k in range(k_max + 1)]


# ----------------------------------------------------------- feedback laws

def _lambda_fn(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, bsde: BsdeSolution, epsilon: float):
    """Lambda(i, t, w) on grid index i, or at arbitrary t when i is None."""
    use_pinv = epsilon == 0
    cache: dict[int, tuple] = {}

    def blocks(i, t):
        if i is not None and i in cache:
            return cache[i]
        P1 = p1[i] if i is not None else p1.at(t)
        P2 = p2[i] if i is not None else p2.at(t)
        Rb, _, c = control_blocks(spec, t, P1, P2, epsilon)
        Rinv = np.linalg.pinv(Rb) if use_pinv else np.linalg.inv(Rb)
        out = (Rinv, c, P1, P2)
        if i is not None:
            cache[i] = out
        return out

    def lam(i, t, w, prefix=None):
        Rinv, c, P1, P2 = blocks(i, t)
        a, b = bsde.evaluate(i, w) if i is not None else bsde.at(t, w)
        v = (a @ c.B + b @ c.D2 + spec.sigma1.sample(t, w, prefix) @ (c.D1.T @ P1).T
             + spec.sigma2.sample(t, w, prefix) @ (c.D2.T @ P2).T + spec.rho.sample(t, w, prefix))
        return -v @ Rinv.T

    return lam


def _feedback(spec: ProblemSpec, grid: TimeGrid, epsilon: float, bsde_backend: str,
              ensemble: PathEnsemble | None, basis: BasisSpec | None, p1: MatrixPath | None) -> FeedbackLaw:
    p1 = solve_p1(spec, grid) if p1 is None else p1
    p2 = solve_p2(spec, p1, grid, epsilon)
    theta = gain_path(spec, p1, p2, epsilon)
    bsde = solve_bsde(spec, p1, p2, theta, grid, bsde_backend, ensemble, basis)
    lam = _lambda_fn(spec, p1, p2, bsde, epsilon)
    if bsde.backend == "lsmc":
        W2 = ensemble.W2
        vals = np.stack([lam(i, t, W2[:, i], W2[:, : i + 1]) for i, t in enumerate(grid.points)], axis=1)
        ff = EnsembleFeedforward(vals, ensemble.seed)
    else:
        ff = MarkovFeedforward(lambda i, t, w: lam(i, t, w), spec.m)
    info = {"p1": p1, "p2": p2, "bsde": bsde, "lambda": lam, "spec": spec}
    return FeedbackLaw(theta, ff, grid.T, False, epsilon, info)


def perturbed_feedback(spec: ProblemSpec, grid: TimeGrid, epsilon: float, bsde_backend: str = "auto",
                       ensemble: PathEnsemble | None = None, *, basis: BasisSpec | None = None,
                       p1: MatrixPath | None = None) -> FeedbackLaw:
    """Optimal feedback (Theta_eps, Lambda_eps) of the eps-perturbed problem.

    Riccati blow-up propagates as :class:`BlowUp`.  The returned law keeps
    P1, P2_eps and the BSDE solution in ``law.info``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return _feedback(spec, grid, epsilon, bsde_backend, ensemble, basis, p1)


def lambda_at(law: FeedbackLaw, t: float, w) -> np.ndarray:
    """Lambda at any t in [t0, T] and W2 levels w, from dense outputs."""
    return law.info["lambda"](None, float(t), np.atleast_1d(np.asarray(w, dtype=float)))


# ----------------------------------------------------------- value formula

def riccati_value(law: FeedbackLaw, s: float, x0) -> float:
    """Value of the (possibly perturbed) problem from its Riccati/BSDE data:

        V = x0'P2(s)x0 + 2 x0'alpha(s)
            + E int [ s1'P1 s1 + s2'P2 s2 + 2 s2'beta + 2 b'alpha - Lam' R_ Lam ] dt.

    Needs an ODE-type BSDE solution; expectations of exp(kappa W2) terms
    are taken in closed form.
    """
    info = law.info
    spec: ProblemSpec = info["spec"]
    p1, p2, bsde = info["p1"], info["p2"], info["bsde"]
    eps = law.epsilon or 0.0
    if bsde.dense is None:
        raise ValueError("riccati_value needs the ode or exponential backend")
    grid = p2.grid
    if abs(s - grid.t0) > 1e-12:
        raise ValueError("s must be the grid start")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    kappa = bsde.kappa or 0.0
    use_pinv = eps == 0

    def coef(c, t, E):
        if c.deterministic:
            return np.broadcast_to(c.value(t), (E.size, c.shape[0]))
        e = c.exponential
        return e.weight(t) * np.asarray(e.profile(t), dtype=float)[None, :] * E[:, None]

    def integrand_at(t, E):
        P1, P2 = p1.at(t), p2.at(t)
        Rb, _, c = control_blocks(spec, t, P1, P2, eps)
        det, ex = bsde.dense(t)
        a = det[None, :] + (0 if ex is None else E[:, None] * ex[None, :])
        b = kappa * (0 if ex is None else E[:, None] * ex[None, :]) * np.ones_like(a)
        s1, s2 = coef(spec.sigma1, t, E), coef(spec.sigma2, t, E)
        bb, rho = coef(spec.b, t, E), coef(spec.rho, t, E)
        v = a @ c.B + b @ c.D2 + s1 @ (c.D1.T @ P1).T + s2 @ (c.D2.T @ P2).T + rho
        Rinv = np.linalg.pinv(Rb) if use_pinv else np.linalg.inv(Rb)
        lam = -v @ Rinv.T
        return (np.einsum("ki,ij,kj->k", s1, P1, s1) + np.einsum("ki,ij,kj->k", s2, P2, s2)
                + 2 * np.einsum("ki,ki->k", s2, b) + 2 * np.einsum("ki,ki->k", bb, a)
                - np.einsum("ki,ij,kj->k", lam, Rb, lam))

    E3 = np.array([0.0, 1.0, -1.0])

    def expected(t):
        q0, qp, qm = integrand_at(t, E3)
        f1, f2 = (qp - qm) / 2, (qp + qm) / 2 - q0
        tau = t - s
        return q0 + f1 * math.exp(0.5 * kappa**2 * tau) + f2 * math.exp(2 * kappa**2 * tau)

    integral, _ = quad(expected, s, grid.T, limit=400, epsabs=1e-13, epsrel=1e-12)
    det0, ex0 = bsde.dense(s)
    alpha0 = det0 + (0 if ex0 is None else ex0)
    return float(x0 @ p2.at(s) @ x0 + 2 * x0 @ alpha0 + integral)


# ------------------------------------------------------------------ PSD case

@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    value: float | None = None
    gamma_hat: float | None = None


def check_psd_conditions(spec: ProblemSpec, grid: TimeGrid, tol: float = 1e-12) -> list[str]:
    """Return violations of R >= delta I, G >= 0, Q - S'R^{-1}S >= 0."""
    problems = []
    if min_eigenvalue(spec.G) < -tol:
        problems.append("G is not positive semidefinite")
    for t in grid.points:
        c = spec.coeffs(t)
        lr = min_eigenvalue(c.R)
        if lr <= tol:
            problems.append(f"R not uniformly positive at t={t:.6g} (min eig {lr:.3g})")
            break
        M = c.Q - c.S.T @ np.linalg.solve(c.R, c.S)
        lq = min_eigenvalue(0.5 * (M + M.T))
        if lq < -tol * max(1.0, float(np.max(np.abs(c.Q)))):
            problems.append(f"Q - S'R^-1 S not positive semidefinite at t={t:.6g} (min eig {lq:.3g})")
            break
    return problems


def solve_psd(spec: ProblemSpec, s: float, x0, grid: TimeGrid | None = None, bsde_backend: str = "auto",
              ensemble: PathEnsemble | None = None, *, basis: BasisSpec | None = None):
    """Optimal feedback in the positive-semidefinite case with a simulated cost.

    Returns the law and a :class:`CostEstimate` whose ``value`` is the exact
    value from the Riccati/BSDE data when available.
    """
    from .riccati import check_uniform_positivity

    grid = ensemble.grid if grid is None else grid
    problems = check_psd_conditions(spec, grid)
    if problems:
        raise AssumptionError("; ".join(problems))
    law = _feedback(spec, grid, 0.0, bsde_backend, ensemble, basis, None)
    gamma_hat, _ = check_uniform_positivity(spec, law.info["p1"], law.info["p2"], grid)
    value = riccati_value(law, s, x0) if law.info["bsde"].dense is not None else None
    if ensemble is None:
        return law, CostEstimate(float("nan"), float("nan"), value, gamma_hat)
    filt = simulate_filtered_state(spec, law, ensemble, s, x0)
    full = simulate_full_state(spec, filt.u, ensemble, s, x0)
    mean, se = mean_stderr(path_costs(spec, full))
    return law, CostEstimate(mean, se, value, gamma_hat)


# ------------------------------------------------------------ epsilon ladder

@dataclass(frozen=True)
class LadderCaps:
    norm_cap: float = 1e8
    cauchy_rel: float = 1e-3
    superlinear_slope: float = 1.0
    gamma_tol: float = 1e-10
    screen_depth: int = 4
    keep_laws: int | None = None


@dataclass
class Rung:
    epsilon: float
    norm: float
    stderr: float
    blowup_t: float | None = None


@dataclass
class SolvabilityReport:
    s: float
    x0: np.ndarray
    ladder: list[float]
    rungs: list[Rung]
    cauchy: list[tuple[float, float, float, float]]
    verdict: str
    gamma_d: float | None
    laws: dict[float, FeedbackLaw] = field(default_factory=dict, repr=False)
    limit_law: FeedbackLaw | None = field(default=None, repr=False)
    limit_control: np.ndarray | None = field(default=None, repr=False)
    limit_norm: tuple[float, float] | None = None
    reason: str = ""

    @property
    def norms(self) -> list[float]:
        return [r.norm for r in self.rungs]

    def to_json(self) -> dict[str, Any]:
        return {
            "s": self.s,
            "x0": [float(v) for v in self.x0],
            "verdict": self.verdict,
            "reason": self.reason,
            "gamma_d": self.gamma_d,
            "ladder": [
                {"epsilon": r.epsilon, "norm": r.norm, "stderr": r.stderr, "blowup_t": r.blowup_t}
                for r in self.rungs
            ],
            "cauchy": [
                {"epsilon_i": a, "epsilon_j": b, "distance": d, "stderr": e} for a, b, d, e in self.cauchy
            ],
            "limit_norm": None if self.limit_norm is None else {"mean": self.limit_norm[0], "stderr": self.limit_norm[1]},
        }


def _verdict(rungs: list[Rung], cauchy, caps: LadderCaps) -> tuple[str, str]:
    norms = np.array([r.norm for r in rungs])
    eps = np.array([r.epsilon for r in rungs])
    if len(rungs) >= 4:
        tail_n, tail_e = norms[-4:], eps[-4:]
        if np.all(np.isfinite(tail_n)) and np.all(tail_n > 0) and np.all(np.diff(tail_n) > 0):
            slope = np.polyfit(np.log(1 / tail_e), np.log(tail_n), 1)[0]
            if slope > caps.superlinear_slope:
                return DIVERGING, f"norm grows like eps^-{slope:.3g} over the last four rungs"
    if not np.all(np.isfinite(norms)) or np.max(norms) >= caps.norm_cap:
        return INCONCLUSIVE, "norm cap exceeded or Riccati blow-up"
    if len(cauchy) < 3:
        return INCONCLUSIVE, "ladder too short for the Cauchy test"
    d = [c[2] for c in cauchy[-3:]]
    thr = caps.cauchy_rel * (1 + norms[-1])
    if d[0] > d[1] > d[2] and max(d) < thr:
        return SOLVABLE, f"last Cauchy distances {d[0]:.3g} > {d[1]:.3g} > {d[2]:.3g} below {thr:.3g}"
    return INCONCLUSIVE, f"Cauchy distances {d} not decreasing below {thr:.3g}"


def epsilon_ladder(spec: ProblemSpec, s: float, x0, ladder: Sequence[float], ensemble: PathEnsemble,
                   caps: LadderCaps = LadderCaps(), *, bsde_backend: str = "auto",
                   basis: BasisSpec | None = None, workers: int = 1) -> SolvabilityReport:
    """Run the perturbed pipelines along a decreasing ladder on one ensemble."""
    ladder = [float(e) for e in ladder]
    if not ladder or any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("ladder must be a nonempty strictly decreasing list of positive reals")
    grid = ensemble.grid
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    tree = build_tree(spec, s, grid.T, caps.screen_depth)
    gamma_d = estimate_gamma(tree)
    if gamma_d < -caps.gamma_tol:
        return SolvabilityReport(s, x0, ladder, [], [], ASSUMPTION_VIOLATED, gamma_d,
                                 reason=f"tree gamma_d={gamma_d:.6g} < 0 at depth {caps.screen_depth}")
    p1 = solve_p1(spec, grid)
    keep = caps.keep_laws
    if keep is None:
        keep = len(ladder) if spec.deterministic_data or bsde_backend == "exponential" \
            or (bsde_backend == "auto" and spec.exponential_kappa is not None) else 4

    def run(eps: float):
        try:
            law = perturbed_feedback(spec, grid, eps, bsde_backend, ensemble, basis=basis, p1=p1)
        except BlowUp as exc:
            return eps, None, None, exc.t_star
        traj = simulate_filtered_state(spec, law, ensemble, s, x0)
        return eps, law, traj.u, None

    rungs: list[Rung] = []
    cauchy = []
    laws: dict[float, FeedbackLaw] = {}
    prev_u = None
    last_u = None
    chunk = max(1, int(workers))
    with ThreadPoolExecutor(max_workers=chunk) as pool:
        for start in range(0, len(ladder), chunk):
            for eps, law, u, t_star in pool.map(run, ladder[start : start + chunk]):
                if law is None:
                    rungs.append(Rung(eps, float("inf"), float("nan"), t_star))
                    prev_u = None
                    continue
                norm, se = mean_stderr(grid.h * np.einsum("kij,kij->k", u, u))
                rungs.append(Rung(eps, norm, se))
                if prev_u is not None:
                    diff = u - prev_u
                    d, de = mean_stderr(grid.h * np.einsum("kij,kij->k", diff, diff))
                    cauchy.append((rungs[-2].epsilon, eps, d, de))
                prev_u = u
                last_u = u
                laws[eps] = law
                if len(laws) > keep:
                    laws.pop(next(iter(laws)))
    verdict, reason = _verdict(rungs, cauchy, caps)
    report = SolvabilityReport(s, x0, ladder, rungs, cauchy, verdict, gamma_d, laws, reason=reason)
    if verdict == SOLVABLE:
        report.limit_law = laws[ladder[-1]]
        report.limit_control = last_u
        report.limit_norm = (rungs[-1].norm, rungs[-1].stderr)
    return report


# -------------------------------------------------------- weak closed loop

@dataclass(frozen=True)
class ExtractionThresholds:
    cauchy_rel: float = 1e-3
    growth_factor: float = 5.0


@dataclass
class ConvergenceTable:
    truncations: list[float]
    grid_truncations: list[float]
    epsilons: list[float]
    theta_dist: np.ndarray   # (n_trunc, n_pairs)
    lambda_dist: np.ndarray  # (n_trunc, n_pairs)
    lambda_stderr: np.ndarray
    theta_sq_integral: list[float]
    lambda_sq_integral: list[float]
    growth_ratios: list[float]
    window_ratio: float | None
    singular_at_T: bool

    def rows(self):
        for k, tp in enumerate(self.truncations):
            for j in range(len(self.epsilons) - 1):
                yield [tp, self.epsilons[j], self.epsilons[j + 1], self.theta_dist[k, j],
                       self.lambda_dist[k, j], self.lambda_stderr[k, j]]

    def to_json(self) -> dict[str, Any]:
        return {
            "truncations": self.truncations,
            "grid_truncations": self.grid_truncations,
            "theta_sq_integral": self.theta_sq_integral,
            "lambda_sq_integral": self.lambda_sq_integral,
            "growth_ratios": self.growth_ratios,
            "window_ratio": self.window_ratio,
            "singular_at_T": self.singular_at_T,
            "final_theta_dist": [float(v) for v in self.theta_dist[:, -1]] if self.theta_dist.size else [],
            "final_lambda_dist": [float(v) for v in self.lambda_dist[:, -1]] if self.lambda_dist.size else [],
        }


def _lambda_values(law: FeedbackLaw, ensemble: PathEnsemble, j_max: int) -> np.ndarray:
    W2 = ensemble.W2
    ts = ensemble.grid.points
    return np.stack([law.lam.at(i, ts[i], W2[:, i], W2[:, : i + 1]) for i in range(j_max + 1)], axis=1)


def extract_weak_closed_loop(laws: Sequence[FeedbackLaw], truncations: Sequence[float],
                             thresholds: ExtractionThresholds = ExtractionThresholds(),
                             ensemble: PathEnsemble | None = None) -> tuple[FeedbackLaw, ConvergenceTable]:
    """Check Cauchy convergence of (Theta_eps, Lambda_eps) on [t0, T'] and
    return the smallest-eps law restricted to the largest T'.

    ``singular_at_T`` is set when the mean of |Theta|^2 over the last
    truncation window exceeds ``growth_factor`` times its mean over the first.
    """
    laws = sorted(laws, key=lambda law: -law.epsilon)
    if len(laws) < 2:
        raise ValueError("need at least two laws")
    eps = [law.epsilon for law in laws]
    if len(set(eps)) != len(eps):
        raise ValueError("duplicate epsilon values")
    grid = laws[0].theta.grid
    if any(law.theta.grid != grid for law in laws):
        raise ValueError("laws live on different grids")
    truncations = sorted(float(t) for t in truncations)
    if not truncations or truncations[-1] >= grid.T or truncations[0] <= grid.t0:
        raise ValueError("truncations must lie strictly inside (t0, T)")
    idx = [int(round((tp - grid.t0) / grid.h)) for tp in truncations]
    ts = grid.points
    j_max = idx[-1]
    has_lambda = ensemble is not None

    n_tr, n_pairs = len(truncations), len(laws) - 1
    th = np.zeros((n_tr, n_pairs))
    la = np.zeros((n_tr, n_pairs))
    la_se = np.zeros((n_tr, n_pairs))

    def cum_int(values_sq, j):
        return trapezoid(values_sq[..., : j + 1], ts[: j + 1], axis=-1)

    prev_lam = _lambda_values(laws[0], ensemble, j_max) if has_lambda else None
    for p in range(n_pairs):
        a, b = laws[p], laws[p + 1]
        dth = np.sum((a.theta.values - b.theta.values) ** 2, axis=(1, 2))
        cur_lam = _lambda_values(b, ensemble, j_max) if has_lambda else None
        dl = np.sum((prev_lam - cur_lam) ** 2, axis=2) if has_lambda else None
        for k, j in enumerate(idx):
            th[k, p] = cum_int(dth, j)
            if has_lambda:
                la[k, p], la_se[k, p] = mean_stderr(cum_int(dl, j))
        prev_lam = cur_lam

    last = laws[-1]
    th_sq = np.sum(last.theta.values**2, axis=(1, 2))
    I = [float(cum_int(th_sq, j)) for j in idx]
    L = []
    if has_lambda:
        lam_sq = np.sum(prev_lam**2, axis=2)
        L = [mean_stderr(cum_int(lam_sq, j))[0] for j in idx]

    for k, tp in enumerate(truncations):
        for name, dist, scale in (("Theta", th[k], I[k]), ("Lambda", la[k], L[k] if L else 0.0)):
            if name == "Lambda" and not has_lambda:
                continue
            thr = thresholds.cauchy_rel * (1.0 + scale)
            tail = dist[-3:]
            ok = dist[-1] <= thr and all(x >= y for x, y in zip(tail, tail[1:]))
            if not ok:
                raise NotConverged(tp, f"{name} distances {list(map(float, tail))} vs threshold {thr:.3g}")

    tg = [float(ts[j]) for j in idx]
    ratios = []
    for k in range(1, n_tr):
        d_inv = 1.0 / (grid.T - tg[k]) - 1.0 / (grid.T - tg[k - 1])
        ratios.append((I[k] - I[k - 1]) / d_inv)
    window = None
    singular = False
    if n_tr >= 2:
        first = I[0] / (tg[0] - grid.t0)
        last_mean = (I[-1] - I[-2]) / (tg[-1] - tg[-2])
        window = last_mean / first if first > 0 else math.inf
        singular = window >= thresholds.growth_factor
    limit = FeedbackLaw(last.theta, last.lam, tg[-1], singular, last.epsilon, dict(last.info))
    table = ConvergenceTable(truncations, tg, eps, th, la, la_se, I, L, ratios, window, singular)
    return limit, table
