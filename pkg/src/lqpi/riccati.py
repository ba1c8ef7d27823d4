"""Backward matrix ODEs: P1, P2 (pseudoinverse or epsilon-perturbed) and the
Lyapunov pair of a fixed feedback gain.

    P1' + A'P1 + P1 A + C1'P1 C1 + C2'P1 C2 + Q = 0,                 P1(T) = G
    P2' + A'P2 + P2 A + C1'P1 C1 + C2'P2 C2 - S_'R_^+ S_ + Q = 0,     P2(T) = G

with R_ = R + eps I + D1'P1 D1 + D2'P2 D2 and S_ = B'P2 + D1'P1 C1 + D2'P2 C2 + S.
For eps > 0 the true inverse is used; for eps = 0 the pseudoinverse.

The default integrator is an adaptive 8th-order Runge-Kutta method with
dense output (``method="dop853"``); a fixed-step classical RK4 with
per-step symmetrization is available as ``method="rk4"``.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from ._csv import write_csv
from .linalg import min_eigenvalue, pinv, symmetrize
from .model import ProblemSpec, TimeGrid

DEFAULT_CAP = 1e12
RTOL = 1e-12
ATOL = 1e-15


class BlowUp(RuntimeError):
    """An entry exceeded the magnitude cap (or the block became singular)."""

    def __init__(self, t_star: float, name: str = "", reason: str = "magnitude cap exceeded"):
        super().__init__(f"{name or 'solution'} blew up at t*={t_star:.10g}: {reason}")
        self.t_star = float(t_star)
        self.name = name
        self.reason = reason


class SingularBlock(UserWarning):
    """The pseudoinverse rank changed between adjacent grid points."""


@dataclass
class MatrixPath:
    """Matrix-valued function sampled on a grid, with optional dense output."""

    grid: TimeGrid
    values: np.ndarray
    symmetric: bool = False
    name: str = ""
    interpolant: Callable[[float], np.ndarray] | None = field(default=None, repr=False, compare=False)
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[0] != self.grid.n_steps + 1:
            raise ValueError(f"values must have shape (n_steps+1, r, c), got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]

    def at(self, t: float) -> np.ndarray:
        """Value at an arbitrary time in [t0, T]."""
        if self.interpolant is not None:
            return self.interpolant(t)
        ts = self.grid.points
        x = np.clip((t - self.grid.t0) / self.grid.h, 0, self.grid.n_steps)
        i = min(int(x), self.grid.n_steps - 1)
        w = x - i
        return (1 - w) * self.values[i] + w * self.values[i + 1] if ts.size > 1 else self.values[0]

    def max_abs_diff(self, other: "MatrixPath") -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def csv_rows(self):
        for t, M in zip(self.grid.points, self.values):
            yield [t, *M.reshape(-1)]

    def csv_header(self) -> list[str]:
        r, c = self.shape
        return ["t"] + [f"{self.name or 'M'}_{i}{j}" for i in range(r) for j in range(c)]

    def to_csv(self, path: str | os.PathLike) -> None:
        write_csv(path, self.csv_header(), self.csv_rows())


# ------------------------------------------------------------------ integrator

def _integrate_backward(rhs: Callable[[float, np.ndarray], np.ndarray], y_T: np.ndarray,
                        grid: TimeGrid, *, method: str, cap: float, name: str):
    """Integrate y' = rhs(t, y) from T down to t0.

    Returns grid values (ascending in t) and a dense-output callable.
    """
    ts = grid.points
    y_T = np.asarray(y_T, dtype=float)
    if method == "rk4":
        return _rk4_backward(rhs, y_T, grid, cap=cap, name=name)
    if method != "dop853":
        raise ValueError(f"unknown integration method {method!r}")

    def hit_cap(t, y):
        return cap - np.max(np.abs(y))

    hit_cap.terminal = True
    atol = ATOL * max(1.0, float(np.max(np.abs(y_T), initial=0.0)))
    with np.errstate(over="raise", invalid="raise"):
        try:
            sol = solve_ivp(rhs, (grid.T, grid.t0), y_T, method="DOP853", t_eval=ts[::-1],
                            dense_output=True, rtol=RTOL, atol=atol, events=hit_cap)
        except FloatingPointError:
            raise BlowUp(float("nan"), name, "floating-point overflow") from None
    if sol.status == 1:
        raise BlowUp(sol.t_events[0][0], name)
    if sol.status != 0:
        t_star = sol.t[-1] if sol.t.size else grid.T
        raise BlowUp(t_star, name, sol.message)
    values = sol.y[:, ::-1].T.copy()
    values[-1] = y_T
    if not np.all(np.isfinite(values)):
        raise BlowUp(grid.t0, name, "non-finite values")
    dense = sol.sol
    return values, lambda t: dense(t)


def _rk4_backward(rhs, y_T, grid, *, cap, name):
    ts = grid.points
    h = grid.h
    values = np.empty((ts.size, y_T.size))
    values[-1] = y_T
    y = y_T.copy()
    for i in range(grid.n_steps, 0, -1):
        t = ts[i]
        k1 = rhs(t, y)
        k2 = rhs(t - h / 2, y - h / 2 * k1)
        k3 = rhs(t - h / 2, y - h / 2 * k2)
        k4 = rhs(t - h, y - h * k3)
        y = y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > cap:
            raise BlowUp(ts[i - 1], name)
        values[i - 1] = y
    derivs = np.array([rhs(t, v) for t, v in zip(ts, values)])
    spline = CubicHermiteSpline(ts, values, derivs, axis=0)
    return values, lambda t: spline(t)


def _symmetric_path(values: np.ndarray, dense, grid: TimeGrid, n: int, name: str, **info) -> MatrixPath:
    raw = values.reshape(-1, n, n)
    drift = float(np.max(np.abs(raw - np.swapaxes(raw, 1, 2)), initial=0.0))
    sym = 0.5 * (raw + np.swapaxes(raw, 1, 2))

    def interp(t: float) -> np.ndarray:
        return symmetrize(np.asarray(dense(t)).reshape(n, n))

    return MatrixPath(grid, sym, True, name, interp, {"symmetry_drift": drift, **info})


# ------------------------------------------------------------------ equations

def solve_p1(spec: ProblemSpec, grid: TimeGrid, *, method: str = "dop853",
             cap: float = DEFAULT_CAP) -> MatrixPath:
    """Solve the P1 equation backward from P1(T) = G."""
    n = spec.n

    def rhs(t, y):
        c = spec.coeffs(t)
        P = y.reshape(n, n)
        dP = c.A.T @ P + P @ c.A + c.C1.T @ P @ c.C1 + c.C2.T @ P @ c.C2 + c.Q
        return -dP.reshape(-1)

    try:
        values, dense = _integrate_backward(rhs, spec.G.reshape(-1), grid, method=method, cap=cap, name="P1")
    except BlowUp as exc:
        raise RuntimeError(f"P1 equation is linear and cannot blow up: {exc}") from exc
    return _symmetric_path(values, dense, grid, n, "P1")


def control_blocks(spec: ProblemSpec, t: float, P1: np.ndarray, P2: np.ndarray,
                   epsilon: float = 0.0):
    """The blocks (R_, S_) at time t, with R shifted by epsilon I."""
    c = spec.coeffs(t)
    Rb = c.R + c.D1.T @ P1 @ c.D1 + c.D2.T @ P2 @ c.D2
    if epsilon:
        Rb = Rb + epsilon * np.eye(spec.m)
    Sb = c.B.T @ P2 + c.D1.T @ P1 @ c.C1 + c.D2.T @ P2 @ c.C2 + c.S
    return symmetrize(Rb), Sb, c


def _gain(Rb: np.ndarray, Sb: np.ndarray, use_pinv: bool) -> np.ndarray:
    if use_pinv:
        return -pinv(Rb) @ Sb
    return -np.linalg.solve(Rb, Sb)


def solve_p2(spec: ProblemSpec, p1: MatrixPath, grid: TimeGrid, epsilon: float = 0.0, *,
             method: str = "dop853", cap: float = DEFAULT_CAP) -> MatrixPath:
    """Solve the P2 equation (epsilon = 0, pseudoinverse) or its perturbation."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if p1.grid != grid:
        raise ValueError("p1 must live on the same grid")
    n = spec.n
    use_pinv = epsilon == 0

    def rhs(t, y):
        P = y.reshape(n, n)
        P1 = p1.at(t)
        Rb, Sb, c = control_blocks(spec, t, P1, P, epsilon)
        try:
            K = -_gain(Rb, Sb, use_pinv)
        except np.linalg.LinAlgError:
            raise BlowUp(t, "P2", "singular control block") from None
        dP = c.A.T @ P + P @ c.A + c.C1.T @ P1 @ c.C1 + c.C2.T @ P @ c.C2 + c.Q - Sb.T @ K
        return -dP.reshape(-1)

    values, dense = _integrate_backward(rhs, spec.G.reshape(-1), grid, method=method, cap=cap, name="P2")
    path = _symmetric_path(values, dense, grid, n, "P2", epsilon=epsilon)
    if use_pinv:
        ranks = [pinv(control_blocks(spec, t, p1[i], path[i])[0], return_rank=True)[1]
                 for i, t in enumerate(grid.points)]
        changes = [float(grid.points[i]) for i in range(1, len(ranks)) if ranks[i] != ranks[i - 1]]
        path.info["ranks"] = ranks
        path.info["rank_changes"] = changes
        for t in changes:
            warnings.warn(SingularBlock(f"pseudoinverse rank changes at t={t:.10g}"), stacklevel=2)
    return path


def gain_path(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, epsilon: float = 0.0) -> MatrixPath:
    """Feedback gain Theta = -R_^{-1} S_ (pseudoinverse when epsilon = 0)."""
    grid = p2.grid
    use_pinv = epsilon == 0

    def theta(t: float) -> np.ndarray:
        Rb, Sb, _ = control_blocks(spec, t, p1.at(t), p2.at(t), epsilon)
        return _gain(Rb, Sb, use_pinv)

    values = np.array([_gain(*control_blocks(spec, t, p1[i], p2[i], epsilon)[:2], use_pinv)
                       for i, t in enumerate(grid.points)])
    return MatrixPath(grid, values, False, "Theta", theta, {"epsilon": epsilon})


def solve_lyapunov_pair(spec: ProblemSpec, theta: MatrixPath, grid: TimeGrid, *,
                        p1_closed_loop: bool = False, method: str = "dop853",
                        cap: float = DEFAULT_CAP) -> tuple[MatrixPath, MatrixPath]:
    """Lyapunov pair (P1~, P2~) of the feedback u = Theta x_hat + v.

    P2~ solves

        P' + P(A+B Th) + (A+B Th)'P + (C1+D1 Th)'P1~(C1+D1 Th)
           + (C2+D2 Th)'P(C2+D2 Th) + Th'R Th + S'Th + Th'S + Q = 0,   P(T) = G.

    By default P1~ is the open-loop P1 (the W1-driven estimation error
    does not feel the feedback, which acts on x_hat only).  With
    ``p1_closed_loop=True`` P1~ instead solves the Lyapunov equation with
    Theta inserted in the drift and both diffusions; the two coincide
    when B Theta, D1 Theta and D2 Theta vanish.
    """
    n = spec.n
    th_shape = theta.shape
    if th_shape != (spec.m, n):
        raise ValueError(f"theta must be {spec.m}x{n}, got {th_shape}")
    if not np.all(np.isfinite(theta.values)):
        raise ValueError("theta has non-finite grid values")

    def closed(t):
        c = spec.coeffs(t)
        Th = theta.at(t)
        return c, Th, c.A + c.B @ Th, c.C1 + c.D1 @ Th, c.C2 + c.D2 @ Th

    def p2_rhs(P, P1, c, Th, Ac, C1c, C2c):
        dP = (P @ Ac + Ac.T @ P + C1c.T @ P1 @ C1c + C2c.T @ P @ C2c
              + Th.T @ c.R @ Th + c.S.T @ Th + Th.T @ c.S + c.Q)
        return -dP

    if p1_closed_loop:
        def rhs(t, y):
            P1, P2 = y[: n * n].reshape(n, n), y[n * n :].reshape(n, n)
            c, Th, Ac, C1c, C2c = closed(t)
            dP1 = -(P1 @ Ac + Ac.T @ P1 + C1c.T @ P1 @ C1c + C2c.T @ P1 @ C2c + c.Q)
            return np.concatenate([dP1.reshape(-1), p2_rhs(P2, P1, c, Th, Ac, C1c, C2c).reshape(-1)])

        yT = np.concatenate([spec.G.reshape(-1), spec.G.reshape(-1)])
        values, dense = _integrate_backward(rhs, yT, grid, method=method, cap=cap, name="Lyapunov pair")
        k = n * n
        p1t = _symmetric_path(values[:, :k], lambda t: dense(t)[:k], grid, n, "P1_tilde")
        p2t = _symmetric_path(values[:, k:], lambda t: dense(t)[k:], grid, n, "P2_tilde")
        return p1t, p2t

    p1 = solve_p1(spec, grid, method=method, cap=cap)
    p1.name = "P1_tilde"

    def rhs(t, y):
        return p2_rhs(y.reshape(n, n), p1.at(t), *closed(t)).reshape(-1)

    values, dense = _integrate_backward(rhs, spec.G.reshape(-1), grid, method=method, cap=cap, name="P2_tilde")
    return p1, _symmetric_path(values, dense, grid, n, "P2_tilde")


def check_uniform_positivity(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, grid: TimeGrid,
                             epsilon: float = 0.0) -> tuple[float, bool]:
    """Minimum over the grid of the smallest eigenvalue of the control block."""
    if p1.grid != grid or p2.grid != grid:
        raise ValueError("p1 and p2 must live on the given grid")
    gamma = min(min_eigenvalue(control_blocks(spec, t, p1[i], p2[i], epsilon)[0])
                for i, t in enumerate(grid.points))
    return gamma, gamma > 0
