"""Seeded path ensembles, Euler-Maruyama simulation and Monte Carlo costs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Protocol

import numpy as np

from ._csv import write_csv
from .linalg import mean_stderr
from .model import ProblemSpec, TimeGrid
from .riccati import MatrixPath

_TIME_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Brownian increments dW1, dW2 of shape (K, n_steps), each N(0, h)."""

    grid: TimeGrid
    K: int
    seed: int
    dW1: np.ndarray = field(repr=False)
    dW2: np.ndarray = field(repr=False)

    @cached_property
    def W1(self) -> np.ndarray:
        return _cumulative(self.dW1)

    @cached_property
    def W2(self) -> np.ndarray:
        return _cumulative(self.dW2)


def _cumulative(dW: np.ndarray) -> np.ndarray:
    out = np.zeros((dW.shape[0], dW.shape[1] + 1))
    np.cumsum(dW, axis=1, out=out[:, 1:])
    return out


def path_generator(seed: int, path_id: int) -> np.random.Generator:
    """Counter-based Philox stream owned by one path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(path_id,))))


def sample_ensemble(grid: TimeGrid, K: int, seed: int) -> PathEnsemble:
    """Draw K paths; path i depends only on (seed, i).

    Each path consumes a (2, n_steps) block of standard normals from its
    own stream: row 0 drives W1 and row 1 drives W2.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    N = grid.n_steps
    z = np.empty((2, K, N))
    for p in range(K):
        z[:, p] = path_generator(seed, p).standard_normal((2, N))
    sq = np.sqrt(grid.h)
    dW1, dW2 = z[0] * sq, z[1] * sq
    dW1.flags.writeable = False
    dW2.flags.writeable = False
    return PathEnsemble(grid, K, seed, dW1, dW2)


# ---------------------------------------------------------------- feedback

class Feedforward(Protocol):
    def at(self, i: int, t: float, w: np.ndarray, prefix: np.ndarray) -> np.ndarray: ...


@dataclass
class DeterministicFeedforward:
    values: np.ndarray  # (N+1, m)

    def at(self, i, t, w, prefix):
        return np.broadcast_to(self.values[i], (np.shape(w)[0], self.values.shape[1]))


@dataclass
class EnsembleFeedforward:
    """Per-path values (K, N+1, m) tied to one ensemble."""

    values: np.ndarray
    seed: int

    def at(self, i, t, w, prefix):
        if np.shape(w)[0] != self.values.shape[0]:
            raise ValueError("ensemble feedforward evaluated on a different ensemble")
        return self.values[:, i]


@dataclass
class MarkovFeedforward:
    """Closed form (i, t, w) -> (K, m) in the current W2 level."""

    fn: Callable[[int, float, np.ndarray], np.ndarray]
    m: int

    def at(self, i, t, w, prefix):
        return np.asarray(self.fn(i, t, np.asarray(w, dtype=float))).reshape(-1, self.m)


@dataclass
class FeedbackLaw:
    """u = Theta x_hat + Lambda, valid on [t0, valid_until]."""

    theta: MatrixPath
    lam: Feedforward
    valid_until: float
    singular_at_T: bool = False
    epsilon: float | None = None
    info: dict = field(default_factory=dict, repr=False)

    def check_time(self, t: float) -> None:
        if t > self.valid_until + _TIME_TOL:
            raise ValueError(f"feedback law evaluated at t={t:.10g} beyond valid_until={self.valid_until:.10g}")
        if self.singular_at_T and t >= self.theta.grid.T - _TIME_TOL:
            raise ValueError("feedback law singular at T evaluated at T")

    def control(self, i: int, x: np.ndarray, w: np.ndarray, prefix: np.ndarray) -> np.ndarray:
        t = float(self.theta.grid.points[i])
        self.check_time(t)
        return x @ self.theta[i].T + self.lam.at(i, t, w, prefix)


# ------------------------------------------------------------- trajectories

@dataclass
class Trajectories:
    """States (K, N+1, n) and left-endpoint controls (K, N, m) on a grid."""

    grid: TimeGrid
    x: np.ndarray
    u: np.ndarray
    w2: np.ndarray = field(repr=False)
    kind: str = "filtered"

    def to_csv(self, path: str | os.PathLike, max_paths: int | None = None) -> None:
        K, _, n = self.x.shape
        m = self.u.shape[2]
        ts = self.grid.points
        N = self.grid.n_steps
        nan = [float("nan")] * m
        rows = ([p, t, *self.x[p, i], *(self.u[p, i] if i < N else nan)]
                for p in range(min(K, max_paths or K)) for i, t in enumerate(ts))
        write_csv(path, ["path_id", "t", *[f"x_{j}" for j in range(n)], *[f"u_{j}" for j in range(m)]], rows)


def _start(ensemble: PathEnsemble, s: float, x0, n: int) -> np.ndarray:
    if abs(s - ensemble.grid.t0) > _TIME_TOL:
        raise ValueError(f"initial time {s} differs from ensemble start {ensemble.grid.t0}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != n:
        raise ValueError(f"x0 must have {n} components")
    return np.tile(x0, (ensemble.K, 1))


def simulate_filtered_state(spec: ProblemSpec, law: FeedbackLaw, ensemble: PathEnsemble,
                            s: float, x0) -> Trajectories:
    """Euler-Maruyama for the filtered state driven by W2 alone under u = Theta x_hat + Lambda."""
    grid = ensemble.grid
    if law.theta.grid != grid:
        raise ValueError("feedback law and ensemble live on different grids")
    K, N, h = ensemble.K, grid.n_steps, grid.h
    ts = grid.points
    W2, dW2 = ensemble.W2, ensemble.dW2
    x = np.empty((K, N + 1, spec.n))
    u = np.empty((K, N, spec.m))
    x[:, 0] = _start(ensemble, s, x0, spec.n)
    for i in range(N):
        t = ts[i]
        c = spec.coeffs(t)
        w, prefix = W2[:, i], W2[:, : i + 1]
        xi = x[:, i]
        ui = law.control(i, xi, w, prefix)
        u[:, i] = ui
        drift = xi @ c.A.T + ui @ c.B.T + spec.b.sample(t, w, prefix)
        diff = xi @ c.C2.T + ui @ c.D2.T + spec.sigma2.sample(t, w, prefix)
        x[:, i + 1] = xi + drift * h + diff * dW2[:, i, None]
    return Trajectories(grid, x, u, W2, "filtered")


def simulate_full_state(spec: ProblemSpec, u, ensemble: PathEnsemble, s: float, x0) -> Trajectories:
    """Euler-Maruyama for the full state under a given W2-adapted control."""
    grid = ensemble.grid
    if isinstance(u, Trajectories):
        if u.grid != grid:
            raise ValueError("control trajectories live on a different grid")
        u = u.u
    u = np.asarray(u, dtype=float)
    K, N, h = ensemble.K, grid.n_steps, grid.h
    if u.ndim != 3 or u.shape[:2] != (K, N) or u.shape[2] != spec.m:
        raise ValueError(f"control shape {u.shape} does not match ensemble ({K}, {N}, {spec.m})")
    ts = grid.points
    W2 = ensemble.W2
    x = np.empty((K, N + 1, spec.n))
    x[:, 0] = _start(ensemble, s, x0, spec.n)
    for i in range(N):
        t = ts[i]
        c = spec.coeffs(t)
        w, prefix = W2[:, i], W2[:, : i + 1]
        xi, ui = x[:, i], u[:, i]
        drift = xi @ c.A.T + ui @ c.B.T + spec.b.sample(t, w, prefix)
        d1 = xi @ c.C1.T + ui @ c.D1.T + spec.sigma1.sample(t, w, prefix)
        d2 = xi @ c.C2.T + ui @ c.D2.T + spec.sigma2.sample(t, w, prefix)
        x[:, i + 1] = xi + drift * h + d1 * ensemble.dW1[:, i, None] + d2 * ensemble.dW2[:, i, None]
    return Trajectories(grid, x, u, W2, "full")


def path_costs(spec: ProblemSpec, traj: Trajectories) -> np.ndarray:
    """Per-path cost with left-endpoint quadrature."""
    grid = traj.grid
    ts, h, N = grid.points, grid.h, grid.n_steps
    K = traj.x.shape[0]
    total = np.zeros(K)
    for i in range(N):
        t = ts[i]
        c = spec.coeffs(t)
        x, u = traj.x[:, i], traj.u[:, i]
        w, prefix = traj.w2[:, i], traj.w2[:, : i + 1]
        run = (np.einsum("ki,ij,kj->k", x, c.Q, x) + 2 * np.einsum("ki,ij,kj->k", u, c.S, x)
               + np.einsum("ki,ij,kj->k", u, c.R, u)
               + 2 * np.einsum("ki,ki->k", spec.q.sample(t, w, prefix), x)
               + 2 * np.einsum("ki,ki->k", spec.rho.sample(t, w, prefix), u))
        total += h * run
    xT = traj.x[:, N]
    gT = spec.g.sample(grid.T, traj.w2[:, N], traj.w2)
    return total + np.einsum("ki,ij,kj->k", xT, spec.G, xT) + 2 * np.einsum("ki,ki->k", gT, xT)


def evaluate_cost(spec: ProblemSpec, traj: Trajectories, s: float, x0) -> tuple[float, float]:
    """Monte Carlo estimate of the cost with its standard error."""
    if abs(s - traj.grid.t0) > _TIME_TOL:
        raise ValueError("trajectories do not start at s")
    if not np.allclose(traj.x[:, 0], np.asarray(x0, dtype=float).reshape(1, -1), rtol=0, atol=0):
        raise ValueError("trajectories do not start at x0")
    return mean_stderr(path_costs(spec, traj))


def path_control_norms(traj: Trajectories) -> np.ndarray:
    return traj.grid.h * np.einsum("kij,kij->k", traj.u, traj.u)


def control_l2_norm(traj: Trajectories) -> tuple[float, float]:
    """Estimate of E int |u|^2 dt with its standard error."""
    return mean_stderr(path_control_norms(traj))
