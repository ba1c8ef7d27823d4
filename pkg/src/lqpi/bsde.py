"""The adjoint BSDE for (alpha, beta) driven by W2:

    d alpha = -[ M' alpha + N' beta + F ] dt + beta dW2,    alpha(T) = g,

with M = A + B Theta, N = C2 + D2 Theta and forcing

    F = (C1 + D1 Theta)' P1 sigma1 + N' P2 sigma2 + Theta' rho + P2 b + q.

Three backends:

* ``ode``: deterministic data, so beta = 0 and alpha solves a linear ODE.
* ``exponential``: random data of the form phi(t) exp(kappa W2); then
  alpha = a(t) exp(kappa W2), beta = kappa alpha, and a solves a linear ODE.
* ``lsmc``: least-squares Monte Carlo on a path ensemble.

Forcing terms carrying an endpoint weight (T - t)^p, -1 < p < 0, are handled
exactly: the ODE backends integrate on the clock tau = (T - t)^(1/k),
k = 1/(1+p), in which the integrand is smooth, and the LSMC backend uses
product-trapezoid weights integrated analytically.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermevander
from scipy.integrate import solve_ivp

from ._csv import write_csv
from .linalg import mean_stderr
from .model import Coefficient, ProblemSpec, TimeGrid
from .riccati import MatrixPath

RTOL = 1e-12
ATOL = 1e-14
COND_LIMIT = 1e12


class UnsupportedData(ValueError):
    """The chosen backend cannot represent the inhomogeneous data."""


class IllConditionedRegression(RuntimeError):
    def __init__(self, t: float, cond: float):
        super().__init__(f"regression normal matrix condition {cond:.3g} exceeds {COND_LIMIT:g} at t={t:.10g}")
        self.t = float(t)
        self.cond = float(cond)


@dataclass(frozen=True)
class BasisSpec:
    """Hermite polynomials in z = W2(t)/sqrt(t - t0) up to ``degree``.

    With ``kappa`` set every column is multiplied by exp(kappa W2(t)) and the
    fit is weighted by exp(-2 kappa W2(t)), i.e. ordinary least squares on
    Y exp(-kappa W2) in the polynomial columns.  Without the weight the few
    paths with large W2 dominate every fit and the regression noise
    compounds across time steps.
    """

    degree: int = 3
    kappa: float | None = None

    def __post_init__(self) -> None:
        if self.degree < 0:
            raise ValueError("basis degree must be nonnegative")

    def polynomial(self, t: float, t0: float, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if t - t0 <= 0 or np.ptp(w) == 0:
            return np.ones((w.size, 1))
        return hermevander(w / math.sqrt(t - t0), self.degree)

    def tilt(self, w: np.ndarray) -> np.ndarray | None:
        if self.kappa is None:
            return None
        w = np.asarray(w, dtype=float)
        return np.exp(self.kappa * (w - np.mean(w)))

    def design(self, t: float, t0: float, w: np.ndarray) -> np.ndarray:
        X = self.polynomial(t, t0, w)
        tilt = self.tilt(w)
        return X if tilt is None else X * tilt[:, None]

    def describe(self) -> str:
        base = f"HermiteE(W2/sqrt(t-t0)), degree<={self.degree}"
        return base if self.kappa is None else f"exp({self.kappa:.17g}*W2) * {base}, weight exp(-2*kappa*W2)"


@dataclass
class BsdeSolution:
    """Solution of the adjoint BSDE on a grid.

    Layout by backend: ``ode`` stores alpha, beta as (N+1, n) with beta = 0;
    ``exponential`` stores the deterministic part in ``alpha`` and the
    exponential profile a(t) in ``alpha_exp``; ``lsmc`` stores per-path
    arrays of shape (K, N+1, n).
    """

    backend: str
    grid: TimeGrid
    alpha: np.ndarray
    beta: np.ndarray
    alpha_exp: np.ndarray | None = None
    kappa: float | None = None
    basis: BasisSpec | None = None
    dense: Callable[[float], tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.alpha.shape[-1]

    def evaluate(self, i: int, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(alpha, beta) at grid index i for K paths with W2 levels ``w``."""
        w = np.asarray(w, dtype=float)
        k = w.shape[0]
        if self.backend == "lsmc":
            if self.alpha.shape[0] != k:
                raise ValueError("LSMC solution is tied to its ensemble; path count differs")
            return self.alpha[:, i], self.beta[:, i]
        a = np.broadcast_to(self.alpha[i], (k, self.n))
        if self.backend == "ode":
            return a, np.zeros((k, self.n))
        e = np.exp(self.kappa * w)[:, None] * self.alpha_exp[i][None, :]
        return a + e, self.kappa * e

    def at(self, t: float, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(alpha, beta) at an arbitrary time for the ODE-type backends."""
        if self.dense is None:
            raise ValueError(f"{self.backend} solution has no dense output")
        w = np.asarray(w, dtype=float)
        det, ex = self.dense(t)
        a = np.broadcast_to(det, (w.shape[0], self.n))
        if ex is None:
            return a, np.zeros_like(a)
        e = np.exp(self.kappa * w)[:, None] * ex[None, :]
        return a + e, self.kappa * e

    def to_csv(self, path: str | os.PathLike) -> None:
        n = self.n
        ts = self.grid.points
        a_cols = [f"alpha_{j}" for j in range(n)]
        b_cols = [f"beta_{j}" for j in range(n)]
        if self.backend == "lsmc":
            rows = ([p, t, *self.alpha[p, i], *self.beta[p, i]]
                    for p in range(self.alpha.shape[0]) for i, t in enumerate(ts))
            write_csv(path, ["path_id", "t", *a_cols, *b_cols], rows)
        elif self.backend == "ode":
            write_csv(path, ["t", *a_cols, *b_cols],
                      ([t, *self.alpha[i], *self.beta[i]] for i, t in enumerate(ts)))
        else:
            e_cols = [f"alpha_exp_{j}" for j in range(n)]
            write_csv(path, ["t", *a_cols, *e_cols],
                      ([t, *self.alpha[i], *self.alpha_exp[i]] for i, t in enumerate(ts)))


# ------------------------------------------------------------ forcing terms

class _Coupling:
    """Deterministic matrices multiplying each inhomogeneous datum."""

    def __init__(self, spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, theta: MatrixPath):
        self.spec, self.p1, self.p2, self.theta = spec, p1, p2, theta

    def mats(self, t: float, i: int | None = None):
        if i is None:
            P1, P2, Th = self.p1.at(t), self.p2.at(t), self.theta.at(t)
        else:
            P1, P2, Th = self.p1[i], self.p2[i], self.theta[i]
        c = self.spec.coeffs(t)
        N = c.C2 + c.D2 @ Th
        return {
            "M": (c.A + c.B @ Th).T,
            "N": N.T,
            "sigma1": (c.C1 + c.D1 @ Th).T @ P1,
            "sigma2": N.T @ P2,
            "rho": Th.T,
            "b": P2,
            "q": None,
        }


_FORCED = ("b", "sigma1", "sigma2", "q", "rho")


def _apply(mat: np.ndarray | None, v: np.ndarray) -> np.ndarray:
    """mat @ v for v of shape (..., k)."""
    return v if mat is None else v @ mat.T


def _singular_power(coefs: dict[str, Coefficient]) -> float:
    powers = {c.exponential.power for c in coefs.values()
              if c.exponential is not None and c.exponential.power != 0}
    if len(powers) > 1:
        raise UnsupportedData(f"several endpoint powers {sorted(powers)} are not supported")
    p = powers.pop() if powers else 0.0
    if p and not -1 < p < 0:
        raise UnsupportedData(f"endpoint power {p} outside (-1, 0)")
    return p


# --------------------------------------------------------------- ODE solves

def _linear_backward(L: Callable[[float], np.ndarray], f_reg: Callable[[float], np.ndarray],
                     f_sing: Callable[[float], np.ndarray] | None, power: float,
                     y_T: np.ndarray, grid: TimeGrid):
    """Solve y' = -(L(t) y + f_reg(t) + (T - t)^power f_sing(t)) backward."""
    T = grid.T
    ts = grid.points
    y_T = np.asarray(y_T, dtype=float)
    if f_sing is None or power == 0:
        def rhs(t, y):
            out = L(t) @ y + f_reg(t)
            if f_sing is not None:
                out = out + f_sing(t)
            return -out

        sol = solve_ivp(rhs, (T, grid.t0), y_T, method="DOP853", t_eval=ts[::-1],
                        dense_output=True, rtol=RTOL, atol=ATOL)
        if sol.status != 0:
            raise RuntimeError(f"adjoint ODE failed: {sol.message}")
        values = sol.y[:, ::-1].T.copy()
        values[-1] = y_T
        return values, sol.sol

    k = 1.0 / (1.0 + power)

    def t_of(tau):
        return T - tau**k

    def rhs_tau(tau, y):
        t = t_of(tau)
        return k * tau ** (k - 1) * (L(t) @ y + f_reg(t)) + k * f_sing(t)

    taus = np.maximum(T - ts, 0.0) ** (1.0 / k)
    sol = solve_ivp(rhs_tau, (0.0, taus[0]), y_T, method="DOP853", t_eval=taus[::-1],
                    dense_output=True, rtol=RTOL, atol=ATOL)
    if sol.status != 0:
        raise RuntimeError(f"adjoint ODE failed: {sol.message}")
    values = sol.y.T[::-1].copy()
    values[-1] = y_T
    dense = sol.sol
    return values, lambda t: dense(max(T - t, 0.0) ** (1.0 / k))


def solve_bsde_deterministic(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, theta: MatrixPath,
                             grid: TimeGrid) -> BsdeSolution:
    """ODE backend: all inhomogeneous data deterministic, so beta = 0."""
    coefs = spec.vectors
    bad = [k for k, c in coefs.items() if not c.deterministic]
    if bad:
        raise UnsupportedData(f"non-deterministic data {bad}; use the exponential or lsmc backend")
    values, dense = _solve_deterministic_part(spec, p1, p2, theta, grid)
    sol = BsdeSolution("ode", grid, values, np.zeros_like(values))
    sol.dense = lambda t: (dense(t), None)
    return sol


def _solve_deterministic_part(spec, p1, p2, theta, grid):
    cp = _Coupling(spec, p1, p2, theta)
    coefs = {k: c for k, c in spec.vectors.items() if c.deterministic and not c.is_zero and k != "g"}

    def L(t):
        return cp.mats(t)["M"]

    def f(t):
        mats = cp.mats(t)
        out = np.zeros(spec.n)
        for k, c in coefs.items():
            out = out + _apply(mats[k], c.value(t))
        return out

    g = spec.g.value(spec.T) if spec.g.deterministic else np.zeros(spec.n)
    if not coefs and not np.any(g):
        z = np.zeros((grid.n_steps + 1, spec.n))
        return z, lambda t: np.zeros(spec.n)
    return _linear_backward(L, f, None, 0.0, g, grid)


def solve_bsde_exponential(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, theta: MatrixPath,
                           grid: TimeGrid) -> BsdeSolution:
    """Exact reduction for data phi(t) (T-t)^p exp(kappa W2) plus deterministic data."""
    rand = {k: c for k, c in spec.vectors.items() if not c.deterministic}
    if any(c.exponential is None for c in rand.values()):
        raise UnsupportedData("exponential backend needs every random datum in exponential form")
    kappas = {c.exponential.kappa for c in rand.values()}
    if len(kappas) > 1:
        raise UnsupportedData(f"several exponential rates {sorted(kappas)}")
    if "g" in rand and rand["g"].exponential.power != 0:
        raise UnsupportedData("terminal datum cannot carry an endpoint weight")
    det_vals, det_dense = _solve_deterministic_part(spec, p1, p2, theta, grid)
    if not rand:
        sol = BsdeSolution("exponential", grid, det_vals, np.zeros_like(det_vals),
                           alpha_exp=np.zeros_like(det_vals), kappa=0.0)
        sol.dense = lambda t: (det_dense(t), np.zeros(spec.n))
        return sol
    kappa = kappas.pop()
    power = _singular_power(rand)
    cp = _Coupling(spec, p1, p2, theta)
    forced = {k: c for k, c in rand.items() if k != "g"}

    def L(t):
        mats = cp.mats(t)
        return mats["M"] + kappa * mats["N"] + 0.5 * kappa**2 * np.eye(spec.n)

    def parts(t, singular: bool):
        mats = cp.mats(t)
        out = np.zeros(spec.n)
        for k, c in forced.items():
            e = c.exponential
            if (e.power != 0) != singular:
                continue
            out = out + _apply(mats[k], np.asarray(e.profile(t), dtype=float).reshape(spec.n))
        return out

    g_T = (np.asarray(rand["g"].exponential.profile(spec.T), dtype=float).reshape(spec.n)
           if "g" in rand else np.zeros(spec.n))
    f_sing = (lambda t: parts(t, True)) if power else None
    exp_vals, exp_dense = _linear_backward(L, lambda t: parts(t, False), f_sing, power, g_T, grid)
    sol = BsdeSolution("exponential", grid, det_vals, np.zeros_like(det_vals),
                       alpha_exp=exp_vals, kappa=kappa)
    sol.dense = lambda t: (det_dense(t), exp_dense(t))
    return sol


# ------------------------------------------------------------------- LSMC

def _product_weights(T: float, t_left: float, t_right: float, p: float) -> tuple[float, float]:
    """Weights (wL, wR) with int (T-r)^p f(r) dr ~ wL f(t_left) + wR f(t_right)
    for f linear on the interval."""
    h = t_right - t_left
    if p == 0:
        return h / 2, h / 2
    a, b = max(T - t_right, 0.0), T - t_left
    i1 = (b ** (p + 1) - a ** (p + 1)) / (p + 1)
    i2 = (b ** (p + 2) - a ** (p + 2)) / (p + 2)
    return (i2 - a * i1) / h, (b * i1 - i2) / h


class _Projector:
    """Least-squares projection onto tilt * span(X), weighted by tilt^-2."""

    def __init__(self, X: np.ndarray, t: float, tilt: np.ndarray | None = None):
        scale = np.sqrt(np.mean(X**2, axis=0))
        scale[scale == 0] = 1.0
        U, s, _ = np.linalg.svd(X / scale, full_matrices=False)
        cond = (s[0] / s[-1]) ** 2 if s[-1] > 0 else np.inf
        if cond > COND_LIMIT:
            raise IllConditionedRegression(t, cond)
        self.U = U
        self.tilt = None if tilt is None else tilt[:, None]

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        if self.tilt is None:
            return self.U @ (self.U.T @ Y)
        Yt = Y / self.tilt
        return self.tilt * (self.U @ (self.U.T @ Yt))


def solve_bsde_lsmc(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, theta: MatrixPath,
                    grid: TimeGrid, ensemble, basis: BasisSpec | None = None, *,
                    control_variate: bool = True, n_batches: int = 1) -> BsdeSolution:
    """Backward least-squares Monte Carlo.

    With ``control_variate`` the deterministic part of the data is solved by
    the ODE backend and only the random part is regressed.  Paths are split
    into ``n_batches`` contiguous blocks regressed independently; batch
    means give the reported standard errors.
    """
    if ensemble.grid != grid:
        raise ValueError("ensemble grid differs from solver grid")
    if basis is None:
        basis = BasisSpec(3, spec.exponential_kappa)
    K = ensemble.K
    if n_batches < 1 or K // n_batches < 2:
        raise ValueError("need at least two paths per batch")
    n, N, h, T = spec.n, grid.n_steps, grid.h, grid.T
    ts = grid.points
    W = ensemble.W2
    dW = ensemble.dW2

    coefs = spec.vectors
    if control_variate:
        det_vals, _ = _solve_deterministic_part(spec, p1, p2, theta, grid)
        regress = {k: c for k, c in coefs.items() if not c.deterministic}
    else:
        det_vals = np.zeros((N + 1, n))
        regress = {k: c for k, c in coefs.items() if not c.is_zero}
    g = regress.pop("g", None)
    power = _singular_power(regress)
    cp = _Coupling(spec, p1, p2, theta)

    def forcing(i: int, singular: bool) -> np.ndarray:
        mats = cp.mats(ts[i], i)
        out = np.zeros((K, n))
        for k, c in regress.items():
            is_sing = c.exponential is not None and c.exponential.power != 0
            if is_sing != singular:
                continue
            v = c.smooth_sample(ts[i], W[:, i], W[:, : i + 1])
            out += _apply(mats[k], v)
        return out

    alpha = np.zeros((K, N + 1, n))
    beta = np.zeros((K, N + 1, n))
    if g is not None:
        alpha[:, N] = g.sample(T, W[:, N], W)
    bounds = np.linspace(0, K, n_batches + 1).astype(int)
    resid_z = np.zeros(N)
    M_next = cp.mats(ts[N], N)["M"]
    f_next = forcing(N, False)
    fs_next = forcing(N, True) if power else None
    for i in range(N - 1, -1, -1):
        mats = cp.mats(ts[i], i)
        M_i, N_i = mats["M"], mats["N"]
        f_i = forcing(i, False)
        fs_i = forcing(i, True) if power else None
        Y = alpha[:, i + 1] + 0.5 * h * (alpha[:, i + 1] @ M_next.T) + 0.5 * h * f_next
        if power:
            wl, wr = _product_weights(T, ts[i], ts[i + 1], power)
            Y = Y + wr * fs_next
        EY = np.empty_like(Y)
        Z = np.empty_like(Y)
        resid = np.empty_like(Y)
        fit_resid = np.empty_like(Y)
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            w_i = W[lo:hi, i]
            proj = _Projector(basis.polynomial(ts[i], grid.t0, w_i), ts[i], basis.tilt(w_i))
            EY[lo:hi] = proj(Y[lo:hi])
            resid[lo:hi] = Y[lo:hi] - EY[lo:hi]
            # residual in the frame where the fit is ordinary least squares
            fit_resid[lo:hi] = resid[lo:hi] if proj.tilt is None else resid[lo:hi] / proj.tilt
            Z[lo:hi] = proj(resid[lo:hi] * dW[lo:hi, i, None]) / h
        rhs = EY + h * (Z @ N_i.T) + 0.5 * h * f_i
        if power:
            rhs = rhs + wl * fs_i
        alpha[:, i] = np.linalg.solve(np.eye(n) - 0.5 * h * M_i, rhs.T).T
        beta[:, i] = Z
        for j in range(n):
            m, se = mean_stderr(fit_resid[:, j])
            resid_z[i] = max(resid_z[i], abs(m) / se if se > 0 else 0.0)
        M_next, f_next, fs_next = M_i, f_i, fs_i
    beta[:, N] = beta[:, N - 1]
    alpha += det_vals[None]
    batch_means = np.array([alpha[lo:hi].mean(axis=0) for lo, hi in zip(bounds[:-1], bounds[1:])])
    stderr = (batch_means.std(axis=0, ddof=1) / math.sqrt(n_batches) if n_batches > 1
              else alpha.std(axis=0, ddof=1) / math.sqrt(K))
    diag = {"alpha_mean": alpha.mean(axis=0), "alpha_stderr": stderr,
            "residual_mean_z": resid_z, "n_batches": n_batches}
    return BsdeSolution("lsmc", grid, alpha, beta, basis=basis, diagnostics=diag)


def solve_bsde(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, theta: MatrixPath, grid: TimeGrid,
               backend: str = "auto", ensemble=None, basis: BasisSpec | None = None) -> BsdeSolution:
    """Dispatch to a backend; ``auto`` prefers exact reductions."""
    if backend == "auto":
        if spec.deterministic_data:
            backend = "ode"
        elif all(c.deterministic or c.exponential is not None for c in spec.vectors.values()) \
                and spec.exponential_kappa is not None:
            backend = "exponential"
        else:
            backend = "lsmc"
    if backend == "ode":
        return solve_bsde_deterministic(spec, p1, p2, theta, grid)
    if backend == "exponential":
        return solve_bsde_exponential(spec, p1, p2, theta, grid)
    if backend == "lsmc":
        if ensemble is None:
            raise ValueError("lsmc backend needs an ensemble")
        return solve_bsde_lsmc(spec, p1, p2, theta, grid, ensemble, basis)
    raise ValueError(f"unknown BSDE backend {backend!r}")
