"""Exact finite-scale ground truth on a quadrinomial tree.

Each step both Brownian increments move by +-sqrt(h) with equal
probability, so level i has 4^i equiprobable nodes.  Controls are indexed
by W2-history only (2^i nodes at step i), which enforces the partial
information constraint by construction.  The discretized cost is an exact
quadratic in the stacked control vector U:

    J(U) = U'HU + 2c'U + const.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .linalg import min_eigenvalue, pairwise_sum, symmetrize
from .model import ProblemSpec

MAX_DEPTH = 7
_BLOCK = 256


class TreeDepthError(ValueError):
    pass


class NotConvex(RuntimeError):
    def __init__(self, min_eig: float):
        super().__init__(f"tree Hessian is not positive definite (min eigenvalue {min_eig:.6g})")
        self.min_eig = float(min_eig)


@dataclass
class _Level:
    t: float
    W2: np.ndarray          # (4^i,)
    prefix: np.ndarray      # (4^i, i+1) W2 on step times
    w2idx: np.ndarray       # (4^i,) W2-node index in 0..2^i-1
    data: dict[str, np.ndarray]  # sampled inhomogeneous terms per node


@dataclass
class TreeModel:
    """Tree of depth d over [s, T] with the assembled quadratic form.

    ``form`` is the symmetric matrix of J as a quadratic form in
    z = (x0, U, 1), so H, c and const for any x0 are blocks of it.
    """

    spec: ProblemSpec
    s: float
    T: float
    depth: int
    levels: list[_Level] = field(repr=False)
    mats: list[Any] = field(repr=False)
    g_T: np.ndarray = field(repr=False)
    form: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return (self.T - self.s) / self.depth

    @property
    def n_scenarios(self) -> int:
        return 4**self.depth

    @property
    def n_nodes(self) -> int:
        return 2**self.depth - 1

    @property
    def n_controls(self) -> int:
        return self.n_nodes * self.spec.m

    def _slices(self):
        n, nu = self.spec.n, self.n_controls
        return slice(0, n), slice(n, n + nu), n + nu

    @property
    def H(self) -> np.ndarray:
        _, su, _ = self._slices()
        return self.form[su, su]

    def c(self, x0) -> np.ndarray:
        sx, su, k = self._slices()
        return self.form[su, sx] @ _vec(x0, self.spec.n) + self.form[su, k]

    def const(self, x0) -> float:
        sx, _, k = self._slices()
        x0 = _vec(x0, self.spec.n)
        return float(x0 @ self.form[sx, sx] @ x0 + 2 * x0 @ self.form[sx, k] + self.form[k, k])

    def node_weights(self) -> np.ndarray:
        """h * P(W2-node) for every control coordinate."""
        w = np.concatenate([np.full(2**i, self.h * 2.0**-i) for i in range(self.depth)])
        return np.repeat(w, self.spec.m)

    def offset(self, i: int) -> int:
        return 2**i - 1


def _vec(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != n:
        raise ValueError(f"expected a vector of length {n}")
    return x


def history_key(i: int, k: int) -> str:
    """W2-history string of node k at step i, 'u' for an up move, root is 'root'."""
    if i == 0:
        return "root"
    return "".join("u" if (k >> (i - 1 - j)) & 1 else "d" for j in range(i))


def _block_sum(Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """sum_k Z_k' Y_k over the leading axis, with a fixed block/pairwise tree."""
    parts = []
    for lo in range(0, Z.shape[0], _BLOCK):
        z, y = Z[lo : lo + _BLOCK], Y[lo : lo + _BLOCK]
        parts.append(z.reshape(-1, z.shape[-1]).T @ y.reshape(-1, y.shape[-1]))
    return pairwise_sum(np.array(parts))


def build_tree(spec: ProblemSpec, s: float, T: float, depth: int) -> TreeModel:
    """Enumerate the tree and assemble the exact quadratic cost."""
    if int(depth) != depth or depth < 1:
        raise TreeDepthError("depth must be a positive integer")
    if depth > MAX_DEPTH:
        raise TreeDepthError(f"depth {depth} exceeds the cap {MAX_DEPTH}")
    if not s < T:
        raise ValueError("need s < T")
    n, m = spec.n, spec.m
    d = int(depth)
    h = (T - s) / d
    sq = np.sqrt(h)
    nu = (2**d - 1) * m
    dz = n + nu + 1
    one = dz - 1
    sign1 = np.array([-1.0, -1.0, 1.0, 1.0])
    sign2 = np.array([-1.0, 1.0, -1.0, 1.0])

    X = np.zeros((1, n, dz))
    X[0, :, :n] = np.eye(n)
    W2 = np.zeros(1)
    prefix = np.zeros((1, 1))
    w2idx = np.zeros(1, dtype=int)
    form = np.zeros((dz, dz))
    levels: list[_Level] = []
    mats = []
    for i in range(d):
        t = s + i * h
        c = spec.coeffs(t)
        mats.append(c)
        k = X.shape[0]
        data = {name: coef.sample(t, W2, prefix) for name, coef in spec.vectors.items() if name != "g"}
        levels.append(_Level(t, W2, prefix, w2idx, data))
        E = np.zeros((k, m, dz))
        cols = n + (2**i - 1 + w2idx) * m
        for j in range(m):
            E[np.arange(k), j, cols + j] = 1.0
        e1 = np.zeros(dz)
        e1[one] = 1.0
        Z = np.concatenate([X, E, np.broadcast_to(e1, (k, 1, dz))], axis=1)
        W = np.zeros((k, n + m + 1, n + m + 1))
        W[:, :n, :n] = c.Q
        W[:, :n, n : n + m] = c.S.T
        W[:, n : n + m, :n] = c.S
        W[:, n : n + m, n : n + m] = c.R
        W[:, :n, -1] = W[:, -1, :n] = data["q"]
        W[:, n : n + m, -1] = W[:, -1, n : n + m] = data["rho"]
        form += (h / k) * _block_sum(Z, np.einsum("kab,kbz->kaz", W, Z))

        drift = np.einsum("ab,kbz->kaz", c.A, X) + np.einsum("ab,kbz->kaz", c.B, E)
        drift[:, :, one] += data["b"]
        d1 = np.einsum("ab,kbz->kaz", c.C1, X) + np.einsum("ab,kbz->kaz", c.D1, E)
        d1[:, :, one] += data["sigma1"]
        d2 = np.einsum("ab,kbz->kaz", c.C2, X) + np.einsum("ab,kbz->kaz", c.D2, E)
        d2[:, :, one] += data["sigma2"]
        base = X + h * drift
        X = (base[:, None] + sq * sign1[None, :, None, None] * d1[:, None]
             + sq * sign2[None, :, None, None] * d2[:, None]).reshape(4 * k, n, dz)
        W2 = (W2[:, None] + sq * sign2[None, :]).reshape(-1)
        prefix = np.concatenate([np.repeat(prefix, 4, axis=0), W2[:, None]], axis=1)
        w2idx = (2 * w2idx[:, None] + (sign2[None, :] > 0)).reshape(-1)

    k = X.shape[0]
    g_T = spec.g.sample(T, W2, prefix)
    levels.append(_Level(T, W2, prefix, w2idx, {}))
    Z = np.concatenate([X, np.broadcast_to(np.eye(dz)[one], (k, 1, dz))], axis=1)
    Wt = np.zeros((k, n + 1, n + 1))
    Wt[:, :n, :n] = spec.G
    Wt[:, :n, -1] = Wt[:, -1, :n] = g_T
    form += (1.0 / k) * _block_sum(Z, np.einsum("kab,kbz->kaz", Wt, Z))
    return TreeModel(spec, float(s), float(T), d, levels, mats, g_T, symmetrize(form))


# ------------------------------------------------------------ evaluation

def _controls(tree: TreeModel, u) -> np.ndarray:
    """Controls as an (n_nodes, m) array; accepts flat arrays or history dicts."""
    m = tree.spec.m
    if isinstance(u, dict):
        out = np.zeros((tree.n_nodes, m))
        for i in range(tree.depth):
            for k in range(2**i):
                out[tree.offset(i) + k] = np.asarray(u[history_key(i, k)], dtype=float).reshape(m)
        return out
    u = np.asarray(u, dtype=float)
    if u.size != tree.n_controls:
        raise ValueError(f"expected {tree.n_controls} control entries, got {u.size}")
    return u.reshape(tree.n_nodes, m)


@dataclass
class TreeRun:
    cost: float
    x: list[np.ndarray]
    xhat: list[np.ndarray]
    u: list[np.ndarray]


def tree_run(tree: TreeModel, u, x0, *, homogeneous: bool = False, theta=None) -> TreeRun:
    """Simulate every scenario forward and evaluate the discrete cost.

    With ``theta`` (one m x n gain per step) the applied control at step i is
    theta[i] x_hat + u, where x_hat is the W2-conditional mean of the state.
    """
    spec = tree.spec
    n, h = spec.n, tree.h
    U = _controls(tree, u)
    sq = np.sqrt(h)
    sign1 = np.array([-1.0, -1.0, 1.0, 1.0])
    sign2 = np.array([-1.0, 1.0, -1.0, 1.0])
    x = np.tile(_vec(x0, n), (1, 1))
    xs, xhats, us, parts = [], [], [], []
    for i in range(tree.depth):
        lev, c = tree.levels[i], tree.mats[i]
        k = x.shape[0]
        data = {key: (np.zeros_like(v) if homogeneous else v) for key, v in lev.data.items()}
        counts = np.bincount(lev.w2idx, minlength=2**i)
        xhat = np.stack([np.bincount(lev.w2idx, weights=x[:, j], minlength=2**i) for j in range(n)], axis=1)
        xhat = xhat / counts[:, None]
        uu = U[tree.offset(i) : tree.offset(i) + 2**i][lev.w2idx]
        if theta is not None:
            uu = uu + xhat[lev.w2idx] @ np.asarray(theta[i], dtype=float).T
        xs.append(x)
        xhats.append(xhat)
        us.append(uu)
        run = (np.einsum("ka,ab,kb->k", x, c.Q, x) + 2 * np.einsum("ka,ab,kb->k", uu, c.S, x)
               + np.einsum("ka,ab,kb->k", uu, c.R, uu) + 2 * np.einsum("ka,ka->k", data["q"], x)
               + 2 * np.einsum("ka,ka->k", data["rho"], uu))
        parts.append(h * pairwise_sum(run) / k)
        drift = x @ c.A.T + uu @ c.B.T + data["b"]
        d1 = x @ c.C1.T + uu @ c.D1.T + data["sigma1"]
        d2 = x @ c.C2.T + uu @ c.D2.T + data["sigma2"]
        base = x + h * drift
        x = (base[:, None] + sq * sign1[None, :, None] * d1[:, None]
             + sq * sign2[None, :, None] * d2[:, None]).reshape(4 * k, n)
    xs.append(x)
    g = np.zeros_like(tree.g_T) if homogeneous else tree.g_T
    term = np.einsum("ka,ab,kb->k", x, tree.spec.G, x) + 2 * np.einsum("ka,ka->k", g, x)
    parts.append(pairwise_sum(term) / x.shape[0])
    return TreeRun(float(pairwise_sum(np.array(parts))), xs, xhats, us)


def tree_cost(tree: TreeModel, u, x0, *, homogeneous: bool = False) -> float:
    """Discrete cost J(U) by scenario enumeration (independent of ``form``)."""
    return tree_run(tree, u, x0, homogeneous=homogeneous).cost


def tree_quadratic_cost(tree: TreeModel, u, x0) -> float:
    """Discrete cost from the assembled quadratic form."""
    U = _controls(tree, u).reshape(-1)
    return float(U @ tree.H @ U + 2 * tree.c(x0) @ U + tree.const(x0))


# ------------------------------------------------------------- optimality

@dataclass
class TreeSolution:
    controls: np.ndarray   # (n_nodes, m)
    value: float
    hessian_min_eig: float
    depth: int

    def control_table(self) -> dict[str, list[float]]:
        out = {}
        for i in range(self.depth):
            for k in range(2**i):
                out[history_key(i, k)] = [float(v) for v in self.controls[2**i - 1 + k]]
        return out


def tree_exact_optimal(tree: TreeModel, x0) -> TreeSolution:
    """Solve H U* = -c exactly; raises NotConvex unless H is positive definite."""
    H = tree.H
    lam = min_eigenvalue(H)
    if lam <= 1e-14 * max(1.0, float(np.max(np.abs(H)))):
        raise NotConvex(lam)
    c = tree.c(x0)
    U = np.linalg.solve(H, -c)
    value = tree.const(x0) + float(c @ U)
    return TreeSolution(U.reshape(tree.n_nodes, tree.spec.m), value, lam, tree.depth)


def tree_perturbed_value(tree: TreeModel, x0, epsilon: float) -> float:
    """Exact value of the discrete problem with R replaced by R + epsilon I."""
    H = tree.H + np.diag(epsilon * tree.node_weights())
    lam = min_eigenvalue(H)
    if lam <= 0:
        raise NotConvex(lam)
    c = tree.c(x0)
    return tree.const(x0) + float(c @ np.linalg.solve(H, -c))


def tree_gradient(tree: TreeModel, u, x0) -> np.ndarray:
    """Exact gradient 2(HU + c), shape (n_nodes, m)."""
    U = _controls(tree, u).reshape(-1)
    return (2 * (tree.H @ U + tree.c(x0))).reshape(tree.n_nodes, tree.spec.m)


def tree_adjoint_gradient(tree: TreeModel, u, x0) -> np.ndarray:
    """Gradient from the backward adjoint recursion.

    Y_d = G x_d + g and, with conditional averages over the four children,

        Y_i = E_i Y_{i+1} + h (A'E_i Y_{i+1} + C1'Z1 + C2'Z2 + Q x + S'u + q),
        Z_j = E_i[Y_{i+1} dW_j] / h.

    The gradient at a W2-node sums h P(node) DJ over the scenarios sharing
    that history, DJ = 2(B'Y + D1'Z1 + D2'Z2 + S x + R u + rho) evaluated
    with the one-step-ahead conditional quantities.
    """
    spec = tree.spec
    n, m, h = spec.n, spec.m, tree.h
    run = tree_run(tree, u, x0)
    sq = np.sqrt(h)
    sign1 = np.array([-1.0, -1.0, 1.0, 1.0])
    sign2 = np.array([-1.0, 1.0, -1.0, 1.0])
    Y = run.x[-1] @ spec.G.T + tree.g_T
    grad = np.zeros((tree.n_nodes, m))
    for i in range(tree.depth - 1, -1, -1):
        lev, c = tree.levels[i], tree.mats[i]
        k = 4**i
        Yc = Y.reshape(k, 4, n)
        Yp = Yc.mean(axis=1)
        Z1 = np.einsum("kcn,c->kn", Yc, sign1) * sq / 4 / h
        Z2 = np.einsum("kcn,c->kn", Yc, sign2) * sq / 4 / h
        x, uu = run.x[i], run.u[i]
        dj = 2 * (Yp @ c.B + Z1 @ c.D1 + Z2 @ c.D2 + x @ c.S.T + uu @ c.R.T + lev.data["rho"])
        w = h / k
        for j in range(m):
            grad[tree.offset(i) : tree.offset(i) + 2**i, j] = np.bincount(lev.w2idx, weights=w * dj[:, j],
                                                                         minlength=2**i)
        Y = Yp + h * (Yp @ c.A + Z1 @ c.C1 + Z2 @ c.C2 + x @ c.Q.T + uu @ c.S + lev.data["q"])
    return grad


def verify_expansion(tree: TreeModel, u, v, lam: float, x0=None) -> float:
    """|J(u + lam v) - J(u) - lam^2 J0(0; v) - lam <DJ(u), v>|.

    Every term is computed independently: costs by forward enumeration,
    DJ by the adjoint recursion.
    """
    x0 = np.ones(tree.spec.n) if x0 is None else x0
    U = _controls(tree, u)
    V = _controls(tree, v)
    j_u = tree_cost(tree, U, x0)
    j_uv = tree_cost(tree, U + lam * V, x0)
    j0 = tree_cost(tree, V, np.zeros(tree.spec.n), homogeneous=True)
    dj = float(np.sum(tree_adjoint_gradient(tree, U, x0) * V))
    return abs(j_uv - j_u - lam**2 * j0 - lam * dj)


def estimate_gamma(tree: TreeModel) -> float:
    """Smallest eigenvalue of H0 relative to the discrete L2 norm of U.

    H0 (the Hessian of the homogeneous cost) equals H.  With N = diag(h P(node))
    this is min eig N^{-1/2} H N^{-1/2}, the best gamma with
    J0(0; U) >= gamma * E sum h |U|^2 on the tree.
    """
    w = 1.0 / np.sqrt(tree.node_weights())
    return min_eigenvalue(symmetrize(tree.H * w[:, None] * w[None, :]))


def tree_value_floor(tree: TreeModel) -> float:
    """min over unit x0 of the homogeneous tree value (requires H > 0)."""
    sx, su, _ = tree._slices()
    F = tree.form
    S = F[sx, sx] - F[sx, su] @ np.linalg.solve(tree.H, F[su, sx])
    return min_eigenvalue(symmetrize(S))


def tree_report(tree: TreeModel, x0) -> dict[str, Any]:
    """JSON-ready summary: depth, value, gamma_d and the optimal control table."""
    out: dict[str, Any] = {"depth": tree.depth, "h": tree.h, "gamma_d": estimate_gamma(tree)}
    try:
        sol = tree_exact_optimal(tree, x0)
    except NotConvex as exc:
        out.update(value=None, hessian_min_eig=exc.min_eig, controls=None)
        return out
    out.update(value=sol.value, hessian_min_eig=sol.hessian_min_eig, controls=sol.control_table())
    return out
