"""Problem data for linear-quadratic control under partial information.

The state obeys

    dx = (A x + B u + b) dt + (C1 x + D1 u + sigma1) dW1 + (C2 x + D2 u + sigma2) dW2

and the cost is

    J = E[ x(T)' G x(T) + 2 g' x(T)
           + int ( x'Qx + 2u'Sx + u'Ru + 2q'x + 2rho'u ) dt ].

Controls may only depend on the history of W2.  Matrix coefficients are
deterministic functions of time; the inhomogeneous terms may depend on W2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np

MatrixFn = Callable[[float], np.ndarray]

DETERMINISTIC = "deterministic"
MARKOV_W2 = "markov_w2"
PATH_FUNCTIONAL = "path_functional"
_KINDS = (DETERMINISTIC, MARKOV_W2, PATH_FUNCTIONAL)

SYMMETRY_TOL = 1e-12
BOUND = 1e12


class UnknownScenario(KeyError):
    """Raised for a scenario name that is not built in."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0 < t1 < ... < tN = T."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t0) and math.isfinite(self.T)) or self.t0 >= self.T:
            raise ValueError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)

    def index(self, t: float, *, tol: float = 1e-9) -> int:
        """Index of grid point t; raises if t is not on the grid."""
        x = (t - self.t0) / self.h
        i = int(round(x))
        if abs(x - i) > tol * max(1.0, abs(x)) or not 0 <= i <= self.n_steps:
            raise ValueError(f"t={t} is not a point of {self}")
        return i

    def floor_index(self, t: float) -> int:
        """Largest index i with t_i <= t (up to rounding)."""
        x = (t - self.t0) / self.h
        i = int(math.floor(x + 1e-9))
        return min(max(i, 0), self.n_steps)


@dataclass(frozen=True)
class ExponentialForm:
    """Structure f(t, w) = profile(t) * (T - t)**power * exp(kappa * w).

    Declaring it lets the BSDE solvers use an exact reduction and an
    exponential regression feature, and lets integrators treat an endpoint
    singularity (power < 0) analytically.
    """

    kappa: float
    profile: Callable[[float], np.ndarray]
    power: float = 0.0
    horizon: float = 1.0

    def weight(self, t: float) -> float:
        tau = self.horizon - t
        if tau <= 0.0:
            return 0.0 if self.power < 0 else float(self.power == 0)
        return tau**self.power


@dataclass(frozen=True)
class Coefficient:
    """A vector-valued inhomogeneous datum.

    ``fn`` signature depends on ``kind``: ``fn(t)`` for deterministic data,
    ``fn(t, w)`` with ``w`` of shape (K,) for Markov data in W2, and
    ``fn(t, prefix)`` with ``prefix`` of shape (K, j+1) holding W2 on the
    grid up to t for path functionals.  Random kinds return (K, *shape).
    """

    kind: str
    shape: tuple[int, ...]
    fn: Callable[..., np.ndarray]
    exponential: ExponentialForm | None = None
    is_zero: bool = False

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown coefficient kind {self.kind!r}")

    @property
    def deterministic(self) -> bool:
        return self.kind == DETERMINISTIC

    def value(self, t: float) -> np.ndarray:
        """Value of a deterministic coefficient."""
        if not self.deterministic:
            raise TypeError(f"{self.kind} coefficient has no deterministic value")
        return np.asarray(self.fn(t), dtype=float).reshape(self.shape)

    def sample(self, t: float, w: np.ndarray, prefix: np.ndarray | None = None) -> np.ndarray:
        """Values on K paths, shape (K, *shape)."""
        w = np.asarray(w, dtype=float)
        k = w.shape[0]
        if self.kind == DETERMINISTIC:
            return np.broadcast_to(self.value(t), (k,) + self.shape)
        if self.kind == MARKOV_W2:
            out = self.fn(t, w)
        else:
            if prefix is None:
                raise ValueError("path functional needs the W2 path prefix")
            out = self.fn(t, prefix)
        return np.asarray(out, dtype=float).reshape((k,) + self.shape)

    def smooth_sample(self, t: float, w: np.ndarray, prefix: np.ndarray | None = None) -> np.ndarray:
        """Sample with the endpoint weight (T - t)**power removed."""
        if self.exponential is None or self.exponential.power == 0:
            return self.sample(t, w, prefix)
        e = self.exponential
        prof = np.asarray(e.profile(t), dtype=float).reshape(self.shape)
        return prof[None] * np.exp(e.kappa * np.asarray(w, dtype=float)).reshape((-1,) + (1,) * len(self.shape))


def zero(n: int) -> Coefficient:
    z = np.zeros(n)
    z.flags.writeable = False
    return Coefficient(DETERMINISTIC, (n,), lambda t: z, is_zero=True)


def constant(value: Any) -> Coefficient:
    v = np.array(value, dtype=float).reshape(-1)
    v.flags.writeable = False
    return Coefficient(DETERMINISTIC, v.shape, lambda t: v, is_zero=not np.any(v))


def deterministic(fn: Callable[[float], Any], n: int) -> Coefficient:
    return Coefficient(DETERMINISTIC, (n,), fn)


def markov(fn: Callable[[float, np.ndarray], Any], n: int) -> Coefficient:
    return Coefficient(MARKOV_W2, (n,), fn)


def path_functional(fn: Callable[[float, np.ndarray], Any], n: int) -> Coefficient:
    return Coefficient(PATH_FUNCTIONAL, (n,), fn)


def exponential(kappa: float, profile: Callable[[float], Any], n: int, *,
                power: float = 0.0, horizon: float = 1.0) -> Coefficient:
    """Markov coefficient profile(t) (T - t)**power exp(kappa w), zero at T if power < 0."""
    form = ExponentialForm(kappa, profile, power, horizon)

    def fn(t: float, w: np.ndarray) -> np.ndarray:
        prof = np.asarray(profile(t), dtype=float).reshape(n)
        return form.weight(t) * prof[None, :] * np.exp(kappa * np.asarray(w, dtype=float))[:, None]

    return Coefficient(MARKOV_W2, (n,), fn, exponential=form)


def constant_matrix(value: Any) -> MatrixFn:
    v = np.array(value, dtype=float)
    if v.ndim != 2:
        raise ValueError("matrix coefficient must be 2-D")
    v.flags.writeable = False
    return lambda t: v


@dataclass(frozen=True)
class Coeffs:
    """Matrix coefficients at one time."""

    A: np.ndarray
    B: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray


_MATRIX_FIELDS = ("A", "B", "C1", "C2", "D1", "D2", "Q", "S", "R")
_VECTOR_FIELDS = ("b", "sigma1", "sigma2", "q", "rho", "g")


@dataclass(frozen=True)
class ProblemSpec:
    """Full coefficient set of the control problem on [0, T]."""

    n: int
    m: int
    T: float
    A: MatrixFn
    B: MatrixFn
    C1: MatrixFn
    C2: MatrixFn
    D1: MatrixFn
    D2: MatrixFn
    Q: MatrixFn
    S: MatrixFn
    R: MatrixFn
    G: np.ndarray
    b: Coefficient
    sigma1: Coefficient
    sigma2: Coefficient
    q: Coefficient
    rho: Coefficient
    g: Coefficient
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)
    r_shift: float = 0.0

    def __post_init__(self) -> None:
        G = np.array(self.G, dtype=float)
        G.flags.writeable = False
        object.__setattr__(self, "G", G)

    def coeffs(self, t: float) -> Coeffs:
        R = np.asarray(self.R(t), dtype=float)
        if self.r_shift:
            R = R + self.r_shift * np.eye(self.m)
        return Coeffs(*(np.asarray(getattr(self, f)(t), dtype=float) for f in _MATRIX_FIELDS[:-1]), R)

    @property
    def vectors(self) -> dict[str, Coefficient]:
        return {f: getattr(self, f) for f in _VECTOR_FIELDS}

    @property
    def deterministic_data(self) -> bool:
        return all(c.deterministic for c in self.vectors.values())

    @property
    def exponential_kappa(self) -> float | None:
        """Common exponential rate of the random data, if declared."""
        kappas = {c.exponential.kappa for c in self.vectors.values() if c.exponential is not None}
        return kappas.pop() if len(kappas) == 1 else None

    def perturbed(self, epsilon: float) -> "ProblemSpec":
        """Same problem with R replaced by R + epsilon I."""
        if epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        return replace(self, r_shift=self.r_shift + epsilon)

    def homogeneous(self) -> "ProblemSpec":
        """Same matrices, all inhomogeneous data set to zero."""
        n, m = self.n, self.m
        return replace(self, b=zero(n), sigma1=zero(n), sigma2=zero(n), q=zero(n), rho=zero(m), g=zero(n))


@dataclass(frozen=True)
class Diagnostic:
    field: str
    t: float | None
    message: str

    def __str__(self) -> str:
        where = "" if self.t is None else f" at t={self.t:.6g}"
        return f"{self.field}{where}: {self.message}"


def _expected_shapes(spec: ProblemSpec) -> dict[str, tuple[int, ...]]:
    n, m = spec.n, spec.m
    return {"A": (n, n), "B": (n, m), "C1": (n, n), "C2": (n, n), "D1": (n, m), "D2": (n, m),
            "Q": (n, n), "S": (m, n), "R": (m, m), "b": (n,), "sigma1": (n,), "sigma2": (n,),
            "q": (n,), "rho": (m,), "g": (n,)}


def _asym(M: np.ndarray) -> float:
    return float(np.max(np.abs(M - M.T))) if M.size else 0.0


def validate_spec(spec: ProblemSpec, grid: TimeGrid) -> list[Diagnostic]:
    """Check shapes, symmetry, finiteness and boundedness at grid samples.

    Each field reports at most one shape diagnostic; symmetry and
    boundedness are reported per offending grid time.
    """
    out: list[Diagnostic] = []
    shapes = _expected_shapes(spec)
    ts = grid.points
    broken: set[str] = set()

    G = spec.G
    if G.shape != (spec.n, spec.n):
        out.append(Diagnostic("G", None, f"shape {G.shape}, expected {(spec.n, spec.n)}"))
    elif not np.all(np.isfinite(G)):
        out.append(Diagnostic("G", None, "non-finite entries"))
    elif _asym(G) > SYMMETRY_TOL:
        out.append(Diagnostic("G", None, f"asymmetric by {_asym(G):.3g}"))

    for name in _MATRIX_FIELDS:
        fn = getattr(spec, name)
        for t in ts:
            M = np.asarray(fn(t), dtype=float)
            if M.shape != shapes[name]:
                out.append(Diagnostic(name, float(t), f"shape {M.shape}, expected {shapes[name]}"))
                broken.add(name)
                break
            if not np.all(np.isfinite(M)):
                out.append(Diagnostic(name, float(t), "non-finite entries"))
            elif np.max(np.abs(M), initial=0.0) > BOUND:
                out.append(Diagnostic(name, float(t), f"magnitude exceeds {BOUND:g}"))
            elif name in ("Q", "R") and _asym(M) > SYMMETRY_TOL:
                out.append(Diagnostic(name, float(t), f"asymmetric by {_asym(M):.3g}"))

    # random data are probed along a few fixed W2 levels
    probe = np.array([-1.0, 0.0, 1.0])
    for name in _VECTOR_FIELDS:
        c = getattr(spec, name)
        if tuple(c.shape) != shapes[name]:
            out.append(Diagnostic(name, None, f"shape {c.shape}, expected {shapes[name]}"))
            continue
        times = [spec.T] if name == "g" else ts
        for j, t in enumerate(times):
            w = probe * math.sqrt(max(t - grid.t0, 0.0))
            prefix = None
            if c.kind == PATH_FUNCTIONAL:
                jj = grid.index(t) if name != "g" else grid.n_steps
                prefix = np.outer(probe, np.sqrt(np.maximum(grid.points[: jj + 1] - grid.t0, 0.0)))
            try:
                v = c.sample(float(t), w, prefix)
            except ValueError as exc:
                out.append(Diagnostic(name, float(t), f"evaluation failed: {exc}"))
                break
            if not np.all(np.isfinite(v)):
                out.append(Diagnostic(name, float(t), "non-finite value"))
                break
    return out


# ----------------------------------------------------------------- scenarios

def _section5(params: Mapping[str, Any]) -> ProblemSpec:
    if params:
        raise ValueError(f"section5 takes no parameters, got {sorted(params)}")
    one = constant_matrix([[1.0]])
    zero1 = constant_matrix([[0.0]])
    r2 = math.sqrt(2.0)
    b = exponential(r2, lambda t: np.array([math.exp(-2.0 * t)]), 1, power=-0.5, horizon=1.0)
    return ProblemSpec(
        n=1, m=1, T=1.0,
        A=constant_matrix([[-1.0]]), B=one, C1=zero1, C2=constant_matrix([[r2]]),
        D1=zero1, D2=zero1, Q=zero1, S=zero1, R=zero1, G=np.array([[1.0]]),
        b=b, sigma1=constant([1.0]), sigma2=zero(1), q=zero(1), rho=zero(1), g=zero(1),
        name="section5", params={},
    )


_PSD_SCALAR_DEFAULTS = {
    "A": 0.2, "B": 1.0, "C1": 0.3, "C2": 0.4, "D1": 0.0, "D2": 0.0,
    "Q": 1.0, "S": 0.0, "delta": 1.0, "G": 1.0,
    "b": 0.5, "sigma1": 0.3, "sigma2": 0.2, "q": 0.1, "rho": 0.1, "g": 0.2, "T": 1.0,
}


def _psd_scalar(params: Mapping[str, Any]) -> ProblemSpec:
    unknown = set(params) - set(_PSD_SCALAR_DEFAULTS) - {"R"}
    if unknown:
        raise ValueError(f"unknown psd_scalar parameters {sorted(unknown)}")
    p = {**_PSD_SCALAR_DEFAULTS, **params}
    if "R" in params:
        p["delta"] = params["R"]
    mats = {k: constant_matrix([[float(p[k])]]) for k in ("A", "B", "C1", "C2", "D1", "D2", "Q", "S")}
    return ProblemSpec(
        n=1, m=1, T=float(p["T"]), R=constant_matrix([[float(p["delta"])]]), G=np.array([[float(p["G"])]]),
        b=constant([p["b"]]), sigma1=constant([p["sigma1"]]), sigma2=constant([p["sigma2"]]),
        q=constant([p["q"]]), rho=constant([p["rho"]]), g=constant([p["g"]]),
        name="psd_scalar", params=dict(p), **mats,
    )


_PSD_RANDOM_DEFAULTS = {"seed": 0, "n": 2, "m": 2, "delta": 1.0, "T": 1.0, "scale": 0.3}


def _psd_random(params: Mapping[str, Any]) -> ProblemSpec:
    unknown = set(params) - set(_PSD_RANDOM_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown psd_random parameters {sorted(unknown)}")
    p = {**_PSD_RANDOM_DEFAULTS, **params}
    n, m, s, delta = int(p["n"]), int(p["m"]), float(p["scale"]), float(p["delta"])
    if n < 1 or m < 1 or delta <= 0:
        raise ValueError("psd_random needs n, m >= 1 and delta > 0")
    rng = np.random.default_rng(int(p["seed"]))

    def draw(r: int, c: int) -> np.ndarray:
        return s * rng.standard_normal((r, c))

    A0, A1 = draw(n, n), draw(n, n)
    B, C1, C2, D1, D2 = draw(n, m), draw(n, n), draw(n, n), draw(n, m), draw(n, m)
    L = draw(m, m)
    R = delta * np.eye(m) + L @ L.T
    S = draw(m, n)
    N = draw(n, n)
    Q0 = S.T @ np.linalg.solve(R, S)
    Q0 = (Q0 + Q0.T) / 2
    NN = N @ N.T
    M = draw(n, n)
    G = M @ M.T
    vecs = {k: constant(s * rng.standard_normal(n)) for k in ("b", "sigma1", "sigma2", "q", "g")}
    rho = constant(s * rng.standard_normal(m))
    A0.flags.writeable = A1.flags.writeable = NN.flags.writeable = Q0.flags.writeable = False
    return ProblemSpec(
        n=n, m=m, T=float(p["T"]),
        A=lambda t: A0 + t * A1, B=constant_matrix(B), C1=constant_matrix(C1), C2=constant_matrix(C2),
        D1=constant_matrix(D1), D2=constant_matrix(D2),
        Q=lambda t: Q0 + (1.0 + 0.5 * t) * NN, S=constant_matrix(S), R=constant_matrix(R), G=G,
        rho=rho, name="psd_random", params=dict(p), **vecs,
    )


def _indefinite_unbounded(params: Mapping[str, Any]) -> ProblemSpec:
    unknown = set(params) - {"T"}
    if unknown:
        raise ValueError(f"unknown indefinite_unbounded parameters {sorted(unknown)}")
    T = float(params.get("T", 1.0))
    z = constant_matrix([[0.0]])
    return ProblemSpec(
        n=1, m=1, T=T, A=z, B=constant_matrix([[1.0]]), C1=z, C2=z, D1=z, D2=z,
        Q=z, S=z, R=constant_matrix([[-1.0]]), G=np.zeros((1, 1)),
        b=zero(1), sigma1=zero(1), sigma2=zero(1), q=zero(1), rho=zero(1), g=zero(1),
        name="indefinite_unbounded", params={"T": T},
    )


SCENARIOS: dict[str, tuple[Callable[[Mapping[str, Any]], ProblemSpec], str]] = {
    "section5": (_section5, "scalar indefinite example, R=0, exponential-martingale drift with (1-t)^-1/2 singularity"),
    "psd_scalar": (_psd_scalar, "scalar positive-semidefinite problem, R=delta"),
    "psd_random": (_psd_random, "seeded random positive-semidefinite problem (n=m=2 by default)"),
    "indefinite_unbounded": (_indefinite_unbounded, "scalar problem with R=-1, unbounded below"),
}


def builtin_scenario(name: str, params: Mapping[str, Any] | None = None) -> ProblemSpec:
    """Return a built-in scenario; deterministic in (name, params)."""
    try:
        builder, _ = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return builder(dict(params or {}))
