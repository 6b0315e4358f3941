"""Control-problem data model, Hamiltonian evaluation and assumption probes.

A ControlProblem packages the coefficients b and sigma of the controlled
diffusion dX = b(t,X,u) dt + sigma(t,X,u) dW on an open box domain, the
terminal payoff g with its gauge psi, the control set with its admissibility
bound, and the constraint function G whose non-negativity marks where the
Hamiltonian

    H(t,x,p,M) = sup_u [ b(t,x,u).p + 1/2 Tr(sigma sigma^T M) ]

is finite.  Coefficient callables must broadcast over the leading axes of x
and u:  drift(t, x, u) -> (..., d),  diffusion(t, x, u) -> (..., d, d').
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .grids import Box

DIVERGENCE_TOL_REL = 1e-3   # relative growth per bound doubling that flags H = +inf
COMPAT_TOL = 1e-9           # absolute slack in the H-finite <=> G >= 0 checks


@dataclass(frozen=True)
class ScalarField:
    """Scalar function of the state, with a family tag for serialization."""

    fn: object
    family: str = "custom"
    params: tuple = ()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.fn(x)


def power_payoff(p: float) -> ScalarField:
    return ScalarField(lambda x: np.maximum(x[..., 0], 0.0) ** p, "power", (("p", p),))


def quadratic_payoff() -> ScalarField:
    return ScalarField(lambda x: np.sum(x * x, axis=-1), "quadratic", ())


def abs_payoff(center: float = 1.0) -> ScalarField:
    return ScalarField(lambda x: np.abs(x[..., 0] - center), "abs", (("center", center),))


def affine_payoff(slope: float, intercept: float = 0.0) -> ScalarField:
    return ScalarField(
        lambda x: slope * x[..., 0] + intercept, "affine", (("slope", slope), ("intercept", intercept))
    )


def constant_payoff(c: float) -> ScalarField:
    return ScalarField(lambda x: np.full(x.shape[:-1], float(c)), "constant", (("c", c),))


def one_plus_square_gauge() -> ScalarField:
    return ScalarField(lambda x: 1.0 + np.sum(x * x, axis=-1), "one_plus_square", ())


def power_gauge(p: float) -> ScalarField:
    return ScalarField(lambda x: np.maximum(x[..., 0], 1e-300) ** p, "power", (("p", p),))


def table_payoff(gf) -> ScalarField:
    """Payoff defined by linear interpolation of a grid function."""
    if gf.grid.dim == 1:
        ax, val = gf.grid.axes[0], gf.values

        def fn(x):
            return np.interp(x[..., 0], ax, val)
    else:
        def fn(x):
            flat = x.reshape(-1, x.shape[-1])
            return np.array([gf.interpolate(pt) for pt in flat]).reshape(x.shape[:-1])
    return ScalarField(fn, "table", ())


@dataclass(frozen=True)
class Constraint:
    """Constraint function G(t, x, p, M); family tag enables vectorized paths."""

    fn: object
    family: str = "custom"
    params: tuple = ()

    def __call__(self, t, x, p, M):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return float(self.fn(t, x, p, M))

    def on_nodes(self, t, X, P, M):
        """Vectorized G over nodes: X (n,d), P (n,d), M (n,d,d) -> (n,)."""
        if self.family == "neg_second":
            return -M[:, 0, 0]
        if self.family == "neg_trace":
            return -np.trace(M, axis1=1, axis2=2)
        if self.family == "positive_const":
            return np.full(X.shape[0], dict(self.params)["c"])
        return np.array([self.fn(t, X[i], P[i], M[i]) for i in range(X.shape[0])])


def neg_second_constraint() -> Constraint:
    """G = -M (one state dimension): encodes concavity of the terminal layer."""
    return Constraint(lambda t, x, p, M: -M[0, 0], "neg_second", ())


def neg_trace_constraint() -> Constraint:
    return Constraint(lambda t, x, p, M: -np.trace(M), "neg_trace", ())


def positive_constraint(c: float = 1.0) -> Constraint:
    if c <= 0:
        raise ValueError("positive_constraint needs c > 0")
    return Constraint(lambda t, x, p, M: c, "positive_const", (("c", c),))


@dataclass(frozen=True)
class ControlSet:
    """Finite union of boxes in control space; edges may be infinite."""

    boxes: tuple

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("control set needs at least one box")

    @property
    def dim(self) -> int:
        return self.boxes[0].dim

    @property
    def is_bounded(self) -> bool:
        return all(np.all(np.isfinite(b.lo)) and np.all(np.isfinite(b.hi)) for b in self.boxes)

    def grid(self, resolution: int, bound: float) -> np.ndarray:
        """Uniform grid of (union of boxes) intersected with [-bound, bound]^k."""
        pts = []
        for b in self.boxes:
            lo = np.maximum(b.lo, -bound)
            hi = np.minimum(b.hi, bound)
            if np.any(lo > hi):
                continue
            axes = [np.linspace(a, c, resolution) if c > a else np.array([a]) for a, c in zip(lo, hi)]
            mesh = np.meshgrid(*axes, indexing="ij")
            pts.append(np.stack([m.ravel() for m in mesh], axis=-1))
        if not pts:
            raise ValueError("control set does not intersect the bound box")
        allpts = np.concatenate(pts, axis=0)
        return np.unique(allpts, axis=0)

    def sample(self, rng, n: int, bound: float) -> np.ndarray:
        out = np.empty((n, self.dim))
        for i in range(n):
            b = self.boxes[rng.integers(len(self.boxes))]
            lo = np.maximum(b.lo, -bound)
            hi = np.minimum(b.hi, bound)
            out[i] = rng.uniform(np.minimum(lo, hi), np.maximum(lo, hi))
        return out


def full_control_space(k: int = 1) -> ControlSet:
    return ControlSet((Box(np.full(k, -np.inf), np.full(k, np.inf)),))


def box_control_set(lo, hi) -> ControlSet:
    return ControlSet((Box(np.atleast_1d(lo), np.atleast_1d(hi)),))


@dataclass(frozen=True)
class ControlProblem:
    """One stochastic optimal-control instance: maximize E[g(X_T)]."""

    drift: object
    diffusion: object
    state_dim: int
    noise_dim: int
    control_dim: int
    control_bound: float
    control_set: ControlSet
    state_domain: Box
    horizon: float
    payoff: ScalarField
    gauge: ScalarField
    gauge_constant: float
    constraint: Constraint
    family: str = "custom"
    params: dict = field(default_factory=dict)
    time_dependent: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError("horizon must be finite and positive")
        if not (self.control_bound >= 0 and math.isfinite(self.control_bound)):
            raise ValueError("control bound must be finite and >= 0")
        if self.state_domain.dim != self.state_dim:
            raise ValueError("state domain dimension mismatch")
        if not np.all(self.state_domain.lo < self.state_domain.hi):
            raise ValueError("state domain must be a nonempty open box")
        if self.control_set.dim != self.control_dim:
            raise ValueError("control set dimension mismatch")

    def require_inside(self, x):
        if not self.state_domain.contains(x):
            raise DomainError(f"state {x} outside the open domain")

    def control_grid(self, resolution: int, bound: float | None = None) -> np.ndarray:
        b = self.control_bound if bound is None else bound
        return self.control_set.grid(resolution, b)

    def check_growth(self, points) -> bool:
        """|g| <= C psi on the probed points (the declared growth constant)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        g = np.asarray(self.payoff(pts), dtype=float)
        psi = np.asarray(self.gauge(pts), dtype=float)
        return bool(np.all(np.abs(g) <= self.gauge_constant * psi + 1e-12))


@dataclass(frozen=True)
class HamiltonianValue:
    """Extended-real Hamiltonian value; argmax present exactly when finite."""

    value: float
    argmax_control: np.ndarray | None

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.value)


def _integrand(problem, t, x, p, M, controls):
    m = controls.shape[0]
    X = np.broadcast_to(x, (m, x.size))
    b = np.asarray(problem.drift(t, X, controls), dtype=float).reshape(m, x.size)
    s = np.asarray(problem.diffusion(t, X, controls), dtype=float).reshape(
        m, x.size, problem.noise_dim
    )
    sst = np.einsum("mij,mkj->mik", s, s)
    return b @ p + 0.5 * np.einsum("mik,ik->m", sst, M)


def hamiltonian(
    problem: ControlProblem,
    t: float,
    x,
    p,
    M,
    control_grid_resolution: int = 41,
) -> HamiltonianValue:
    """Grid maximum of the controlled generator; flags +inf for unbounded sets.

    The value is the max over a uniform grid of U intersected with the
    admissibility box [-B, B]^k.  When U itself is unbounded, the integrand is
    re-maximized over boxes with bounds B*2^j, j = 0..6; if every doubling
    raises the max by more than a relative tolerance the sup is declared +inf.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    problem.require_inside(x)
    if not (0.0 <= t <= problem.horizon):
        raise ValueError("t must lie in [0, horizon]")
    if not np.allclose(M, M.T):
        raise ValueError("M must be symmetric")

    controls = problem.control_grid(control_grid_resolution)
    vals = _integrand(problem, t, x, p, M, controls)
    k_best = int(np.argmax(vals))
    best = float(vals[k_best])

    if not problem.control_set.is_bounded:
        base = max(problem.control_bound, 1.0)
        bounds = [base * 2.0**j for j in range(7)]
        probe = []
        for bj in bounds:
            grid_j = problem.control_set.grid(control_grid_resolution, bj)
            probe.append(float(np.max(_integrand(problem, t, x, p, M, grid_j))))
        increments = np.diff(probe)
        scales = np.maximum(1.0, np.abs(probe[:-1]))
        if np.all(increments > DIVERGENCE_TOL_REL * scales):
            # growth may still turn over beyond the last bound: the integrands
            # in scope are quadratic in the control, so a second divided
            # difference through the last probes detects downward curvature
            # (a finite sup with a distant maximizer) exactly
            s1 = (probe[5] - probe[4]) / (bounds[5] - bounds[4])
            s2 = (probe[6] - probe[5]) / (bounds[6] - bounds[5])
            curvature = (s2 - s1) / (bounds[6] - bounds[4])
            if curvature >= -1e-12 * scales[-1] / bounds[-1] ** 2:
                return HamiltonianValue(math.inf, None)
    return HamiltonianValue(best, controls[k_best].copy())


@dataclass(frozen=True)
class CompatibilityViolation:
    sample_index: int
    kind: str            # "H_finite_G_negative" | "G_positive_H_infinite"
    hamiltonian: float
    constraint: float


@dataclass(frozen=True)
class CompatibilityReport:
    n_samples: int
    violations: tuple

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0


def check_compatibility(
    problem: ControlProblem,
    samples,
    control_grid_resolution: int = 41,
    tol: float = COMPAT_TOL,
) -> CompatibilityReport:
    """H finite => G >= -tol  and  G > tol => H finite, on each sample."""
    samples = list(samples)
    if not samples:
        raise ValueError("samples must be nonempty")
    violations = []
    for i, (t, x, p, M) in enumerate(samples):
        h = hamiltonian(problem, t, x, p, M, control_grid_resolution)
        g = problem.constraint(t, x, p, M)
        if h.is_finite and g < -tol:
            violations.append(CompatibilityViolation(i, "H_finite_G_negative", h.value, g))
        if g > tol and not h.is_finite:
            violations.append(CompatibilityViolation(i, "G_positive_H_infinite", h.value, g))
    return CompatibilityReport(len(samples), tuple(violations))


@dataclass(frozen=True)
class CoefficientProbeReport:
    drift_lipschitz: np.ndarray
    diffusion_lipschitz: np.ndarray
    drift_growth: np.ndarray
    diffusion_growth: np.ndarray
    lipschitz_flags: int
    growth_flags: int

    @property
    def ok(self) -> bool:
        return self.lipschitz_flags == 0 and self.growth_flags == 0


def _default_probe_box(domain: Box) -> Box:
    lo, hi = [], []
    for a, b in zip(domain.lo, domain.hi):
        if math.isfinite(a) and math.isfinite(b):
            w = b - a
            lo.append(a + 0.1 * w)
            hi.append(b - 0.1 * w)
        elif math.isfinite(a):
            s = max(1.0, abs(a))
            lo.append(a + 0.25 * s)
            hi.append(a + 2.25 * s)
        elif math.isfinite(b):
            s = max(1.0, abs(b))
            lo.append(b - 2.25 * s)
            hi.append(b - 0.25 * s)
        else:
            lo.append(-1.5)
            hi.append(1.5)
    return Box(np.array(lo), np.array(hi))


def probe_coefficients(
    problem: ControlProblem,
    n_pairs: int,
    seed: int,
    box: Box | None = None,
    lipschitz_threshold: float | None = None,
    growth_threshold: float | None = None,
) -> CoefficientProbeReport:
    """Empirical Lipschitz and linear-growth ratios of b and sigma.

    Samples (t, u) and point pairs (x, y) in a bounded sub-box of the domain
    and reports |b(t,x,u)-b(t,y,u)|/|x-y| (drift; Frobenius for sigma) together
    with |b(t,x0,u)|/(1+|u|) at the box center x0 (standing in for the origin
    when 0 is outside the domain).  Ratios above the thresholds are counted.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if box is None:
        box = _default_probe_box(problem.state_domain)
    if not np.all(box.hi > box.lo):
        raise ValueError("degenerate probe box")
    rng = np.random.default_rng(seed)
    ts = rng.uniform(0.0, problem.horizon, n_pairs)
    us = problem.control_set.sample(rng, n_pairs, problem.control_bound)
    xs = rng.uniform(box.lo, box.hi, (n_pairs, box.dim))
    ys = rng.uniform(box.lo, box.hi, (n_pairs, box.dim))
    x0 = np.zeros(box.dim) if problem.state_domain.contains(np.zeros(box.dim)) else box.center()

    d_lip = np.empty(n_pairs)
    s_lip = np.empty(n_pairs)
    d_gro = np.empty(n_pairs)
    s_gro = np.empty(n_pairs)
    for i in range(n_pairs):
        t, u, x, y = ts[i], us[i], xs[i], ys[i]
        dist = float(np.linalg.norm(x - y))
        if dist < 1e-12:
            d_lip[i] = s_lip[i] = 0.0
        else:
            db = np.asarray(problem.drift(t, x, u)) - np.asarray(problem.drift(t, y, u))
            ds = np.asarray(problem.diffusion(t, x, u)) - np.asarray(problem.diffusion(t, y, u))
            d_lip[i] = np.linalg.norm(db) / dist
            s_lip[i] = np.linalg.norm(ds) / dist
        denom = 1.0 + float(np.linalg.norm(u))
        d_gro[i] = np.linalg.norm(np.asarray(problem.drift(t, x0, u))) / denom
        s_gro[i] = np.linalg.norm(np.asarray(problem.diffusion(t, x0, u))) / denom

    lip_flags = 0
    if lipschitz_threshold is not None:
        lip_flags = int(np.sum(d_lip > lipschitz_threshold) + np.sum(s_lip > lipschitz_threshold))
    gro_flags = 0
    if growth_threshold is not None:
        gro_flags = int(np.sum(d_gro > growth_threshold) + np.sum(s_gro > growth_threshold))
    return CoefficientProbeReport(d_lip, s_lip, d_gro, s_gro, lip_flags, gro_flags)


# ---------------------------------------------------------------------------
# Built-in coefficient families
# ---------------------------------------------------------------------------

def _linear_drift_maps(mu, sigma):
    def drift(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return mu * u[..., :1] * x

    def diffusion(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return (sigma * u[..., :1] * x)[..., None]

    return drift, diffusion


def _proportional_control_maps(mu, sigma):
    def drift(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return mu * u[..., :1] * np.ones_like(x)

    def diffusion(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return (sigma * u[..., :1] * np.ones_like(x))[..., None]

    return drift, diffusion


def _constant_maps(b0, s0):
    b0 = np.atleast_1d(np.asarray(b0, dtype=float))
    s0 = np.atleast_2d(np.asarray(s0, dtype=float))

    def drift(t, x, u):
        x = np.asarray(x, dtype=float)
        return np.ones_like(x) * b0

    def diffusion(t, x, u):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1] + (1, 1)) * s0 if s0.shape == (1, 1) else np.broadcast_to(
            s0, x.shape[:-1] + s0.shape
        ).copy()

    return drift, diffusion


def merton_problem(
    mu: float = 0.1,
    sigma: float = 0.2,
    p: float = 0.5,
    horizon: float = 1.0,
    bound: float = 10.0,
) -> ControlProblem:
    """Power-utility wealth problem: dX = u mu X dt + u sigma X dW on (0, inf).

    The control is the proportion of wealth at risk, so the state never leaves
    the domain for any bounded control.
    """
    drift, diffusion = _linear_drift_maps(mu, sigma)
    return ControlProblem(
        drift=drift,
        diffusion=diffusion,
        state_dim=1,
        noise_dim=1,
        control_dim=1,
        control_bound=bound,
        control_set=full_control_space(1),
        state_domain=Box(np.array([0.0]), np.array([np.inf])),
        horizon=horizon,
        payoff=power_payoff(p),
        gauge=power_gauge(p),
        gauge_constant=1.0,
        constraint=neg_second_constraint(),
        family="linear_drift",
        params={"mu": mu, "sigma": sigma, "p": p, "bound": bound},
    )


def proportional_control_problem(
    mu: float = 1.0,
    sigma: float = 1.0,
    bound: float = 1.0,
    payoff: ScalarField | None = None,
    horizon: float = 1.0,
    constraint: Constraint | None = None,
) -> ControlProblem:
    """Additive control model on the whole line: dX = u mu dt + u sigma dW."""
    drift, diffusion = _proportional_control_maps(mu, sigma)
    return ControlProblem(
        drift=drift,
        diffusion=diffusion,
        state_dim=1,
        noise_dim=1,
        control_dim=1,
        control_bound=bound,
        control_set=full_control_space(1),
        state_domain=Box(np.array([-np.inf]), np.array([np.inf])),
        horizon=horizon,
        payoff=payoff if payoff is not None else quadratic_payoff(),
        gauge=one_plus_square_gauge(),
        gauge_constant=2.0,
        constraint=constraint if constraint is not None else neg_second_constraint(),
        family="proportional_control",
        params={"mu": mu, "sigma": sigma, "bound": bound},
    )


def heat_problem(
    sigma: float = 1.0,
    horizon: float = 1.0,
    payoff: ScalarField | None = None,
    dim: int = 1,
) -> ControlProblem:
    """Uncontrolled diffusion dX = sigma dW with a compact (singleton) control set."""
    drift, diffusion = _constant_maps(np.zeros(dim), sigma * np.eye(dim))
    return ControlProblem(
        drift=drift,
        diffusion=diffusion,
        state_dim=dim,
        noise_dim=dim,
        control_dim=1,
        control_bound=0.0,
        control_set=box_control_set([0.0], [0.0]),
        state_domain=Box(np.full(dim, -np.inf), np.full(dim, np.inf)),
        horizon=horizon,
        payoff=payoff if payoff is not None else quadratic_payoff(),
        gauge=one_plus_square_gauge(),
        gauge_constant=1.0,
        constraint=positive_constraint(1.0),
        family="constant",
        params={"sigma": sigma, "dim": dim},
    )


def constant_coefficient_problem(
    b0,
    s0,
    horizon: float = 1.0,
    payoff: ScalarField | None = None,
    constraint: Constraint | None = None,
) -> ControlProblem:
    b0 = np.atleast_1d(np.asarray(b0, dtype=float))
    s0 = np.atleast_2d(np.asarray(s0, dtype=float))
    d = b0.size
    drift, diffusion = _constant_maps(b0, s0)
    return ControlProblem(
        drift=drift,
        diffusion=diffusion,
        state_dim=d,
        noise_dim=s0.shape[1],
        control_dim=1,
        control_bound=0.0,
        control_set=box_control_set([0.0], [0.0]),
        state_domain=Box(np.full(d, -np.inf), np.full(d, np.inf)),
        horizon=horizon,
        payoff=payoff if payoff is not None else quadratic_payoff(),
        gauge=one_plus_square_gauge(),
        gauge_constant=1.0,
        constraint=constraint if constraint is not None else positive_constraint(1.0),
        family="constant",
        params={"b0": b0.tolist(), "s0": s0.tolist()},
    )
