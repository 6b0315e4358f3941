"""Monotone explicit solver for the constrained HJB equation.

Backward in time from the terminal slice:

    v(t_n) = v(t_{n+1}) + dt * max_u  L^u v(t_{n+1}),
    L^u v  = b(t,x,u) . D_h v + 1/2 Tr(sigma sigma^T D2_h v),

with the drift upwinded by its sign and the diffusion on central (3-point,
non-uniform) stencils, followed by a constraint step that keeps the slice on
the G >= 0 side: either projection onto concave functions (G = -M, 1-D) or a
one-sided penalization.  All stencil weights are non-negative under the CFL
bound, so the scheme is monotone and discrete comparison holds slice by slice.

Output time nodes are decoupled from the internal step: each output interval
is subdivided until the CFL bound is met (an explicitly supplied dt must
already satisfy it).  Truncation-box edges hold Dirichlet values taken from
the terminal slice.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, NumericalError
from .facelift import _constraint_on_grid
from .grids import GridFunction, SpatialGrid

__all__ = [
    "SchemeConfig",
    "SpaceTimeSolution",
    "GeneratorResult",
    "discrete_generator",
    "solve_hjb",
    "extract_policy",
    "convergence_study",
    "ConvergenceStudy",
]

_PROJECT_TRIGGER = 1e-13   # relative convexity defect that triggers re-projection


@dataclass(frozen=True)
class SchemeConfig:
    """Explicit-scheme knobs.  dt, when given, must satisfy the CFL bound."""

    n_time_nodes: int = 101
    dt: float | None = None
    control_grid_resolution: int = 41
    constraint_mode: str = "auto"      # auto | project | penalize | off
    penalty_weight: float | None = None
    upwind: bool = True
    cfl_safety: float = 1.0

    def __post_init__(self):
        if self.n_time_nodes < 2:
            raise ConfigurationError("need at least 2 time nodes")
        if self.constraint_mode not in ("auto", "project", "penalize", "off"):
            raise ConfigurationError(f"unknown constraint mode {self.constraint_mode!r}")


@dataclass(frozen=True)
class SpaceTimeSolution:
    """Backward-solved value slices with the per-node argmax policy table."""

    grid: SpatialGrid
    times: np.ndarray
    values: np.ndarray          # (n_times, *grid.shape)
    policies: np.ndarray        # (n_times, *grid.shape, k)
    raw_payoff: GridFunction    # g sampled on the grid (terminal may be face-lifted)
    metadata: dict = field(default_factory=dict)

    @property
    def terminal(self) -> GridFunction:
        return GridFunction(self.grid, self.values[-1])

    def slice_at(self, n: int) -> GridFunction:
        return GridFunction(self.grid, self.values[n])

    def value_at(self, t: float, x) -> float:
        n = int(np.searchsorted(self.times, t, side="right") - 1)
        n = min(max(n, 0), len(self.times) - 1)
        return GridFunction(self.grid, self.values[n]).interpolate(x)

    def to_csv(self) -> str:
        dim = self.grid.dim
        k = self.policies.shape[-1]
        head = (
            "t,"
            + ",".join(f"x{i}" for i in range(dim))
            + ",value,"
            + ",".join(f"u{i}" for i in range(k))
        )
        rows = [head]
        nodes = self.grid.nodes()
        for n, t in enumerate(self.times):
            vals = self.values[n].ravel()
            pols = self.policies[n].reshape(-1, k)
            for node, v, u in zip(nodes, vals, pols):
                rows.append(
                    f"{float(t)!r},"
                    + ",".join(repr(float(c)) for c in node)
                    + f",{float(v)!r},"
                    + ",".join(repr(float(c)) for c in u)
                )
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class GeneratorResult:
    values: GridFunction
    one_sided_mask: np.ndarray   # nodes where the stencil fell back to one-sided


def _coeff_arrays(problem, x_pts, controls, t):
    """b and sigma sigma^T diag at (controls x points): (m, n) arrays per dim."""
    m, n = controls.shape[0], x_pts.shape[0]
    d = problem.state_dim
    X = np.broadcast_to(x_pts[None, :, :], (m, n, d))
    U = np.broadcast_to(controls[:, None, :], (m, n, controls.shape[1]))
    b = np.asarray(problem.drift(t, X, U), dtype=float).reshape(m, n, d)
    s = np.asarray(problem.diffusion(t, X, U), dtype=float).reshape(m, n, d, problem.noise_dim)
    sst = np.einsum("mnij,mnkj->mnik", s, s)
    return b, sst


def discrete_generator(problem, u, v_slice: GridFunction, t: float) -> GeneratorResult:
    """L^u v on the grid: upwind drift, central diffusion, one-sided at edges."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    grid = v_slice.grid
    v = v_slice.values
    nodes = grid.nodes()
    b, sst = _coeff_arrays(problem, nodes, u[None, :], t)
    b = b[0].reshape(grid.shape + (grid.dim,))
    sst = sst[0].reshape(grid.shape + (grid.dim, grid.dim))

    out = np.zeros(grid.shape)
    one_sided = np.zeros(grid.shape, dtype=bool)
    for d in range(grid.dim):
        a = grid.axes[d]
        vm = np.moveaxis(v, d, 0)
        bm = np.moveaxis(b[..., d], d, 0)
        s2 = np.moveaxis(sst[..., d, d], d, 0)
        res = np.zeros_like(vm)
        hm = (a[1:-1] - a[:-2]).reshape((-1,) + (1,) * (grid.dim - 1))
        hp = (a[2:] - a[1:-1]).reshape((-1,) + (1,) * (grid.dim - 1))
        fwd = (vm[2:] - vm[1:-1]) / hp
        bwd = (vm[1:-1] - vm[:-2]) / hm
        second = 2.0 * (vm[:-2] / (hm * (hm + hp)) - vm[1:-1] / (hm * hp) + vm[2:] / (hp * (hm + hp)))
        drift_term = np.maximum(bm[1:-1], 0.0) * fwd + np.minimum(bm[1:-1], 0.0) * bwd
        res[1:-1] = drift_term + 0.5 * s2[1:-1] * second
        # one-sided fallback where the stencil would leave the box
        res[0] = bm[0] * (vm[1] - vm[0]) / (a[1] - a[0]) + 0.5 * s2[0] * _edge_second(a, vm, True)
        res[-1] = bm[-1] * (vm[-1] - vm[-2]) / (a[-1] - a[-2]) + 0.5 * s2[-1] * _edge_second(
            a, vm, False
        )
        out += np.moveaxis(res, 0, d)
        mask = np.zeros_like(vm, dtype=bool)
        mask[0] = mask[-1] = True
        one_sided |= np.moveaxis(mask, 0, d)
    if grid.dim == 2 and np.any(np.abs(sst[..., 0, 1]) > 0):
        dx = (grid.axes[0][2:] - grid.axes[0][:-2])[:, None]
        dy = (grid.axes[1][2:] - grid.axes[1][:-2])[None, :]
        mixed = np.zeros(grid.shape)
        mixed[1:-1, 1:-1] = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (dx * dy)
        out += sst[..., 0, 1] * mixed
    return GeneratorResult(GridFunction(grid, out), one_sided)


def _edge_second(a, vm, left: bool):
    if left:
        h0, h1 = a[1] - a[0], a[2] - a[1]
        return 2.0 * (vm[0] / (h0 * (h0 + h1)) - vm[1] / (h0 * h1) + vm[2] / (h1 * (h0 + h1)))
    h0, h1 = a[-2] - a[-3], a[-1] - a[-2]
    return 2.0 * (vm[-3] / (h0 * (h0 + h1)) - vm[-2] / (h0 * h1) + vm[-1] / (h1 * (h0 + h1)))


def _float_upper_envelope(x, v):
    """Fast float upper concave envelope (monotone chain + chord interpolation)."""
    n = x.size
    hull = [0]
    for k in range(1, n):
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            if (x[j] - x[i]) * (v[k] - v[i]) - (v[j] - v[i]) * (x[k] - x[i]) > 0.0:
                hull.pop()
            else:
                break
        hull.append(k)
    out = v.copy()
    for a, b in zip(hull[:-1], hull[1:]):
        if b > a + 1:
            t = (x[a + 1 : b] - x[a]) / (x[b] - x[a])
            out[a + 1 : b] = v[a] + (v[b] - v[a]) * t
    np.maximum(out, v, out=out)
    return out


class _Stepper1D:
    """Precomputed per-control stencil weights for the 1-D explicit step."""

    def __init__(self, problem, grid, controls, upwind):
        self.problem = problem
        self.x = grid.axes[0]
        self.controls = controls
        self.upwind = upwind
        n = self.x.size
        self.hm = self.x[1:-1] - self.x[:-2]
        self.hp = self.x[2:] - self.x[1:-1]
        self.interior_pts = self.x[1:-1, None]
        self._weights_cache = None

    def weights(self, t):
        if self._weights_cache is not None and not self.problem.time_dependent:
            return self._weights_cache
        b, sst = _coeff_arrays(self.problem, self.interior_pts, self.controls, t)
        b = b[..., 0]
        s2 = sst[..., 0, 0]
        hm, hp = self.hm, self.hp
        if self.upwind:
            bp = np.maximum(b, 0.0)
            bm = np.minimum(b, 0.0)
            wm = s2 / (hm * (hm + hp)) - bm / hm
            wp = s2 / (hp * (hm + hp)) + bp / hp
            w0 = -(s2 / (hm * hp)) - bp / hp + bm / hm
        else:
            wm = s2 / (hm * (hm + hp)) - b / (hm + hp)
            wp = s2 / (hp * (hm + hp)) + b / (hm + hp)
            w0 = -(s2 / (hm * hp))
        w = (wm, w0, wp)
        if not self.problem.time_dependent:
            self._weights_cache = w
        return w

    def rate(self, t):
        return float(np.max(-self.weights(t)[1]))

    def apply(self, v, t, dt, out):
        wm, w0, wp = self.weights(t)
        np.multiply(w0, v[1:-1], out=out)
        out += wm * v[:-2]
        out += wp * v[2:]
        out *= dt
        out += v[1:-1]
        return out

    def argmax(self, v, t):
        wm, w0, wp = self.weights(t)
        vals = w0 * v[1:-1] + wm * v[:-2] + wp * v[2:]
        idx = np.argmax(vals, axis=0)
        full = np.empty(v.size, dtype=int)
        full[1:-1] = idx
        full[0] = idx[0]
        full[-1] = idx[-1]
        return self.controls[full]


class _StepperND:
    """Dimension-split stencil weights for 2-D grids (diagonal diffusion)."""

    def __init__(self, problem, grid, controls, upwind):
        self.problem = problem
        self.grid = grid
        self.controls = controls
        self.upwind = upwind
        nodes = grid.nodes()
        self.inner = np.ones(grid.shape, dtype=bool)
        for d in range(grid.dim):
            sl = [slice(None)] * grid.dim
            for edge in (0, -1):
                sl[d] = edge
                self.inner[tuple(sl)] = False
        self.nodes = nodes
        self._cache = None

    def weights(self, t):
        if self._cache is not None and not self.problem.time_dependent:
            return self._cache
        grid, controls = self.grid, self.controls
        m = controls.shape[0]
        b, sst = _coeff_arrays(self.problem, self.nodes, controls, t)
        shape = (m,) + grid.shape
        off = np.abs(sst[..., 0, 1]) if grid.dim == 2 else np.zeros(1)
        if grid.dim == 2 and np.max(off) > 1e-14:
            raise ConfigurationError("2-D solver supports diagonal diffusion only")
        b = b.reshape(shape + (grid.dim,))
        w0 = np.zeros(shape)
        neigh = []
        for d in range(grid.dim):
            a = grid.axes[d]
            hm = np.ones(grid.shape)
            hp = np.ones(grid.shape)
            sl_h = [None] * grid.dim
            sh = [1] * grid.dim
            sh[d] = a.size - 2
            hm_core = (a[1:-1] - a[:-2]).reshape(sh)
            hp_core = (a[2:] - a[1:-1]).reshape(sh)
            core = [slice(1, -1) if dd == d else slice(None) for dd in range(grid.dim)]
            hm[tuple(core)] = hm_core
            hp[tuple(core)] = hp_core
            s2 = sst.reshape(shape + (grid.dim, grid.dim))[..., d, d]
            bd = b[..., d]
            bp = np.maximum(bd, 0.0)
            bm = np.minimum(bd, 0.0)
            wm = s2 / (hm * (hm + hp)) - bm / hm
            wp = s2 / (hp * (hm + hp)) + bp / hp
            w0 += -(s2 / (hm * hp)) - bp / hp + bm / hm
            neigh.append((d, wm, wp))
        w = (w0, neigh)
        if not self.problem.time_dependent:
            self._cache = w
        return w

    def rate(self, t):
        w0, _ = self.weights(t)
        return float(np.max(-w0[:, self.inner]))

    def step_max(self, v, t, dt):
        w0, neigh = self.weights(t)
        acc = v[None, ...] + dt * w0 * v[None, ...]
        for d, wm, wp in neigh:
            vm = np.roll(v, 1, axis=d)
            vp = np.roll(v, -1, axis=d)
            acc = acc + dt * (wm * vm[None, ...] + wp * vp[None, ...])
        new = acc.max(axis=0)
        out = v.copy()
        out[self.inner] = new[self.inner]
        return out

    def argmax(self, v, t):
        w0, neigh = self.weights(t)
        acc = w0 * v[None, ...]
        for d, wm, wp in neigh:
            vm = np.roll(v, 1, axis=d)
            vp = np.roll(v, -1, axis=d)
            acc = acc + wm * vm[None, ...] + wp * vp[None, ...]
        idx = acc.argmax(axis=0)
        return self.controls[idx]


def _resolve_mode(config, problem, grid):
    if config.constraint_mode != "auto":
        mode = config.constraint_mode
    elif problem.constraint.family == "neg_second" and grid.dim == 1:
        mode = "project"
    elif problem.constraint.family == "positive_const":
        mode = "off"
    else:
        mode = "penalize"
    if mode == "project" and (grid.dim != 1 or problem.constraint.family != "neg_second"):
        raise ConfigurationError("projection mode requires a 1-D grid with G = -M")
    return mode


def solve_hjb(problem, terminal: GridFunction, config: SchemeConfig | None = None) -> SpaceTimeSolution:
    """Backward explicit solve of min{-v_t - H, G} = 0 with the given terminal data."""
    if config is None:
        config = SchemeConfig()
    grid = terminal.grid
    if not problem.state_domain.contains_box(grid.box, strict=False):
        raise ConfigurationError("truncation box must lie inside the state domain")
    mode = _resolve_mode(config, problem, grid)
    controls = problem.control_grid(config.control_grid_resolution)
    T = problem.horizon
    times = np.linspace(0.0, T, config.n_time_nodes)
    dt_out = times[1] - times[0]

    stepper = (
        _Stepper1D(problem, grid, controls, config.upwind)
        if grid.dim == 1
        else _StepperND(problem, grid, controls, config.upwind)
    )
    rate = stepper.rate(T)
    dt_max = config.cfl_safety / rate if rate > 0 else math.inf
    if config.dt is not None:
        if config.dt > dt_max * (1 + 1e-12):
            raise ConfigurationError(
                f"dt={config.dt:g} violates the CFL bound dt<={dt_max:g} "
                "computed over the grid and control box"
            )
        m_sub = max(1, math.ceil(dt_out / config.dt - 1e-12))
    else:
        m_sub = max(1, math.ceil(dt_out / dt_max)) if math.isfinite(dt_max) else 1
    dt = dt_out / m_sub

    # penalty weight: strong enough to enforce G_h >= -tol, small enough to stay monotone
    rho = config.penalty_weight
    if mode == "penalize" and rho is None:
        from .facelift import _auto_relaxation

        rho = 0.9 * _auto_relaxation(problem, grid) / dt

    n_times = len(times)
    values = np.empty((n_times,) + grid.shape)
    k = problem.control_dim
    policies = np.empty((n_times,) + grid.shape + (k,))
    v = np.array(terminal.values, dtype=float)
    values[-1] = v
    policies[-1] = stepper.argmax(v, T).reshape(grid.shape + (k,))

    scale = max(1.0, float(np.max(np.abs(v))))
    projections = 0
    t_wall = _time.time()
    if grid.dim == 1:
        x = grid.axes[0]
        buf = np.empty((controls.shape[0], x.size - 2))
        hm = x[1:-1] - x[:-2]
        hp = x[2:] - x[1:-1]
        for n in range(n_times - 2, -1, -1):
            for s in range(m_sub):
                t_from = times[n + 1] - s * dt
                stepper.apply(v, t_from, dt, buf)
                v[1:-1] = buf.max(axis=0)
                if mode == "project":
                    # trigger only on a real convexity defect (cheap vectorized test)
                    defect = v[2:] * hm - v[1:-1] * (hm + hp) + v[:-2] * hp
                    if np.max(defect) > _PROJECT_TRIGGER * scale:
                        v = _float_upper_envelope(x, v)
                        projections += 1
                elif mode == "penalize":
                    gh = _constraint_on_grid(problem, grid, v)
                    lifted = v - (dt * rho) * gh
                    v[1:-1] = np.maximum(v, lifted)[1:-1]
            if not np.all(np.isfinite(v)):
                raise NumericalError("non-finite values in slice", slice_index=n)
            values[n] = v
            policies[n] = stepper.argmax(v, times[n]).reshape(grid.shape + (k,))
    else:
        for n in range(n_times - 2, -1, -1):
            for s in range(m_sub):
                t_from = times[n + 1] - s * dt
                v = stepper.step_max(v, t_from, dt)
                if mode == "penalize":
                    gh = _constraint_on_grid(problem, grid, v)
                    lifted = v - (dt * rho) * gh
                    v[stepper.inner] = np.maximum(v, lifted)[stepper.inner]
            if not np.all(np.isfinite(v)):
                raise NumericalError("non-finite values in slice", slice_index=n)
            values[n] = v
            policies[n] = stepper.argmax(v, times[n]).reshape(grid.shape + (k,))

    raw = GridFunction(grid, problem.payoff(grid.nodes()).reshape(grid.shape))
    meta = {
        "mode": mode,
        "dt_internal": dt,
        "substeps_per_interval": m_sub,
        "cfl_dt_max": dt_max,
        "control_grid_size": int(controls.shape[0]),
        "projections": projections,
        "edge_treatment": "dirichlet_terminal_boundary",
        "wall_seconds": _time.time() - t_wall,
    }
    return SpaceTimeSolution(grid, times, values, policies, raw, meta)


def _nearest_indices(axis, xs):
    j = np.clip(np.searchsorted(axis, xs), 1, axis.size - 1)
    use_left = (xs - axis[j - 1]) <= (axis[j] - xs)
    return np.where(use_left, j - 1, j)


def extract_policy(solution: SpaceTimeSolution):
    """Feedback rule: argmax control at the nearest node, latest time node <= t."""
    from .simulate import FeedbackPolicy

    times = solution.times
    policies = solution.policies
    axes = solution.grid.axes
    bound = float(np.max(np.abs(policies)))

    def rule(t, x):
        n = int(np.searchsorted(times, t, side="right") - 1)
        n = min(max(n, 0), len(times) - 1)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = tuple(_nearest_indices(axes[d], x[:, d]) for d in range(len(axes)))
        return policies[n][idx]

    return FeedbackPolicy(rule=rule, bound=bound, tag="grid-table")


@dataclass(frozen=True)
class ConvergenceStudy:
    shapes: tuple
    diffs: tuple
    orders: tuple


def convergence_study(
    problem,
    terminal: GridFunction,
    refinements: int,
    config: SchemeConfig | None = None,
    mode: str = "space",
) -> ConvergenceStudy:
    """Dyadic refinement study; successive sup-differences on the coarse nodes.

    mode="space" refines the grid (internal dt follows the CFL bound);
    mode="time" keeps the grid and halves dt below a CFL-valid base.  The
    terminal data is resampled from the problem payoff when it matches it on
    the coarse nodes, so interpolation error does not floor the estimate.
    """
    if refinements < 2:
        raise ConfigurationError("refinements must be >= 2")
    if config is None:
        config = SchemeConfig()
    g_vals = problem.payoff(terminal.grid.nodes()).reshape(terminal.grid.shape)
    resample = np.allclose(g_vals, terminal.values, rtol=1e-12, atol=1e-12)

    slices = []
    shapes = []
    if mode == "space":
        grid = terminal.grid
        term = terminal
        for level in range(refinements + 1):
            sol = solve_hjb(problem, term, config)
            stride = 2**level
            sl = tuple(slice(None, None, stride) for _ in range(grid.dim))
            slices.append(sol.values[0][sl])
            shapes.append(sol.grid.shape)
            if level < refinements:
                fine = term.grid.refine()
                if resample:
                    fv = problem.payoff(fine.nodes()).reshape(fine.shape)
                else:
                    fv = np.array(
                        [term.interpolate(pt) for pt in fine.nodes()]
                    ).reshape(fine.shape)
                term = GridFunction(fine, fv)
    elif mode == "time":
        base = solve_hjb(problem, terminal, config)
        dt0 = base.metadata["dt_internal"]
        for level in range(refinements + 1):
            cfg = replace(config, dt=dt0 / 2**level)
            sol = solve_hjb(problem, terminal, cfg)
            slices.append(sol.values[0])
            shapes.append(sol.grid.shape)
    else:
        raise ConfigurationError("mode must be 'space' or 'time'")

    diffs = tuple(
        float(np.max(np.abs(slices[i] - slices[i + 1]))) for i in range(refinements)
    )
    orders = tuple(
        math.log2(diffs[i] / diffs[i + 1]) if diffs[i + 1] > 0 else math.inf
        for i in range(refinements - 1)
    )
    return ConvergenceStudy(tuple(shapes), diffs, orders)
