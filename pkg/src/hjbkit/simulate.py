"""Euler-Maruyama simulation of the controlled state under feedback policies.

Controls are frozen on each time step at u(t_n, X_n), which realizes a
predictable admissible control of the declared bound.  Paths that step out of
the domain (or an optional simulation box) are stopped at the pre-exit state
and flagged; nothing is reflected or resampled, so discretization leakage is
visible in the exit fraction.  Problems with proportional coefficients on
(0, inf) are advanced in log coordinates, which preserves positivity and makes
each step exact in distribution for frozen controls.

Noise is drawn from a counter-based Philox stream keyed by the seed; path p
consumes the counter block laid out as row p of the (n_paths, n_steps, d')
normal array, so ensembles are reproducible bit for bit and reductions are
fixed-order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "FeedbackPolicy",
    "constant_policy",
    "PathEnsemble",
    "ValueEstimate",
    "simulate_paths",
    "estimate_value",
    "optimize_policy",
    "gauge_check",
    "GaugeReport",
]


@dataclass(frozen=True)
class FeedbackPolicy:
    """Bounded measurable control rule u(t, x).

    rule(t, X) must accept X of shape (n, d) and return (n, k); bound is the
    declared sup-norm bound on the values.
    """

    rule: object
    bound: float
    tag: str = "analytic"

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        vals = np.asarray(self.rule(t, np.atleast_2d(x)), dtype=float)
        return vals[0] if single else vals


def constant_policy(u) -> FeedbackPolicy:
    u = np.atleast_1d(np.asarray(u, dtype=float))

    def rule(t, x):
        return np.broadcast_to(u, (x.shape[0], u.size)).copy()

    return FeedbackPolicy(rule=rule, bound=float(np.max(np.abs(u))), tag="constant")


def piecewise_constant_policy(breakpoints, controls) -> FeedbackPolicy:
    """Time-staircase policy: controls[i] on [breakpoints[i], breakpoints[i+1])."""
    breakpoints = np.asarray(breakpoints, dtype=float)
    controls = np.atleast_2d(np.asarray(controls, dtype=float))

    def rule(t, x):
        i = int(np.clip(np.searchsorted(breakpoints, t, side="right") - 1, 0, len(controls) - 1))
        return np.broadcast_to(controls[i], (x.shape[0], controls.shape[1])).copy()

    return FeedbackPolicy(rule=rule, bound=float(np.max(np.abs(controls))), tag="piecewise-constant")


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated paths with exit bookkeeping; frozen at the pre-exit state."""

    times: np.ndarray            # (n_steps+1,)
    states: np.ndarray           # (n_paths, n_steps+1, d)
    exit_step: np.ndarray        # (n_paths,) step index at which the path froze, -1 if none
    seed: int
    policy_tag: str
    log_coordinates: bool

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def exit_fraction(self) -> float:
        return float(np.mean(self.exit_step >= 0))

    def terminal_states(self) -> np.ndarray:
        return self.states[:, -1, :]


def _use_log_coordinates(problem) -> bool:
    return (
        problem.family == "linear_drift"
        and problem.state_dim == 1
        and problem.state_domain.lo[0] == 0.0
        and not np.isfinite(problem.state_domain.hi[0])
    )


def simulate_paths(
    problem,
    policy: FeedbackPolicy,
    t0: float,
    x0,
    n_paths: int,
    n_steps: int,
    seed: int,
    simulation_box=None,
    t_end: float | None = None,
) -> PathEnsemble:
    """Euler-Maruyama ensemble from (t0, x0) to the horizon (or t_end)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    problem.require_inside(x0)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    T = problem.horizon if t_end is None else t_end
    if not t0 < T:
        raise ValueError("t0 must precede the end time")
    dt = (T - t0) / n_steps
    sqdt = np.sqrt(dt)
    d, dprime = problem.state_dim, problem.noise_dim
    times = t0 + dt * np.arange(n_steps + 1)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    Z = rng.standard_normal((n_paths, n_steps, dprime))

    log_mode = _use_log_coordinates(problem)
    mu = problem.params.get("mu") if log_mode else None
    sig = problem.params.get("sigma") if log_mode else None

    states = np.empty((n_paths, n_steps + 1, d))
    states[:, 0, :] = x0
    exit_step = np.full(n_paths, -1, dtype=int)
    active = np.ones(n_paths, dtype=bool)
    X = np.broadcast_to(x0, (n_paths, d)).copy()
    B = problem.control_bound

    for n in range(n_steps):
        t = times[n]
        U = np.asarray(policy.rule(t, X), dtype=float).reshape(n_paths, -1)
        if np.max(np.abs(U)) > B + 1e-9:
            raise ValueError(
                f"policy value exceeds the admissibility bound {B} at step {n}"
            )
        if log_mode:
            u = U[:, 0]
            dY = (u * mu - 0.5 * (u * sig) ** 2) * dt + u * sig * sqdt * Z[:, n, 0]
            X_new = X * np.exp(dY)[:, None]
        else:
            b = np.asarray(problem.drift(t, X, U), dtype=float).reshape(n_paths, d)
            s = np.asarray(problem.diffusion(t, X, U), dtype=float).reshape(n_paths, d, dprime)
            X_new = X + b * dt + np.einsum("nij,nj->ni", s, sqdt * Z[:, n, :])

        inside = np.all(X_new > problem.state_domain.lo, axis=1) & np.all(
            X_new < problem.state_domain.hi, axis=1
        )
        if simulation_box is not None:
            inside &= np.all(X_new >= simulation_box.lo, axis=1) & np.all(
                X_new <= simulation_box.hi, axis=1
            )
        newly_exited = active & ~inside
        exit_step[newly_exited] = n
        active &= inside
        X = np.where(active[:, None], X_new, X)
        states[:, n + 1, :] = X

    return PathEnsemble(
        times=times,
        states=states,
        exit_step=exit_step,
        seed=seed,
        policy_tag=policy.tag,
        log_coordinates=log_mode,
    )


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    half_width_95: float
    exit_fraction: float
    n_paths: int

    @property
    def low(self) -> float:
        return self.mean - self.half_width_95

    @property
    def high(self) -> float:
        return self.mean + self.half_width_95


def estimate_value(ensemble: PathEnsemble, payoff) -> ValueEstimate:
    """Sample mean of g at the terminal (or stopped) states with a normal CI."""
    xT = ensemble.terminal_states()
    g = np.asarray(payoff(xT), dtype=float)
    mean = float(np.mean(g))
    se = float(np.std(g, ddof=1) / np.sqrt(len(g))) if len(g) > 1 else 0.0
    return ValueEstimate(mean, 1.96 * se, ensemble.exit_fraction, len(g))


def optimize_policy(
    problem,
    family,
    t0: float,
    x0,
    budget: int,
    seed: int,
    n_paths: int = 10_000,
    n_steps: int = 64,
    simulation_box=None,
):
    """Best member of a finite policy family under common random numbers.

    Every member is admissible, so the returned estimate is a statistical
    lower bound for the strong value function.  The same seed drives every
    evaluation, which preserves the ordering statistics of the comparison.
    """
    family = list(family)
    if not family:
        raise ValueError("policy family must be nonempty")
    family = family[: max(1, budget)]
    best_policy, best_est = None, None
    for pol in family:
        ens = simulate_paths(problem, pol, t0, x0, n_paths, n_steps, seed, simulation_box)
        est = estimate_value(ens, problem.payoff)
        if best_est is None or est.mean > best_est.mean:
            best_policy, best_est = pol, est
    return best_policy, best_est


@dataclass(frozen=True)
class GaugeReport:
    mean_pathwise_sup: float
    top_percent_ratio: float
    heavy_tail_flag: bool


def gauge_check(ensemble: PathEnsemble, gauge) -> GaugeReport:
    """Empirical E[sup_t psi(X_t)] with a crude heavy-tail diagnostic."""
    vals = np.asarray(gauge(ensemble.states), dtype=float)  # (n_paths, n_steps+1)
    sups = vals.max(axis=1)
    total = float(np.sum(sups))
    k = max(1, int(np.ceil(0.01 * len(sups))))
    top = float(np.sum(np.sort(sups)[-k:]))
    ratio = top / total if total > 0 else 0.0
    return GaugeReport(float(np.mean(sups)), ratio, ratio > 0.5)
