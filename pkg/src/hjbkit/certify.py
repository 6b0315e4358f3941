"""Monte-Carlo certification of stochastic sub- and super-solution candidates.

A sub-solution candidate carries a companion policy and must make
w(t, X_t) a submartingale under it, stay below the payoff at the horizon and
respect its declared growth bound.  A super-solution candidate must make
w(t, X_t) a supermartingale under EVERY admissible control; that universal
quantifier is approximated by an explicit adversary class (control-box
corners, random time-staircase policies, and any supplied policies such as a
solver-extracted argmax rule, the strongest available adversary).

Each martingale inequality is tested in aggregated form: fixed deterministic
start times tau, fresh start points xi drawn from a declared compact box, and
end rules rho that are either later deterministic times or the first exit
from a ball around xi, mirroring the stopping structure the theory relies on.
Statistical margins are one-sided: a true (super)martingale is rejected only
with probability ~Phi(-z) per record, and failures are never absorbed into
the passing side.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .grids import Box
from .oracles import merton_lambda, merton_optimal_control
from .simulate import (
    FeedbackPolicy,
    ValueEstimate,
    constant_policy,
    estimate_value,
    piecewise_constant_policy,
    simulate_paths,
)

__all__ = [
    "CandidateFunction",
    "CertifyConfig",
    "AdversaryConfig",
    "BracketConfig",
    "TestRecord",
    "CertificationReport",
    "certify_subsolution",
    "certify_supersolution",
    "lattice_max",
    "lattice_min",
    "bracket_report",
    "BracketReport",
    "merton_candidate",
    "constant_candidate",
    "candidate_from_solution",
]


@dataclass(frozen=True)
class CandidateFunction:
    """A (t, x) function proposed as a stochastic sub- or super-solution.

    evaluator(t, X) must accept X of shape (n, d) and return (n,).  Sub
    candidates carry a policy factory (tau, xi) -> FeedbackPolicy whose values
    stay within policy_bound; super candidates need no policy.
    """

    evaluator: object
    kind: str                      # "sub" | "super"
    growth_constant: float
    policy_factory: object = None
    policy_bound: float = 0.0
    name: str = "candidate"

    def __post_init__(self):
        if self.kind not in ("sub", "super"):
            raise ValueError("kind must be 'sub' or 'super'")
        if self.kind == "sub" and self.policy_factory is None:
            raise ValueError("sub-solution candidates need a companion policy")

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        vals = np.asarray(self.evaluator(t, np.atleast_2d(x)), dtype=float)
        return float(vals[0]) if single else vals


@dataclass(frozen=True)
class CertifyConfig:
    """Battery configuration; budget is the number of paths per policy sweep."""

    start_box: Box
    budget: int = 100_000
    z: float = 4.0
    tol: float = 1e-9
    n_starts: int = 3
    steps_per_record: int = 48
    ball_radius_fraction: float = 0.25
    seed: int = 0
    simulation_box: Box | None = None
    terminal_check_nodes: int = 101
    growth_check_points: int = 64


@dataclass(frozen=True)
class AdversaryConfig:
    """Explicit approximation of 'every admissible control' for the super test."""

    include_corners: bool = True
    n_random: int = 3
    n_pieces: int = 4
    extra_policies: tuple = ()
    seed: int = 1


@dataclass(frozen=True)
class TestRecord:
    kind: str                  # "martingale" | "terminal" | "growth"
    tau: float
    rho_spec: str
    start: tuple
    adversary: str
    margin: float
    stderr: float
    n_paths: int
    passed: bool


@dataclass(frozen=True)
class CertificationReport:
    candidate: str
    side: str
    records: tuple
    z: float
    tol: float
    budget: int
    seed: int
    adversary_class: str = "companion-policy"

    @property
    def certified(self) -> bool:
        return all(r.passed for r in self.records)

    @property
    def verdict(self) -> str:
        tag = "statistical" if self.side == "sub" else f"statistical, adversary class: {self.adversary_class}"
        return f"certified ({tag})" if self.certified else "NOT certified"

    def failing(self) -> tuple:
        return tuple(r for r in self.records if not r.passed)


def _taus(horizon):
    return [0.0, 0.25 * horizon, 0.5 * horizon, 0.75 * horizon]


def _draw_starts(config: CertifyConfig, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((config.seed, 0x5747))))
    return rng.uniform(config.start_box.lo, config.start_box.hi, (n, config.start_box.dim))


def _stop_indices(ensemble, rho_spec, tau, horizon, xi, radius):
    """Per-path index of the end rule rho on the simulation time grid."""
    times = ensemble.times
    n_steps = len(times) - 1
    if rho_spec == "plus_eighth":
        rho = min(tau + horizon / 8.0, horizon)
        k = int(round((rho - tau) / (times[-1] - times[0]) * n_steps))
        return np.full(ensemble.n_paths, k, dtype=int)
    if rho_spec == "terminal":
        return np.full(ensemble.n_paths, n_steps, dtype=int)
    if rho_spec == "ball_exit":
        dist = np.max(np.abs(ensemble.states - xi), axis=2)  # (n_paths, n_steps+1)
        outside = dist > radius
        any_exit = outside.any(axis=1)
        first = outside.argmax(axis=1)
        return np.where(any_exit, first, n_steps)
    raise ValueError(f"unknown rho spec {rho_spec!r}")


def _evaluate_at_stops(candidate, ensemble, idx):
    out = np.empty(ensemble.n_paths)
    for k in np.unique(idx):
        mask = idx == k
        out[mask] = candidate.evaluator(ensemble.times[k], ensemble.states[mask, k, :])
    return out


def _martingale_records(candidate, problem, config, policy_for, adversary_tag, direction):
    """direction +1: submartingale test E[w(rho)] >= w(tau); -1: supermartingale."""
    T = problem.horizon
    radius = config.ball_radius_fraction * float(
        np.max(config.start_box.hi - config.start_box.lo)
    )
    taus = _taus(T)
    rho_specs = ["plus_eighth", "terminal", "ball_exit"]
    starts = _draw_starts(config, config.n_starts)
    n_records = len(taus) * len(rho_specs) * len(starts)
    n_paths = max(16, config.budget // n_records)

    tag_key = zlib.crc32(adversary_tag.encode())
    records = []
    ridx = 0
    for tau in taus:
        for xi in starts:
            policy = policy_for(tau, xi)
            ens = None
            for rho_spec in rho_specs:
                if ens is None:
                    ens = simulate_paths(
                        problem,
                        policy,
                        tau,
                        xi,
                        n_paths,
                        config.steps_per_record,
                        (config.seed, ridx, tag_key),
                        config.simulation_box,
                    )
                idx = _stop_indices(ens, rho_spec, tau, T, xi, radius)
                w_end = _evaluate_at_stops(candidate, ens, idx)
                w_start = candidate(tau, xi)
                diff = w_end - w_start if direction > 0 else w_start - w_end
                margin = float(np.mean(diff))
                se = float(np.std(diff, ddof=1) / np.sqrt(len(diff)))
                passed = margin >= -(config.z * se + config.tol)
                records.append(
                    TestRecord(
                        "martingale",
                        tau,
                        rho_spec,
                        tuple(xi),
                        adversary_tag,
                        margin,
                        se,
                        n_paths,
                        passed,
                    )
                )
                ridx += 1
    return records


def _terminal_record(candidate, problem, config, direction):
    axes = [
        np.linspace(lo, hi, config.terminal_check_nodes)
        for lo, hi in zip(config.start_box.lo, config.start_box.hi)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    g = problem.payoff(pts)
    wT = np.asarray(candidate.evaluator(problem.horizon, pts), dtype=float)
    margin = float(np.min(g - wT)) if direction > 0 else float(np.min(wT - g))
    return TestRecord(
        "terminal", problem.horizon, "-", (), "-", margin, 0.0,
        pts.shape[0], margin >= -config.tol,
    )


def _growth_record(candidate, problem, config):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((config.seed, 0x9701))))
    pts = rng.uniform(
        config.start_box.lo, config.start_box.hi, (config.growth_check_points, config.start_box.dim)
    )
    ts = rng.uniform(0.0, problem.horizon, config.growth_check_points)
    worst = np.inf
    for t, x in zip(ts, pts):
        bound = candidate.growth_constant * float(problem.gauge(x[None, :])[0])
        worst = min(worst, bound - abs(candidate(t, x)))
    return TestRecord(
        "growth", 0.0, "-", (), "-", float(worst), 0.0,
        config.growth_check_points, worst >= -config.tol,
    )


def certify_subsolution(candidate: CandidateFunction, problem, config: CertifyConfig) -> CertificationReport:
    """Submartingale battery under the candidate's companion policy.

    Checks E[w(rho, X_rho)] >= w(tau, xi) - z*stderr - tol across the stopping
    battery, w(T, .) <= g on the test nodes, and the growth bound.
    """
    if candidate.kind != "sub":
        raise ValueError("certify_subsolution needs a sub candidate")
    if candidate.policy_factory is None:
        raise ValueError("sub candidate is missing its companion policy")
    records = _martingale_records(
        candidate, problem, config, candidate.policy_factory, "companion", +1
    )
    records.append(_terminal_record(candidate, problem, config, +1))
    records.append(_growth_record(candidate, problem, config))
    return CertificationReport(
        candidate.name, "sub", tuple(records), config.z, config.tol, config.budget, config.seed
    )


def _build_adversaries(problem, adv: AdversaryConfig):
    k = problem.control_dim
    B = problem.control_bound
    policies = []
    if adv.include_corners:
        corners = np.array(np.meshgrid(*[[-B, B]] * k)).T.reshape(-1, k)
        for c in np.unique(corners, axis=0):
            policies.append((f"corner {c.tolist()}", constant_policy(c)))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((adv.seed, 0xAD5))))
    for j in range(adv.n_random):
        bps = np.sort(rng.uniform(0.0, problem.horizon, adv.n_pieces))
        bps[0] = 0.0
        vals = rng.uniform(-B, B, (adv.n_pieces, k))
        policies.append((f"random-staircase-{j}", piecewise_constant_policy(bps, vals)))
    for j, pol in enumerate(adv.extra_policies):
        policies.append((f"extra-{j} ({pol.tag})", pol))
    return policies


def certify_supersolution(
    candidate: CandidateFunction,
    problem,
    config: CertifyConfig,
    adversaries: AdversaryConfig | None = None,
) -> CertificationReport:
    """Supermartingale battery against every adversary in the declared class."""
    if candidate.kind != "super":
        raise ValueError("certify_supersolution needs a super candidate")
    if adversaries is None:
        adversaries = AdversaryConfig()
    records = []
    policies = _build_adversaries(problem, adversaries)
    for tag, pol in policies:
        records.extend(
            _martingale_records(candidate, problem, config, lambda tau, xi, _p=pol: _p, tag, -1)
        )
    records.append(_terminal_record(candidate, problem, config, -1))
    records.append(_growth_record(candidate, problem, config))
    cls = ", ".join(tag for tag, _ in policies)
    return CertificationReport(
        candidate.name, "super", tuple(records), config.z, config.tol, config.budget,
        config.seed, adversary_class=cls,
    )


def lattice_max(w1: CandidateFunction, w2: CandidateFunction) -> CandidateFunction:
    """Pointwise max of two sub candidates with the switching companion policy.

    At a test start (tau, xi) the policy of the larger branch is selected and
    followed to the end rule; the bounds combine as maxima.
    """
    if w1.kind != "sub" or w2.kind != "sub":
        raise ValueError("lattice_max needs two sub candidates")

    def evaluator(t, X):
        return np.maximum(w1.evaluator(t, X), w2.evaluator(t, X))

    def policy_factory(tau, xi):
        if w1(tau, xi) >= w2(tau, xi):
            return w1.policy_factory(tau, xi)
        return w2.policy_factory(tau, xi)

    return CandidateFunction(
        evaluator=evaluator,
        kind="sub",
        growth_constant=max(w1.growth_constant, w2.growth_constant),
        policy_factory=policy_factory,
        policy_bound=max(w1.policy_bound, w2.policy_bound),
        name=f"max({w1.name}, {w2.name})",
    )


def lattice_min(w1: CandidateFunction, w2: CandidateFunction) -> CandidateFunction:
    """Pointwise min of two super candidates (no policy needed)."""
    if w1.kind != "super" or w2.kind != "super":
        raise ValueError("lattice_min needs two super candidates")

    def evaluator(t, X):
        return np.minimum(w1.evaluator(t, X), w2.evaluator(t, X))

    return CandidateFunction(
        evaluator=evaluator,
        kind="super",
        growth_constant=max(w1.growth_constant, w2.growth_constant),
        name=f"min({w1.name}, {w2.name})",
    )


@dataclass(frozen=True)
class BracketConfig:
    n_paths: int = 20_000
    n_steps: int = 64
    seed: int = 0
    tol: float = 1e-9
    extra_policies: tuple = ()
    simulation_box: Box | None = None


@dataclass(frozen=True)
class BracketPoint:
    t: float
    x: tuple
    sub_value: float
    super_value: float
    mc: ValueEstimate
    sub_below_mc: bool
    mc_below_super: bool
    ordered: bool
    gap: float

    @property
    def ok(self) -> bool:
        return self.sub_below_mc and self.mc_below_super and self.ordered


@dataclass(frozen=True)
class BracketReport:
    points: tuple
    sub_name: str
    super_name: str

    @property
    def ok(self) -> bool:
        return all(p.ok for p in self.points)

    @property
    def max_gap(self) -> float:
        return max(p.gap for p in self.points)


def bracket_report(
    sub: CandidateFunction,
    super_: CandidateFunction,
    problem,
    points,
    sim_config: BracketConfig,
    sub_report: CertificationReport,
    super_report: CertificationReport,
) -> BracketReport:
    """Sandwich check sub <= MC value estimate <= super at the given points.

    Both inputs must arrive with passing certification reports; the MC value
    is the best estimate over the sub candidate's companion policy and any
    extra policies supplied (e.g. a solver-extracted rule).
    """
    if not sub_report.certified:
        raise ValueError("sub candidate is not certified")
    if not super_report.certified:
        raise ValueError("super candidate is not certified")
    out = []
    for j, (t, x) in enumerate(points):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        policies = [sub.policy_factory(t, x)] + list(sim_config.extra_policies)
        best = None
        for pol in policies:
            ens = simulate_paths(
                problem, pol, t, x, sim_config.n_paths, sim_config.n_steps,
                (sim_config.seed, j), sim_config.simulation_box,
            )
            est = estimate_value(ens, problem.payoff)
            if best is None or est.mean > best.mean:
                best = est
        sv, pv = sub(t, x), super_(t, x)
        out.append(
            BracketPoint(
                t=t,
                x=tuple(x),
                sub_value=sv,
                super_value=pv,
                mc=best,
                sub_below_mc=sv <= best.mean + best.half_width_95 + sim_config.tol,
                mc_below_super=best.mean <= pv + best.half_width_95 + sim_config.tol,
                ordered=sv <= pv + sim_config.tol,
                gap=pv - sv,
            )
        )
    return BracketReport(tuple(out), sub.name, super_.name)


# ---------------------------------------------------------------------------
# Candidate constructors
# ---------------------------------------------------------------------------

def merton_candidate(
    kind: str,
    mu: float = 0.1,
    sigma: float = 0.2,
    p: float = 0.5,
    horizon: float = 1.0,
    bound: float = 10.0,
    exponent_shift: float = 0.0,
) -> CandidateFunction:
    """x^p exp((Lambda_B + shift)(T - t)) with the clamped argmax companion policy."""
    lam = merton_lambda(mu, sigma, p, bound) + exponent_shift
    u_star = merton_optimal_control(mu, sigma, p, bound)

    def evaluator(t, X):
        return np.maximum(X[:, 0], 0.0) ** p * np.exp(lam * (horizon - t))

    policy = constant_policy([u_star])
    shift_tag = f"{exponent_shift:+g}" if exponent_shift else ""
    return CandidateFunction(
        evaluator=evaluator,
        kind=kind,
        growth_constant=float(np.exp(max(lam * horizon, 0.0))),
        policy_factory=(lambda tau, xi: policy) if kind == "sub" else None,
        policy_bound=abs(u_star),
        name=f"merton{shift_tag}",
    )


def constant_candidate(
    c: float, kind: str, growth_constant: float, policy: FeedbackPolicy | None = None
) -> CandidateFunction:
    if kind == "sub" and policy is None:
        policy = constant_policy([0.0])

    def evaluator(t, X):
        return np.full(X.shape[0], float(c))

    return CandidateFunction(
        evaluator=evaluator,
        kind=kind,
        growth_constant=growth_constant,
        policy_factory=(lambda tau, xi: policy) if kind == "sub" else None,
        policy_bound=policy.bound if policy is not None else 0.0,
        name=f"constant({c:g})",
    )


def candidate_from_solution(solution, kind: str, growth_constant: float) -> CandidateFunction:
    """Interpolated solver value with the extracted argmax rule as companion."""
    from .solver import extract_policy

    times, values, grid = solution.times, solution.values, solution.grid

    def evaluator(t, X):
        n = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1))
        if grid.dim == 1:
            return np.interp(X[:, 0], grid.axes[0], values[n])
        gf = solution.slice_at(n)
        return np.array([gf.interpolate(pt) for pt in X])

    policy = extract_policy(solution)
    return CandidateFunction(
        evaluator=evaluator,
        kind=kind,
        growth_constant=growth_constant,
        policy_factory=(lambda tau, xi: policy) if kind == "sub" else None,
        policy_bound=policy.bound,
        name=f"from-solution({kind})",
    )
