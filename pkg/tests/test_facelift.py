from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hjbkit as hk
from hjbkit.errors import ConvergenceError, GridMismatchError
from hjbkit.facelift import exact_concavity_repair
from hjbkit.problem import positive_constraint


def brute_force_upper_hull(x, v):
    """Independent oracle: per-node max over every bracketing chord.

    Chords are evaluated in exact rational arithmetic and rounded once, then
    pushed through the same float canonicalization the library applies.
    """
    n = len(x)
    xf = [Fraction(float(t)) for t in x]
    vf = [Fraction(float(t)) for t in v]
    out = np.empty(n)
    for k in range(n):
        best = vf[k]
        for i in range(k + 1):
            for j in range(k, n):
                if i == j:
                    continue
                c = vf[i] + (vf[j] - vf[i]) * (xf[k] - xf[i]) / (xf[j] - xf[i])
                if c > best:
                    best = c
        out[k] = float(best)
    return exact_concavity_repair(x, out)


def gf(x, v):
    return hk.GridFunction(hk.SpatialGrid((np.asarray(x, float),)), np.asarray(v, float))


@pytest.fixture(scope="module")
def neg_second_problem():
    return hk.proportional_control_problem(mu=1.0, sigma=1.0, bound=1.0)


class TestConcaveEnvelope:
    def test_concave_payoff_unchanged(self):
        x = np.linspace(0.25, 4.0, 60)
        g = gf(x, np.sqrt(x))
        env = hk.concave_envelope(g)
        assert np.max(np.abs(env.values - g.values)) < 1e-12

    def test_kink_payoff_gives_chord(self):
        x = np.linspace(0.0, 2.0, 81)
        env = hk.concave_envelope(gf(x, np.abs(x - 1.0)))
        assert np.array_equal(env.values, np.ones_like(x))

    def test_spike_gives_tent(self):
        x = np.linspace(0.0, 2.0, 101)
        v = np.zeros_like(x)
        j = 37
        v[j] = 1.0
        env = hk.concave_envelope(gf(x, v))
        tent = np.minimum(x / x[j], (2.0 - x) / (2.0 - x[j]))
        assert np.max(np.abs(env.values - tent)) < 1e-12

    def test_matches_brute_force_hull_exactly(self):
        rng = np.random.default_rng(99)
        for _ in range(15):
            n = int(rng.integers(5, 45))
            x = np.sort(rng.uniform(-2, 2, n))
            v = rng.normal(size=n)
            env = hk.concave_envelope(gf(x, v))
            assert np.array_equal(env.values, brute_force_upper_hull(x, v))

    def test_two_d_rejected(self):
        grid = hk.uniform_grid([0, 0], [1, 1], [4, 4])
        g = hk.GridFunction(grid, np.zeros((4, 4)))
        with pytest.raises(ValueError, match="facelift_general"):
            hk.concave_envelope(g)


class TestEnvelopeProperties:
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=3, max_size=25))
    @settings(max_examples=60, deadline=None)
    def test_idempotent_exactly(self, vals):
        x = np.arange(len(vals), dtype=float)
        e1 = hk.concave_envelope(gf(x, vals))
        e2 = hk.concave_envelope(e1)
        assert np.array_equal(e1.values, e2.values)

    @given(
        st.lists(st.floats(min_value=-20, max_value=20), min_size=3, max_size=20),
        st.lists(st.floats(min_value=0, max_value=5), min_size=3, max_size=20),
    )
    @settings(max_examples=60, deadline=None)
    def test_dominance_and_monotonicity(self, vals, bumps):
        n = min(len(vals), len(bumps))
        x = np.arange(n, dtype=float)
        v1 = np.asarray(vals[:n])
        v2 = v1 + np.asarray(bumps[:n])
        e1 = hk.concave_envelope(gf(x, v1))
        e2 = hk.concave_envelope(gf(x, v2))
        assert np.all(e1.values >= v1)
        assert np.all(e2.values >= v2)
        assert np.all(e1.values <= e2.values)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(8)
        x = np.sort(rng.uniform(0, 3, 30))
        v = rng.normal(size=30)
        for c in (-2.0, 0.5, 10.0):
            e = hk.concave_envelope(gf(x, v))
            ec = hk.concave_envelope(gf(x, v + c))
            assert np.max(np.abs(ec.values - (e.values + c))) < 1e-12

    def test_second_differences_nonpositive(self):
        rng = np.random.default_rng(21)
        x = np.sort(rng.uniform(-1, 1, 40))
        v = rng.normal(size=40)
        e = hk.concave_envelope(gf(x, v)).values
        hm = x[1:-1] - x[:-2]
        hp = x[2:] - x[1:-1]
        # exact rational test of the discrete concavity the repair guarantees
        for k in range(1, 39):
            lhs = Fraction(float(e[k + 1])) * Fraction(float(hm[k - 1])) + Fraction(
                float(e[k - 1])
            ) * Fraction(float(hp[k - 1]))
            rhs = Fraction(float(e[k])) * (Fraction(float(hm[k - 1])) + Fraction(float(hp[k - 1])))
            assert lhs <= rhs


class TestFaceliftGeneral:
    def test_positive_constraint_returns_payoff(self):
        x = np.linspace(0.0, 2.0, 41)
        g = gf(x, np.abs(x - 1.0))
        prob = hk.proportional_control_problem(constraint=positive_constraint(1.0))
        out = hk.facelift_general(g, prob, tol=1e-10)
        assert np.max(np.abs(out.values - g.values)) == 0.0

    def test_matches_concave_envelope_on_kink(self, neg_second_problem):
        x = np.linspace(0.0, 2.0, 61)
        g = gf(x, np.abs(x - 1.0))
        out = hk.facelift_general(g, neg_second_problem, tol=1e-8)
        env = hk.concave_envelope(g)
        assert np.max(np.abs(out.values - env.values)) < 1e-7

    def test_supersolution_payoff_fixed(self, neg_second_problem):
        x = np.linspace(0.25, 2.0, 41)
        g = gf(x, np.sqrt(x))
        out = hk.facelift_general(g, neg_second_problem, tol=1e-9)
        assert np.max(np.abs(out.values - g.values)) < 1e-9

    def test_monotone_and_dominant(self, neg_second_problem):
        rng = np.random.default_rng(4)
        x = np.linspace(0.0, 1.0, 31)
        v1 = rng.normal(size=31)
        v2 = v1 + rng.uniform(0, 1, 31)
        f1 = hk.facelift_general(gf(x, v1), neg_second_problem, tol=1e-9)
        f2 = hk.facelift_general(gf(x, v2), neg_second_problem, tol=1e-9)
        assert np.all(f1.values >= v1 - 1e-12)
        assert np.all(f2.values >= v2 - 1e-12)
        assert np.all(f1.values <= f2.values + 1e-8)

    def test_no_convergence_carries_iterate(self, neg_second_problem):
        x = np.linspace(0.0, 2.0, 61)
        g = gf(x, np.abs(x - 1.0))
        with pytest.raises(ConvergenceError) as exc:
            hk.facelift_general(g, neg_second_problem, tol=1e-12, max_iters=5)
        assert exc.value.last_iterate is not None
        assert exc.value.residual is not None

    def test_two_d_positive_constraint(self):
        grid = hk.uniform_grid([0, 0], [1, 1], [9, 9])
        vals = np.random.default_rng(2).normal(size=(9, 9))
        prob = hk.heat_problem(dim=2)
        out = hk.facelift_general(hk.GridFunction(grid, vals), prob, tol=1e-10)
        assert np.array_equal(out.values, vals)

    def test_three_d_rejected(self, neg_second_problem):
        grid = hk.uniform_grid([0, 0, 0], [1, 1, 1], [3, 3, 3])
        g = hk.GridFunction(grid, np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            hk.facelift_general(g, neg_second_problem)


class TestVerifyFacelift:
    def test_envelope_passes_all_checks(self, neg_second_problem):
        x = np.linspace(0.0, 2.0, 41)
        g = gf(x, np.abs(x - 1.0))
        env = hk.concave_envelope(g)
        rep = hk.verify_facelift(env, g, neg_second_problem, tol=1e-8)
        assert rep.ok

    def test_concave_payoff_is_its_own_facelift(self, neg_second_problem):
        x = np.linspace(0.25, 4.0, 41)
        g = gf(x, np.sqrt(x))
        rep = hk.verify_facelift(g, g, neg_second_problem, tol=1e-8)
        assert rep.ok

    def test_shifted_majorant_flagged_nonminimal(self, neg_second_problem):
        x = np.linspace(0.25, 4.0, 41)
        g = gf(x, np.sqrt(x))
        shifted = g.with_values(g.values + 1.0)
        rep = hk.verify_facelift(shifted, g, neg_second_problem, tol=1e-8)
        assert not rep.minimal
        assert rep.n_nonminimal_nodes > 0
        assert not rep.ok

    def test_grid_mismatch_rejected(self, neg_second_problem):
        g1 = gf(np.linspace(0, 1, 11), np.zeros(11))
        g2 = gf(np.linspace(0, 2, 11), np.zeros(11))
        with pytest.raises(GridMismatchError):
            hk.verify_facelift(g1, g2, neg_second_problem)
