import math

import numpy as np
import pytest

import hjbkit as hk
from hjbkit.certify import (
    AdversaryConfig,
    BracketConfig,
    bracket_report,
    constant_candidate,
    lattice_max,
    lattice_min,
    merton_candidate,
)
from hjbkit.simulate import constant_policy


@pytest.fixture(scope="module")
def cert_config():
    return hk.CertifyConfig(start_box=hk.Box([0.5], [2.0]), budget=40_000, seed=31)


@pytest.fixture(scope="module")
def power_config():
    # rejection of the delta = 0.05 perturbations needs the full default budget
    return hk.CertifyConfig(start_box=hk.Box([0.5], [2.0]), budget=100_000, seed=31)


@pytest.fixture(scope="module")
def small_adversaries():
    return AdversaryConfig(include_corners=True, n_random=2, seed=5)


class TestCertifySubsolution:
    def test_constant_below_payoff_certifies(self, merton_problem, cert_config):
        # g = sqrt(x) >= sqrt(0.5) on the start box
        c = math.sqrt(0.5) - 0.01
        cand = constant_candidate(c, "sub", growth_constant=c / 0.5**0.5 + 0.1)
        rep = hk.certify_subsolution(cand, merton_problem, cert_config)
        assert rep.certified
        assert "statistical" in rep.verdict

    def test_exact_merton_certifies(self, merton_problem, cert_config):
        rep = hk.certify_subsolution(merton_candidate("sub"), merton_problem, cert_config)
        assert rep.certified
        # true martingale: every margin is pure noise around zero
        mart = [r for r in rep.records if r.kind == "martingale"]
        assert all(abs(r.margin) <= 6 * max(r.stderr, 1e-12) for r in mart)

    def test_inflated_exponent_rejected(self, merton_problem, power_config):
        cand = merton_candidate("sub", exponent_shift=0.05)
        rep = hk.certify_subsolution(cand, merton_problem, power_config)
        assert not rep.certified
        assert any(r.kind == "martingale" for r in rep.failing())

    def test_constant_above_payoff_fails_terminal_check(self, merton_problem, cert_config):
        cand = constant_candidate(5.0, "sub", growth_constant=10.0)
        rep = hk.certify_subsolution(cand, merton_problem, cert_config)
        assert not rep.certified
        assert any(r.kind == "terminal" for r in rep.failing())

    def test_missing_policy_rejected(self):
        with pytest.raises(ValueError, match="policy"):
            hk.CandidateFunction(
                evaluator=lambda t, X: np.zeros(X.shape[0]), kind="sub", growth_constant=1.0
            )

    def test_wrong_kind_rejected(self, merton_problem, cert_config):
        sup = merton_candidate("super")
        with pytest.raises(ValueError):
            hk.certify_subsolution(sup, merton_problem, cert_config)


class TestCertifySupersolution:
    def test_constant_above_payoff_certifies(self, merton_problem, cert_config, small_adversaries):
        c = math.sqrt(2.0) * math.exp(0.2)
        cand = constant_candidate(c, "super", growth_constant=c / 0.5**0.5 + 0.1)
        rep = hk.certify_supersolution(cand, merton_problem, cert_config, small_adversaries)
        assert rep.certified
        assert "adversary class" in rep.verdict

    def test_exact_merton_certifies_against_all(self, merton_problem, cert_config, small_adversaries):
        rep = hk.certify_supersolution(merton_candidate("super"), merton_problem, cert_config,
                                       small_adversaries)
        assert rep.certified

    def test_deflated_rejected_by_optimal_adversary(self, merton_problem, power_config):
        cand = merton_candidate("super", exponent_shift=-0.05)
        adv = AdversaryConfig(include_corners=True, n_random=0,
                              extra_policies=(constant_policy([5.0]),))
        rep = hk.certify_supersolution(cand, merton_problem, power_config, adv)
        assert not rep.certified
        assert any("extra-0" in r.adversary for r in rep.failing())

    def test_corner_adversaries_alone_miss_deflation(self, merton_problem, cert_config):
        # Lambda(+-10) = 0 < Lambda - delta: the corners cannot expose the gap,
        # which is exactly why the extracted argmax rule is the default adversary
        cand = merton_candidate("super", exponent_shift=-0.05)
        adv = AdversaryConfig(include_corners=True, n_random=0)
        rep = hk.certify_supersolution(cand, merton_problem, cert_config, adv)
        assert rep.certified


class TestLattice:
    def test_max_of_equal_candidates_degenerates(self, merton_problem, cert_config):
        w = merton_candidate("sub")
        m = lattice_max(w, w)
        rep = hk.certify_subsolution(m, merton_problem, cert_config)
        assert rep.certified

    def test_max_of_constants_selects_larger(self, merton_problem, cert_config):
        c1 = constant_candidate(0.2, "sub", growth_constant=1.0)
        c2 = constant_candidate(0.5, "sub", growth_constant=1.0)
        m = lattice_max(c1, c2)
        assert m(0.0, [1.0]) == 0.5
        rep = hk.certify_subsolution(m, merton_problem, cert_config)
        assert rep.certified

    def test_max_merton_vs_low_constant_uses_merton_branch(self, merton_problem, cert_config):
        w1 = merton_candidate("sub")
        w2 = constant_candidate(0.3, "sub", growth_constant=1.0)
        m = lattice_max(w1, w2)
        # the merton branch dominates on the whole start box
        for xi in (0.5, 1.0, 2.0):
            assert m(0.0, [xi]) == w1(0.0, [xi])
        pol = m.policy_factory(0.0, np.array([1.0]))
        assert pol(0.0, [1.0])[0] == pytest.approx(5.0)
        rep = hk.certify_subsolution(m, merton_problem, cert_config)
        assert rep.certified

    def test_min_of_supers(self, merton_problem, cert_config, small_adversaries):
        w1 = merton_candidate("super")
        big = constant_candidate(50.0, "super", growth_constant=100.0)
        m = lattice_min(w1, big)
        for xi in (0.5, 1.0, 2.0):
            assert m(0.0, [xi]) == w1(0.0, [xi])
        rep = hk.certify_supersolution(m, merton_problem, cert_config, small_adversaries)
        assert rep.certified

    def test_kind_mismatch_rejected(self):
        sub = merton_candidate("sub")
        sup = merton_candidate("super")
        with pytest.raises(ValueError):
            lattice_max(sub, sup)
        with pytest.raises(ValueError):
            lattice_min(sup, sub)

    def test_lattice_bounds_combine(self):
        a = constant_candidate(0.1, "sub", growth_constant=2.0, policy=constant_policy([1.0]))
        b = constant_candidate(0.2, "sub", growth_constant=3.0, policy=constant_policy([4.0]))
        m = lattice_max(a, b)
        assert m.growth_constant == 3.0
        assert m.policy_bound == 4.0


class TestBracket:
    def test_zero_gap_at_exact_candidate(self, merton_problem, cert_config, small_adversaries):
        sub = merton_candidate("sub")
        sup = merton_candidate("super")
        sub_rep = hk.certify_subsolution(sub, merton_problem, cert_config)
        sup_rep = hk.certify_supersolution(sup, merton_problem, cert_config, small_adversaries)
        rep = bracket_report(
            sub, sup, merton_problem, [(0.0, [1.0])], BracketConfig(n_paths=40_000, seed=2),
            sub_rep, sup_rep,
        )
        pt = rep.points[0]
        assert pt.gap == 0.0
        assert pt.ok
        assert abs(pt.mc.mean - math.exp(0.125)) <= 2 * pt.mc.half_width_95

    def test_constant_sandwich(self, merton_problem, cert_config, small_adversaries):
        sub = constant_candidate(0.5, "sub", growth_constant=1.0)
        sup = constant_candidate(3.0, "super", growth_constant=5.0)
        sub_rep = hk.certify_subsolution(sub, merton_problem, cert_config)
        sup_rep = hk.certify_supersolution(sup, merton_problem, cert_config, small_adversaries)
        rep = bracket_report(
            sub, sup, merton_problem, [(0.0, [1.0]), (0.5, [1.5])],
            BracketConfig(n_paths=5_000, seed=3), sub_rep, sup_rep,
        )
        assert rep.ok
        assert rep.max_gap == 2.5

    def test_closed_form_gap_matches_analytics(self, merton_problem, cert_config, small_adversaries):
        delta = 0.05
        sub = merton_candidate("sub")
        sup = merton_candidate("super", exponent_shift=delta)
        sub_rep = hk.certify_subsolution(sub, merton_problem, cert_config)
        sup_rep = hk.certify_supersolution(sup, merton_problem, cert_config, small_adversaries)
        pts = [(0.0, [1.0]), (0.25, [0.8]), (0.5, [1.7])]
        rep = bracket_report(sub, sup, merton_problem, pts, BracketConfig(n_paths=4_000, seed=4),
                             sub_rep, sup_rep)
        for (t, x), pt in zip(pts, rep.points):
            lam = 0.125
            analytic = x[0] ** 0.5 * (math.exp((lam + delta) * (1 - t)) - math.exp(lam * (1 - t)))
            assert pt.gap == pytest.approx(analytic, abs=1e-12)

    def test_uncertified_inputs_rejected(self, merton_problem, cert_config, small_adversaries):
        sub = merton_candidate("sub", exponent_shift=0.05)   # will fail
        sup = merton_candidate("super")
        bad_rep = hk.certify_subsolution(sub, merton_problem, cert_config)
        sup_rep = hk.certify_supersolution(sup, merton_problem, cert_config, small_adversaries)
        assert not bad_rep.certified
        with pytest.raises(ValueError, match="not certified"):
            bracket_report(sub, sup, merton_problem, [(0.0, [1.0])], BracketConfig(),
                           bad_rep, sup_rep)


class TestOrderingInvariant:
    def test_certified_sub_below_certified_super(self, merton_problem, cert_config):
        subs = [merton_candidate("sub"), constant_candidate(0.5, "sub", growth_constant=1.0)]
        sups = [merton_candidate("super", exponent_shift=0.02),
                constant_candidate(3.0, "super", growth_constant=5.0)]
        rng = np.random.default_rng(6)
        pts = [(rng.uniform(0, 1), [rng.uniform(0.5, 2.0)]) for _ in range(25)]
        for sub in subs:
            for sup in sups:
                for t, x in pts:
                    assert sub(t, x) <= sup(t, x) + 1e-9
