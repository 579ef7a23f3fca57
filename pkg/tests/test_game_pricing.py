import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cmmv.equilibrium import solve_fixed_point
from cmmv.game_pricing import (HistoricalLaw, PriceTree, PricingError, SampleSet, SingularNodeError,
                               StrategyTransfer, epsilon_nash_bruteforce, histories, history_prices,
                               martingale_check, payoff_g1, payoff_g2, price_tree_from_psi, reconstruct_x,
                               strategy_from_x, unique_equivalent_measure, x_from_psi)
from cmmv.measures import UniformMeasure, binomial_step_law
from cmmv.risk import linear_risk, softplus_risk
from cmmv.transport import TransportPotential, gamma_potential, psi_potential

MU = UniformMeasure()
H_REF = softplus_risk()
H_NEUTRAL = linear_risk(1.0)


def neutral_psi(n):
    lam = binomial_step_law(n)
    return psi_potential(MU, lam, lam)


@st.composite
def unit_slope_potentials(draw):
    k = draw(st.integers(1, 6))
    bp = np.linspace(-2.5, 2.5, k) + np.asarray(draw(st.lists(st.floats(-0.2, 0.2), min_size=k, max_size=k)))
    slopes = np.sort(np.asarray(draw(st.lists(st.floats(0, 1), min_size=k + 1, max_size=k + 1))))
    return TransportPotential(np.sort(bp), slopes, draw(st.floats(-1, 1)))


def centred(psi, n):
    """Shift a potential so that its transfer has zero mean over fair histories."""
    lam = binomial_step_law(n)
    return psi.shifted(-math.fsum(lam.weights * psi(lam.support)))


class TestTransfers:
    def test_n1_neutral(self):
        x = x_from_psi(neutral_psi(1), 1)
        # index 0 is the history (-1), index 1 is (+1)
        assert np.allclose(x.values, [-0.5, 0.5], atol=1e-15)

    def test_zero_potential(self):
        x = x_from_psi(TransportPotential([], [0.0]), 3)
        assert np.array_equal(x.values, np.zeros(8))

    def test_n2_neutral(self):
        lam = binomial_step_law(2)
        x = x_from_psi(neutral_psi(2), 2)
        s = histories(2).sum(axis=1) / math.sqrt(2)
        expected = gamma_potential(MU, lam)(s) - math.sqrt(2) / 8
        assert np.allclose(x.values, expected, atol=1e-15)
        assert abs(x.mean) < 1e-15

    def test_history_enumeration_order(self):
        h = histories(3)
        assert h.shape == (8, 3) and list(h[0]) == [-1, -1, -1] and list(h[1]) == [-1, -1, 1]
        with pytest.raises(PricingError):
            histories(21)


class TestPriceTrees:
    def test_n1_price(self):
        tree = strategy_from_x(x_from_psi(neutral_psi(1), 1))
        assert tree.levels[0][0] == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("route", ["transfer", "chi"])
    def test_n2_table(self, route):
        psi = neutral_psi(2)
        tree = strategy_from_x(x_from_psi(psi, 2)) if route == "transfer" else price_tree_from_psi(psi, 2)
        assert tree.levels[0][0] == pytest.approx(0.5, abs=1e-12)
        assert np.allclose(tree.levels[1], [0.25, 0.75], atol=1e-12)

    def test_zero_transfer(self):
        tree = strategy_from_x(StrategyTransfer(3, np.zeros(8)))
        assert all(np.all(lv == 0.0) for lv in tree.levels)

    def test_uncentred_rejected(self):
        with pytest.raises(PricingError):
            strategy_from_x(StrategyTransfer(2, np.ones(4)))

    def test_path_dependent_rejected(self):
        # X = u_1 u_3 is centred; its third price u_1 differs on the two histories with S_2 = 0
        h = histories(3)
        with pytest.raises(PricingError):
            strategy_from_x(StrategyTransfer(3, (h[:, 0] * h[:, 2]).astype(float)))

    @settings(max_examples=40, deadline=None)
    @given(unit_slope_potentials(), st.integers(1, 10))
    def test_two_routes_agree(self, psi, n):
        psi = centred(psi, n)
        x = x_from_psi(psi, n)
        a, b = strategy_from_x(x), price_tree_from_psi(psi, n)
        for la, lb in zip(a.levels, b.levels):
            assert np.max(np.abs(la - lb)) < 1e-12
        back = reconstruct_x(history_prices(x), n)
        assert np.max(np.abs(back.values - x.values)) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(unit_slope_potentials(), st.integers(1, 12))
    def test_martingale_and_range(self, psi, n):
        tree = price_tree_from_psi(psi, n)
        assert martingale_check(tree) <= 1e-12
        assert all(np.all((lv >= -1e-15) & (lv <= 1 + 1e-15)) for lv in tree.levels)

    def test_csv_export(self):
        text = price_tree_from_psi(neutral_psi(2), 2).to_csv().splitlines()
        assert text[0] == "q,s,price" and len(text) == 4


class TestMartingale:
    def test_neutral_n2(self):
        assert martingale_check(price_tree_from_psi(neutral_psi(2), 2)) == 0.0

    def test_constant_tree(self):
        tree = PriceTree(3, (np.full(1, 0.4), np.full(2, 0.4), np.full(3, 0.4)))
        assert martingale_check(tree) == 0.0

    def test_corrupted_node(self):
        tree = price_tree_from_psi(neutral_psi(4), 4)
        levels = [lv.copy() for lv in tree.levels]
        levels[2][1] += 1e-3
        assert martingale_check(PriceTree(4, tuple(levels))) >= 5e-4

    @pytest.mark.parametrize("n", [3, 6, 9])
    def test_equilibrium_trees(self, ref_solutions, n):
        tree = price_tree_from_psi(ref_solutions(n).psi, n)
        assert martingale_check(tree) <= 1e-12
        assert tree.min_gap() > 0.0


class TestEquivalentMeasure:
    def test_neutral_n2(self):
        q = unique_equivalent_measure(price_tree_from_psi(neutral_psi(2), 2))
        assert len(q) == 1 and q[0][0] == pytest.approx(0.5, abs=1e-15)

    def test_spread_doubled(self):
        tree = PriceTree(2, (np.array([0.5]), np.array([0.25, 1.25])))
        assert unique_equivalent_measure(tree)[0][0] == pytest.approx(0.25, abs=1e-15)

    def test_monotonicity_violation(self):
        tree = PriceTree(2, (np.array([0.5]), np.array([0.75, 0.25])))
        with pytest.raises(SingularNodeError):
            unique_equivalent_measure(tree)

    def test_equilibrium_is_fair(self, ref_solutions):
        for n in (2, 5, 8):
            q = unique_equivalent_measure(price_tree_from_psi(ref_solutions(n).psi, n))
            assert max(np.max(np.abs(lv - 0.5)) for lv in q) < 1e-10


class TestPayoffs:
    def test_single_sample(self):
        tree = PriceTree(1, (np.array([0.5]),))
        assert payoff_g1(SampleSet(np.array([[1]]), np.array([0.8])), tree) == pytest.approx(0.3, abs=1e-15)

    def test_types_at_price(self):
        tree = PriceTree(2, (np.full(1, 0.4), np.full(2, 0.4)))
        assert payoff_g1(SampleSet(histories(2), np.full(4, 0.4)), tree) == pytest.approx(0.0, abs=1e-15)

    def test_sample_set_transfer_route(self):
        tree = price_tree_from_psi(neutral_psi(3), 3)
        rng = np.random.default_rng(1)
        samples = SampleSet(histories(3)[rng.integers(0, 8, 50)], rng.random(50))
        assert payoff_g1(samples, tree) == pytest.approx(payoff_g1(samples, tree.transfer()), abs=1e-14)

    def test_neutral_n1_gain(self):
        sol = solve_fixed_point(MU, 1, H_NEUTRAL)
        law = HistoricalLaw.from_solution(sol)
        assert payoff_g1(law, price_tree_from_psi(sol.psi, 1)) == pytest.approx(0.25, abs=1e-14)

    def test_identity_risk_equals_gain(self, ref_solutions):
        sol = ref_solutions(3)
        law = HistoricalLaw.from_solution(sol)
        tree = price_tree_from_psi(sol.psi, 3)
        assert payoff_g2(law, tree, H_NEUTRAL) == pytest.approx(payoff_g1(law, tree), abs=1e-14)

    def test_reference_n1(self, ref_solutions):
        sol = ref_solutions(1)
        oracle = integrate.quad(lambda l: float(H_REF.h(abs(l - 0.5))), 0.0, 1.0, points=[0.5], epsabs=1e-14)[0]
        assert payoff_g2(HistoricalLaw.from_solution(sol), price_tree_from_psi(sol.psi, 1), H_REF) == \
            pytest.approx(oracle, abs=1e-12)

    def test_first_order_condition(self, ref_solutions):
        sol = ref_solutions(3)
        law = HistoricalLaw.from_weights(sol)
        x = price_tree_from_psi(sol.psi, 3).transfer()
        base = payoff_g2(law, x, H_REF)
        rng = np.random.default_rng(7)
        for _ in range(5):
            d = rng.standard_normal(8)
            delta = StrategyTransfer(3, d - d.mean())
            for sign in (1.0, -1.0):
                assert payoff_g2(law, x + delta.scaled(sign * 1e-4), H_REF) > base


class TestHistoricalLaw:
    @pytest.mark.parametrize("n", [2, 6, 10])
    def test_marginal_matches_nu(self, ref_solutions, n):
        sol = ref_solutions(n)
        law = HistoricalLaw.from_solution(sol)
        assert np.max(np.abs(law.atom_weights - sol.nu.weights)) < 1e-12
        ups = (histories(n) > 0).sum(axis=1)
        per_atom = np.bincount(ups, weights=law.omega_weights, minlength=n + 1)
        assert np.max(np.abs(per_atom - sol.nu.weights)) < 1e-12
        assert math.fsum(law.omega_weights) == pytest.approx(1.0, abs=1e-14)

    def test_segment_means_uniform(self, ref_solutions):
        law = HistoricalLaw.from_solution(ref_solutions(4))
        assert np.allclose(law.segment_means(), 0.5 * (law.cuts[1:] + law.cuts[:-1]), atol=1e-14)

    def test_json(self, ref_solutions):
        out = HistoricalLaw.from_solution(ref_solutions(2)).to_json()
        assert out["n"] == 2 and len(out["atoms"]) == 3


class TestNash:
    def test_neutral_n1(self):
        sol = solve_fixed_point(MU, 1, H_NEUTRAL)
        e1, e2 = epsilon_nash_bruteforce(sol, H_NEUTRAL)
        assert e1 < 1e-12 and e2 < 1e-12

    def test_reference_n2(self, ref_solutions):
        e1, e2 = epsilon_nash_bruteforce(ref_solutions(2), H_REF)
        assert e1 < 1e-7 and e2 < 1e-7

    def test_slack_grows_with_perturbation(self, ref_solutions):
        sol = ref_solutions(2)
        x = price_tree_from_psi(sol.psi, 2).transfer()
        d = np.array([1.0, -2.0, 0.5, 0.5])
        delta = StrategyTransfer(2, d - d.mean())
        e_small = epsilon_nash_bruteforce(sol, H_REF, x=x + delta.scaled(1e-2))[1]
        e_large = epsilon_nash_bruteforce(sol, H_REF, x=x + delta.scaled(2e-2))[1]
        assert e_small > 1e-4
        assert e_large / e_small == pytest.approx(2.0, rel=0.05)

    def test_large_n_rejected(self, ref_solutions):
        with pytest.raises(PricingError):
            epsilon_nash_bruteforce(ref_solutions(5), H_REF)
