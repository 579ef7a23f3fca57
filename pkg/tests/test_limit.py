import math

import numpy as np
import pytest
from scipy import integrate, special

from cmmv.limit import (CmmvSurface, FunctionSurface, GridConfig, LimitFileError, OdeConfig, OdeSolution,
                        ShootingError, closed_form_surface, cmmv_surface, continuous_fixed_point,
                        discretized_normal, heat_equation_residual, histogram_measure, nu_from_psi,
                        solve_ode_D)
from cmmv.measures import wasserstein2

S_PROBE = np.linspace(-6.0, 6.0, 2001)


def normal_antiderivative(s):
    """Antiderivative of the normal CDF with zero Gaussian mean."""
    return s * special.ndtr(s) + np.exp(-0.5 * s * s) / math.sqrt(2 * math.pi) - 1.0 / math.sqrt(math.pi)


class TestClosedForm:
    def test_constant(self, neutral_ode):
        assert neutral_ode.c == pytest.approx(1.0, abs=1e-6)

    def test_slope_is_normal_cdf(self, neutral_ode):
        assert np.max(np.abs(neutral_ode.slope(S_PROBE) - special.ndtr(S_PROBE))) < 1e-6

    def test_potential_normalized(self, neutral_ode):
        oracle = integrate.quad(lambda s: float(normal_antiderivative(s)) * math.exp(-0.5 * s * s)
                                / math.sqrt(2 * math.pi), -np.inf, np.inf)[0]
        assert abs(oracle) < 1e-12
        assert np.max(np.abs(neutral_ode.potential(S_PROBE) - normal_antiderivative(S_PROBE))) < 1e-6

    def test_law_is_normal(self, mu, neutral_ode):
        nu = nu_from_psi(mu, neutral_ode)
        assert np.max(np.abs(nu.cdf(S_PROBE) - special.ndtr(S_PROBE))) < 1e-6

    def test_surface(self, neutral_ode):
        surf = cmmv_surface(neutral_ode)
        xs = np.linspace(-4, 4, 81)
        for t in (0.0, 0.3, 0.7, 1.0):
            assert np.max(np.abs(surf.f(xs, np.full_like(xs, t)) - closed_form_surface(xs, t))) < 1e-8

    def test_heat_residual(self, neutral_ode):
        assert heat_equation_residual(cmmv_surface(neutral_ode)) < 1e-6


class TestHeatResidual:
    def test_linear_surface(self):
        assert heat_equation_residual(FunctionSurface(lambda x, t: x)) < 1e-9

    def test_square_fails(self):
        assert heat_equation_residual(FunctionSurface(lambda x, t: x * x)) == pytest.approx(1.0, abs=1e-6)

    def test_closed_form_surface(self):
        assert heat_equation_residual(FunctionSurface(closed_form_surface)) < 1e-6


class TestReferenceOde:
    def test_invariants(self, ref_ode):
        dp = ref_ode.psi_prime
        assert ref_ode.c > 0.0
        assert np.all(np.diff(dp) >= -1e-14) and dp.min() >= 0.0 and dp.max() <= 1.0
        assert dp[0] <= 1e-6 and 1.0 - dp[-1] <= 1e-6
        assert abs(ref_ode.diagnostics["normalization_gauss_hermite"]) < 1e-8
        assert max(abs(ref_ode.diagnostics["boundary_residual"]),
                   abs(ref_ode.diagnostics["normalization_residual"])) < 1e-8

    def test_satisfies_equation(self, mu, h_ref, ref_ode):
        s = np.linspace(-4, 4, 33)
        p, dp, _ = ref_ode.evaluate(s)
        # second derivative by differences of the integrated slope, not the stored formula
        h = 1e-4
        ddp = (ref_ode.slope(s + h) - ref_ode.slope(s - h)) / (2 * h)
        lhs = mu.pdf(dp) * ddp * h_ref.h_prime(s * dp - p)
        rhs = ref_ode.c * np.exp(-0.5 * s * s) / math.sqrt(2 * math.pi)
        assert np.max(np.abs(lhs - rhs)) < 1e-7

    @pytest.mark.parametrize("c0", [0.5, 2.0])
    def test_restarts_agree(self, mu, h_ref, ref_ode, c0):
        other = solve_ode_D(mu, h_ref, OdeConfig(c_init=c0))
        assert abs(other.c - ref_ode.c) < 1e-6
        assert np.max(np.abs(other.psi - ref_ode.psi)) < 1e-6

    def test_normalization_of_law(self, mu, ref_ode):
        nu = nu_from_psi(mu, ref_ode)
        total = integrate.quad(lambda s: float(nu.pdf(s)), -6, 6, limit=200, epsabs=1e-13)[0]
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_csv_round_trip(self, ref_ode):
        back = OdeSolution.from_csv(ref_ode.to_csv(), ref_ode.c)
        s = np.linspace(-5.9, 5.9, 101)
        assert np.array_equal(back.s_grid, ref_ode.s_grid)
        assert np.max(np.abs(back.slope(s) - ref_ode.slope(s))) < 1e-8

    @pytest.mark.parametrize("mangle", [
        lambda t: t.replace("psi_prime", "slope", 1),
        lambda t: "\n".join(t.splitlines()[:3]),
        lambda t: t.replace(t.splitlines()[5].split(",")[2], "nan", 1),
        lambda t: t.replace(t.splitlines()[-1].split(",")[2], "1.5", 1),
        lambda t: "garbage",
    ])
    def test_corrupted_file(self, ref_ode, mangle):
        with pytest.raises(LimitFileError):
            OdeSolution.from_csv(mangle(ref_ode.to_csv()), ref_ode.c)

    def test_shooting_failure_has_trace(self, mu, h_ref):
        with pytest.raises(ShootingError) as info:
            solve_ode_D(mu, h_ref, OdeConfig(max_iter=1, tol=1e-30))
        assert len(info.value.trace) >= 1


class TestGridFixedPoint:
    def test_neutral_is_identity(self, mu, h_neutral):
        cfg = GridConfig(points=2001)
        sol = continuous_fixed_point(mu, h_neutral, cfg)
        assert np.max(np.abs(sol.nu.weights - discretized_normal(cfg).weights)) < 1e-15

    def test_discretized_normal(self):
        law = discretized_normal(GridConfig(points=1201))
        assert math.fsum(law.weights) == pytest.approx(1.0, abs=1e-15)
        assert abs(law.mean()) < 1e-15

    def test_dual_method(self, mu, ref_ode, ref_grid):
        assert wasserstein2(ref_grid.nu, nu_from_psi(mu, ref_ode)) < 1e-4

    def test_constant_is_inverse_alpha(self, ref_ode, ref_grid):
        assert abs(ref_ode.c - 1.0 / ref_grid.alpha) < 1e-4

    def test_mean_agreement(self, mu, ref_ode, ref_grid):
        nu = nu_from_psi(mu, ref_ode)
        mean = integrate.quad(lambda s: s * float(nu.pdf(s)), -6, 6, limit=200, epsabs=1e-13)[0]
        assert abs(mean - ref_grid.nu.mean()) < 1e-6

    @pytest.mark.slow
    def test_refinement(self, mu, h_ref, ref_grid):
        coarse = continuous_fixed_point(mu, h_ref, GridConfig(points=(ref_grid.nu.size - 1) // 2 + 1))
        assert wasserstein2(histogram_measure(coarse.nu), histogram_measure(ref_grid.nu)) < 1e-5


class TestSurface:
    def test_restriction_at_one(self, ref_ode):
        surf = cmmv_surface(ref_ode)
        xs = np.linspace(-5, 5, 41)
        assert np.max(np.abs(surf.f(xs, np.ones_like(xs)) - ref_ode.slope(xs))) < 1e-15

    def test_time_zero_quadrature(self, ref_ode):
        surf = cmmv_surface(ref_ode)
        for x in (-1.3, 0.0, 0.4, 2.2):
            oracle = integrate.quad(lambda z: float(ref_ode.slope(x + z)) * math.exp(-0.5 * z * z)
                                    / math.sqrt(2 * math.pi), -12, 12, limit=200)[0]
            assert surf.f(x, 0.0) == pytest.approx(oracle, abs=1e-9)

    def test_increasing_and_derivative(self, ref_ode):
        surf = cmmv_surface(ref_ode)
        xs = np.linspace(-4, 4, 161)
        for t in (0.0, 0.5, 0.9):
            ts = np.full_like(xs, t)
            assert np.all(np.diff(surf.f(xs, ts)) > 0)
            fd = (surf.f(xs + 1e-5, ts) - surf.f(xs - 1e-5, ts)) / 2e-5
            assert np.max(np.abs(fd - surf.f_x(xs, ts))) < 1e-7

    def test_heat_residual(self, ref_ode):
        assert heat_equation_residual(cmmv_surface(ref_ode)) < 1e-4

    def test_martingale_by_simulation(self, ref_ode):
        surf = cmmv_surface(ref_ode)
        rng = np.random.default_rng(2024)
        ts = np.linspace(0.0, 1.0, 11)
        incr = rng.standard_normal((20000, 10)) * math.sqrt(0.1)
        b = np.concatenate([np.zeros((20000, 1)), np.cumsum(incr, axis=1)], axis=1)
        z = surf.f(b, np.broadcast_to(ts, b.shape))
        for k in range(1, 11):
            d = z[:, k] - z[:, 0]
            assert abs(d.mean()) <= 3.0 * d.std(ddof=1) / math.sqrt(d.size)

    def test_requires_slope(self):
        with pytest.raises(ValueError):
            CmmvSurface()

    def test_csv(self, neutral_ode):
        rows = cmmv_surface(neutral_ode).to_csv([0.0, 1.0], [0.0, 1.0]).splitlines()
        assert rows[0] == "x,t,f" and len(rows) == 5
        assert float(rows[1].split(",")[2]) == pytest.approx(0.5, abs=1e-8)
