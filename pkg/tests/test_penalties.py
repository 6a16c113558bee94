"""Penalty functionals: evaluation, subgradients, Bregman distances, prox maps."""

import math

import numpy as np
import pytest
from scipy.optimize import brentq

from irgnm_iv.grids import GridFn, const_fn, inner_product, make_grid
from irgnm_iv.penalties import Penalty, bregman, penalty_eval, prox, subgradient

G = make_grid(64, 0.0, 1.0)
RNG = np.random.default_rng(42)


def _quad(phi0=None):
    return Penalty("quadratic", phi0 if phi0 is not None else const_fn(G, 0.0))


def _entropy():
    return Penalty("entropy")


def _box(lower, upper, phi0=None):
    return Penalty(
        "quadratic_with_box",
        phi0 if phi0 is not None else const_fn(G, 0.0),
        lower=lower,
        upper=upper,
    )


class TestEval:
    def test_quadratic_zero_at_center(self):
        phi0 = GridFn(G, RNG.normal(size=G.n))
        assert penalty_eval(_quad(phi0), phi0) == 0.0

    def test_entropy_of_one_is_zero(self):
        assert penalty_eval(_entropy(), const_fn(G, 1.0)) == pytest.approx(0.0, abs=1e-14)

    def test_entropy_of_two(self):
        # integral over [0,1] of 2 ln 2
        assert penalty_eval(_entropy(), const_fn(G, 2.0)) == pytest.approx(
            2.0 * math.log(2.0), rel=1e-12
        )

    def test_entropy_floor_keeps_zero_finite(self):
        val = penalty_eval(_entropy(), const_fn(G, 0.0))
        assert math.isfinite(val)

    def test_box_indicator(self):
        p = _box(0.0, 0.5)
        assert penalty_eval(p, const_fn(G, 0.6)) == math.inf
        inside = const_fn(G, 0.25)
        assert penalty_eval(p, inside) == pytest.approx(0.25**2, rel=1e-12)

    def test_invalid_construction(self):
        with pytest.raises(ValueError):
            Penalty("tv")
        with pytest.raises(ValueError):
            Penalty("quadratic")
        with pytest.raises(ValueError):
            Penalty("quadratic_with_box", const_fn(G, 0.0), lower=1.0, upper=0.0)
        with pytest.raises(ValueError):
            Penalty("entropy", entropy_floor=0.0)


class TestSubgradient:
    def test_quadratic_zero_at_center(self):
        phi0 = GridFn(G, RNG.normal(size=G.n))
        np.testing.assert_array_equal(subgradient(_quad(phi0), phi0).values, 0.0)

    def test_entropy_at_one(self):
        np.testing.assert_allclose(
            subgradient(_entropy(), const_fn(G, 1.0)).values, 1.0, rtol=1e-15
        )

    def test_box_rejects_infeasible(self):
        with pytest.raises(ValueError):
            subgradient(_box(0.0, 0.5), const_fn(G, 0.7))

    @pytest.mark.parametrize("kind", ["quadratic", "entropy", "box"])
    def test_subgradient_inequality(self, kind):
        # R(psi) >= R(phi) + <g, psi - phi> on 100 random psi
        rng = np.random.default_rng(7)
        if kind == "quadratic":
            p = _quad(GridFn(G, rng.normal(size=G.n)))
            phi = GridFn(G, rng.normal(size=G.n))
            draw = lambda: GridFn(G, rng.normal(size=G.n))
        elif kind == "entropy":
            p = _entropy()
            phi = GridFn(G, rng.uniform(0.1, 3.0, size=G.n))
            draw = lambda: GridFn(G, rng.uniform(0.05, 3.0, size=G.n))
        else:
            p = _box(-1.0, 1.0, GridFn(G, rng.uniform(-0.5, 0.5, size=G.n)))
            phi = GridFn(G, rng.uniform(-1.0, 1.0, size=G.n))
            draw = lambda: GridFn(G, rng.uniform(-1.0, 1.0, size=G.n))
        g = subgradient(p, phi)
        r_phi = penalty_eval(p, phi)
        for _ in range(100):
            psi = draw()
            lhs = penalty_eval(p, psi)
            rhs = r_phi + inner_product(g, psi - phi)
            assert lhs >= rhs - 1e-10


class TestBregman:
    def test_zero_at_equal_points(self):
        phi = GridFn(G, RNG.uniform(0.5, 2.0, size=G.n))
        for p in (_quad(), _entropy(), _box(0.0, 3.0)):
            assert bregman(p, phi, phi) == pytest.approx(0.0, abs=1e-12)

    def test_quadratic_identity(self):
        p = _quad(GridFn(G, RNG.normal(size=G.n)))
        for _ in range(50):
            phi = GridFn(G, RNG.normal(size=G.n))
            psi = GridFn(G, RNG.normal(size=G.n))
            d = phi - psi
            expected = inner_product(d, d)
            assert bregman(p, phi, psi) == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_entropy_constants_oracle(self):
        # integral of phi ln(phi/psi) - phi + psi with phi=2, psi=1 on [0,1]
        val = bregman(_entropy(), const_fn(G, 2.0), const_fn(G, 1.0))
        assert val == pytest.approx(2.0 * math.log(2.0) - 1.0, rel=1e-12)

    @pytest.mark.parametrize("kind", ["quadratic", "entropy", "box"])
    def test_nonnegative_on_random_pairs(self, kind):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            if kind == "quadratic":
                p = _quad(const_fn(G, 0.0))
                phi = GridFn(G, rng.normal(size=G.n))
                psi = GridFn(G, rng.normal(size=G.n))
            elif kind == "entropy":
                p = _entropy()
                phi = GridFn(G, rng.uniform(0.01, 5.0, size=G.n))
                psi = GridFn(G, rng.uniform(0.01, 5.0, size=G.n))
            else:
                p = _box(-2.0, 2.0, const_fn(G, 0.0))
                phi = GridFn(G, rng.uniform(-2.0, 2.0, size=G.n))
                psi = GridFn(G, rng.uniform(-2.0, 2.0, size=G.n))
            assert bregman(p, phi, psi) >= -1e-10

    def test_convex_along_segments(self):
        rng = np.random.default_rng(5)
        p = _entropy()
        psi = GridFn(G, rng.uniform(0.1, 2.0, size=G.n))
        psi_star = subgradient(p, psi)
        phi1 = GridFn(G, rng.uniform(0.1, 2.0, size=G.n))
        phi2 = GridFn(G, rng.uniform(0.1, 2.0, size=G.n))
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            mid = t * phi1 + (1.0 - t) * phi2
            lhs = bregman(p, mid, psi, psi_star)
            rhs = t * bregman(p, phi1, psi, psi_star) + (1.0 - t) * bregman(
                p, phi2, psi, psi_star
            )
            assert lhs <= rhs + 1e-10

    def test_pinsker_bound_for_unit_mass_pairs(self):
        # entropy Bregman of densities is KL; KL >= (1/2) * (L1 distance)^2
        rng = np.random.default_rng(99)
        one = const_fn(G, 1.0)
        for _ in range(200):
            phi = GridFn(G, rng.uniform(0.05, 3.0, size=G.n))
            psi = GridFn(G, rng.uniform(0.05, 3.0, size=G.n))
            phi = (1.0 / inner_product(phi, one)) * phi
            psi = (1.0 / inner_product(psi, one)) * psi
            l1 = inner_product(GridFn(G, np.abs(phi.values - psi.values)), one)
            assert bregman(_entropy(), phi, psi) >= 0.5 * l1**2 - 1e-8

    def test_rejects_infinite_values(self):
        p = _box(0.0, 0.5)
        with pytest.raises(ValueError):
            bregman(p, const_fn(G, 0.7), const_fn(G, 0.2))


class TestProx:
    def test_quadratic_closed_form_example(self):
        out = prox(_quad(const_fn(G, 0.0)), const_fn(G, 1.0), 1.0)
        np.testing.assert_allclose(out.values, 0.5, rtol=1e-15)

    def test_quadratic_random_closed_form(self):
        phi0 = GridFn(G, RNG.normal(size=G.n))
        v = GridFn(G, RNG.normal(size=G.n))
        tau = 0.7
        out = prox(_quad(phi0), v, tau)
        np.testing.assert_allclose(
            out.values, (v.values + tau * phi0.values) / (1.0 + tau), rtol=1e-14
        )

    def test_box_constraint_active(self):
        out = prox(_box(0.0, 0.5), const_fn(G, 1.0), 1.0)
        assert np.all(out.values <= 0.5 + 1e-15)
        np.testing.assert_allclose(out.values, 0.5, rtol=1e-14)

    def test_box_first_order_condition(self):
        rng = np.random.default_rng(17)
        p = _box(-0.3, 0.8, GridFn(G, rng.normal(scale=0.2, size=G.n)))
        v = GridFn(G, rng.normal(size=G.n))
        tau = 1.3
        t = prox(p, v, tau).values
        grad = 2.0 * (t - v.values) + 2.0 * tau * (t - p.phi0.values)
        proj_residual = t - np.clip(t - grad, p.lower, p.upper)
        assert np.max(np.abs(proj_residual)) <= 1e-10

    def test_entropy_constant_oracle(self):
        # root of 2(t - 1) + ln t + 1 = 0, independent root finder
        root = brentq(lambda t: 2.0 * (t - 1.0) + math.log(t) + 1.0, 1e-8, 10.0)
        out = prox(_entropy(), const_fn(G, 1.0), 1.0)
        np.testing.assert_allclose(out.values, root, rtol=1e-12)

    def test_entropy_pointwise_oracle_random(self):
        # oracle root-find in log space: roots span hundreds of orders of
        # magnitude for negative v and small tau
        rng = np.random.default_rng(3)
        v = GridFn(G, rng.uniform(-2.0, 3.0, size=G.n))
        for tau in (0.03, 1.0, 25.0):
            out = prox(_entropy(), v, tau).values
            for vi, ti in zip(v.values, out):
                x = brentq(
                    lambda x: 2.0 * (math.exp(x) - vi) + tau * (x + 1.0),
                    -800.0,
                    20.0,
                    xtol=1e-13,
                )
                assert ti == pytest.approx(math.exp(x), rel=1e-9)

    def test_entropy_first_order_residual(self):
        rng = np.random.default_rng(8)
        v = GridFn(G, rng.uniform(-1.0, 2.0, size=G.n))
        tau = 0.5
        t = prox(_entropy(), v, tau).values
        res = 2.0 * (t - v.values) + tau * (np.log(t) + 1.0)
        assert np.max(np.abs(res)) <= 1e-10

    def test_quadratic_first_order_residual(self):
        phi0 = GridFn(G, RNG.normal(size=G.n))
        v = GridFn(G, RNG.normal(size=G.n))
        tau = 2.2
        t = prox(_quad(phi0), v, tau).values
        res = 2.0 * (t - v.values) + 2.0 * tau * (t - phi0.values)
        assert np.max(np.abs(res)) <= 1e-10

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ValueError):
            prox(_quad(const_fn(G, 0.0)), const_fn(G, 1.0), 0.0)
