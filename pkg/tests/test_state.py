import cmath
import dataclasses

import numpy as np
import pytest

from ddslit.packets import HBAR, ComplexLog, Packet1D
from ddslit.state import (ConfigPoint4, DegenerateCollapse, NodeSingularity,
                          OneParticleState, ProductTerm, TwoParticleState,
                          build_initial_state, collapse, psi1_value,
                          psi2_value, velocity1, velocity2)
from tests.test_packets import naive_value


def naive_psi2(state, q, t):
    """Direct plain-complex summation; valid at non-underflowing points."""
    total = 0.0 + 0.0j
    xs = (q.x1, q.y1, q.x2, q.y2)
    for term in state.terms:
        prod = term.coefficient.to_complex()
        for factor, x in zip(term.factors, xs):
            prod *= naive_value(factor, x, t, hbar=state.hbar)
        total += prod
    return total


def term_center(state, k, t=0.0):
    """Configuration point at the moving center of term k."""
    return ConfigPoint4(*(f.center + f.velocity * t
                          for f in state.terms[k].factors))


def fd_velocity2(state, q, t, axis, v_axis=0.0):
    """(hbar/m) times the wrapped central phase difference of psi2_value.

    The step is a small fraction of the instantaneous packet width, capped so
    the one-sided phase increment stays well inside (-pi, pi); the wrap below
    would silently corrupt larger increments.
    """
    mass = state.mass1 if axis < 2 else state.mass2
    sigma = 1e-6 if axis in (0, 2) else 1e-5
    tau = t * state.hbar / (2 * mass * sigma ** 2)
    spread = sigma * np.sqrt(1 + tau ** 2)
    k = mass * max(abs(v_axis), state.hbar / (mass * spread)) / state.hbar
    h = min(3e-5 * spread, 0.02 / k)
    arr = q.as_array()
    qp, qm = arr.copy(), arr.copy()
    qp[axis] += h
    qm[axis] -= h
    dphi = (psi2_value(state, ConfigPoint4(*qp), t).phase
            - psi2_value(state, ConfigPoint4(*qm), t).phase)
    dphi = (dphi + np.pi) % (2 * np.pi) - np.pi
    return (state.hbar / mass) * dphi / (2 * h)


class TestTypes:
    def test_config_point_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ConfigPoint4(0.0, np.inf, 0.0, 0.0)

    def test_state_requires_four_terms(self, state2):
        with pytest.raises(ValueError):
            TwoParticleState(state2.terms[:3] + (state2.terms[0],) * 0
                             if False else state2.terms[:3],
                             state2.mass1, state2.mass2)

    def test_state_rejects_broken_exchange_symmetry(self, state2):
        asym = list(state2.terms)
        bad = ProductTerm(ComplexLog(1.0, 0.0), asym[0].factors)
        asym[0] = bad
        with pytest.raises(ValueError):
            TwoParticleState(tuple(asym), state2.mass1, state2.mass2)


class TestBuildInitialState:
    def test_four_terms(self, state2):
        assert len(state2.terms) == 4

    def test_x_centers(self, state2):
        centers = {t.factors[0].center for t in state2.terms}
        assert centers == {5e-3, -5e-3}
        for t in state2.terms:
            # x velocity sign tracks the x center sign on both particles
            assert np.sign(t.factors[0].velocity) == np.sign(t.factors[0].center)
            assert np.sign(t.factors[2].velocity) == np.sign(t.factors[2].center)

    def test_y_centers(self, state2):
        assert {t.factors[1].center for t in state2.terms} == {5e-5, -5e-5}

    def test_invalid_params_rejected(self, params):
        bad = dataclasses.replace(params, sigma_x=0.0)
        with pytest.raises(ValueError):
            build_initial_state(bad)


class TestPsi2:
    def test_exchange_symmetry(self, state2, rng):
        for _ in range(100):
            t = rng.uniform(0.0, 5.0)
            q = ConfigPoint4(rng.uniform(-6e-3, 6e-3), rng.uniform(-1e-4, 1e-4),
                             rng.uniform(-6e-3, 6e-3), rng.uniform(-1e-4, 1e-4))
            a = psi2_value(state2, q, t)
            b = psi2_value(state2, q.swapped(), t)
            assert a.log_magnitude == pytest.approx(b.log_magnitude, rel=1e-12)
            assert cmath.exp(1j * (a.phase - b.phase)) == pytest.approx(1.0, abs=1e-9)

    def test_naive_summation_oracle(self, state2):
        q = ConfigPoint4(5e-3, 5e-5, -5e-3, -5e-5)
        got = psi2_value(state2, q, 0.0).to_complex()
        assert got == pytest.approx(naive_psi2(state2, q, 0.0), rel=1e-12)

    def test_between_slits_deep_underflow(self, state2):
        q = ConfigPoint4(0.0, 0.0, 0.0, 0.0)
        v = psi2_value(state2, q, 0.0)
        # each x factor contributes about -(l_x / 2 sigma_x)^2 = -6.25e6
        assert v.log_magnitude < -1e6


class TestVelocity2:
    def test_term_center_single_packet_limit(self, state2):
        v = velocity2(state2, term_center(state2, 0), 0.0)
        assert abs(v.vx1 - 0.1) < 1e-6
        assert abs(v.vy1) < 1e-6
        assert abs(v.vx2 + 0.1) < 1e-6
        assert abs(v.vy2) < 1e-6

    def test_swap_equivariance(self, state2, rng):
        for _ in range(50):
            t = rng.uniform(0.0, 5.0)
            spread = 1e-6 * np.sqrt(1 + (t * HBAR / (2 * state2.mass1 * 1e-12)) ** 2)
            q = ConfigPoint4(5e-3 + 0.1 * t + rng.normal() * spread,
                             rng.normal() * 1e-4,
                             -5e-3 - 0.1 * t + rng.normal() * spread,
                             rng.normal() * 1e-4)
            v = velocity2(state2, q, t).as_array()
            w = velocity2(state2, q.swapped(), t).as_array()
            assert np.allclose(v, w[[2, 3, 0, 1]], rtol=1e-12, atol=1e-15)

    def test_finite_difference_oracle(self, state2, params):
        # Points are Born samples transported by the flow itself: that is the
        # population the velocity field is ever evaluated on.  Pure near-node
        # points (phase curvature makes any central difference useless) are
        # excluded with a strict 25-e-fold floor.
        from ddslit.dynamics import IntegratorConfig, evolve_to_time, two_particle_field
        from ddslit.sampling import SamplerSpec, sample_initial

        n = 100
        cfg = IntegratorConfig()
        q0 = sample_initial(state2, SamplerSpec(seed=41), n)
        ts = np.random.default_rng(41).uniform(0.0, 5.0, n)
        q, t, stiff, _ = evolve_to_time(two_particle_field(state2, cfg), q0,
                                        np.zeros(n), ts, cfg)
        assert not stiff.any()
        for i in range(n):
            point = ConfigPoint4(*q[i])
            try:
                v = velocity2(state2, point, t[i], node_floor=25.0).as_array()
            except NodeSingularity:
                continue
            vnorm = np.linalg.norm(v)
            for axis in range(4):
                fd = fd_velocity2(state2, point, t[i], axis, v[axis])
                denom = max(abs(v[axis]), 1e-2 * vnorm)
                assert abs(fd - v[axis]) / denom < 1e-6

    def test_node_singularity_raised(self):
        # An exactly cancelling exchange-symmetric state: +T, +T', -T, -T'.
        f = (Packet1D(1e-5, 2e-5, 0.0, 6.646e-27),
             Packet1D(1e-5, 0.0, 0.0, 6.646e-27))
        g = (Packet1D(1e-5, -2e-5, 0.0, 6.646e-27),
             Packet1D(1e-5, 1e-5, 0.0, 6.646e-27))
        plus = ComplexLog(0.0, 0.0)
        minus = ComplexLog(0.0, np.pi)
        null = TwoParticleState((
            ProductTerm(plus, f + g), ProductTerm(plus, g + f),
            ProductTerm(minus, f + g), ProductTerm(minus, g + f)),
            6.646e-27, 6.646e-27)
        # cancellation bottoms out near 1e-16 of the largest term (round-off
        # of exp(i*pi)), far below a floor of 30 e-folds
        with pytest.raises(NodeSingularity):
            velocity2(null, ConfigPoint4(1e-5, 1e-5, -1e-5, 0.0), 0.0,
                      node_floor=30.0)


class TestCollapse:
    def make_conditional(self, state2, t_c=0.02, dy=0.0):
        # detect particle 1 near the left-moving packet's position at t_c
        pos = (-5e-3 - 0.1 * t_c, -5e-5 + dy)
        return pos, collapse(state2, 1, pos, t_c)

    def test_velocity_continuity(self, state2, rng):
        for _ in range(50):
            t_c = rng.uniform(0.05, 3.0)
            pos = (-5e-3 - 0.1 * t_c + rng.normal() * 1e-6,
                   rng.normal() * 3e-5)
            cond = collapse(state2, 1, pos, t_c)
            sur = (5e-3 + 0.1 * t_c + rng.normal() * 1e-6,
                   rng.normal() * 3e-5)
            q = ConfigPoint4(pos[0], pos[1], sur[0], sur[1])
            v2 = velocity2(state2, q, t_c)
            v1 = velocity1(cond, sur[0], sur[1], t_c)
            scale = np.hypot(v2.vx2, v2.vy2)
            assert abs(v1[0] - v2.vx2) / scale < 1e-9
            assert abs(v1[1] - v2.vy2) / scale < 1e-9

    def test_suppressed_terms_after_left_detection(self, state2):
        _, cond = self.make_conditional(state2)
        mags = np.array([t.coefficient.log_magnitude for t in cond.terms])
        order = np.sort(mags)[::-1]
        # terms whose survivor sits on the detected (+x-moving partner is
        # gone) side are Gaussian-tail suppressed by far more than 1e3
        assert order[1] - order[2] > 1e3
        for t in cond.terms[np.argmax(mags):np.argmax(mags) + 1]:
            assert t.factors[0].center == 5e-3

    def test_dominant_coefficient_ratio_matches_slit_amplitudes(self, state2):
        t_c = 0.2
        pos = (-5e-3 - 0.1 * t_c, -3.2e-5)
        cond = collapse(state2, 1, pos, t_c)
        mags = [t.coefficient.log_magnitude for t in cond.terms]
        dom = np.argsort(mags)[-2:]
        a, b = (cond.terms[k] for k in sorted(dom))
        ratio = (a.coefficient.to_complex() / b.coefficient.to_complex())
        # independently: ratio of the detected particle's slit amplitudes
        fa = state2.terms[sorted(dom)[0]].factors
        fb = state2.terms[sorted(dom)[1]].factors
        expect = ((naive_value(fa[0], pos[0], t_c) * naive_value(fa[1], pos[1], t_c))
                  / (naive_value(fb[0], pos[0], t_c) * naive_value(fb[1], pos[1], t_c)))
        assert ratio == pytest.approx(expect, rel=1e-10)

    def test_invalid_particle_index(self, state2):
        with pytest.raises(ValueError):
            collapse(state2, 3, (0.0, 0.0), 0.0)

    def test_degenerate_collapse(self, state2):
        # all coefficients at the -inf sentinel already: every conditional
        # coefficient underflows no matter where the detection lands
        zero = ComplexLog(-np.inf, 0.0)
        dead = TwoParticleState(
            tuple(ProductTerm(zero, t.factors) for t in state2.terms),
            state2.mass1, state2.mass2, state2.hbar)
        with pytest.raises(DegenerateCollapse):
            collapse(dead, 1, (-5e-3, 0.0), 0.1)


class TestPsi1:
    def test_equals_frozen_psi2_at_tc(self, state2, rng):
        t_c = 0.105
        pos = (-5e-3 - 0.1 * t_c, -4e-5)
        cond = collapse(state2, 1, pos, t_c)
        for _ in range(20):
            x = 5e-3 + 0.1 * t_c + rng.normal() * 2e-6
            y = rng.normal() * 5e-5
            a = psi1_value(cond, x, y, t_c)
            b = psi2_value(state2, ConfigPoint4(pos[0], pos[1], x, y), t_c)
            assert a.log_magnitude == pytest.approx(b.log_magnitude, rel=1e-12)
            assert cmath.exp(1j * (a.phase - b.phase)) == pytest.approx(1.0, abs=1e-9)

    def test_naive_summation_oracle(self, state2):
        t_c = 0.105
        pos = (-5e-3 - 0.1 * t_c, -4e-5)
        cond = collapse(state2, 1, pos, t_c)
        x, y = 5e-3 + 0.1 * t_c, 2e-5
        naive = sum(
            t.coefficient.to_complex()
            * naive_value(t.factors[0], x, t_c) * naive_value(t.factors[1], y, t_c)
            for t in cond.terms)
        # accumulated drift phases are ~1e5 rad; plain complex trig loses a
        # few digits there, so the naive reference carries ~1e-11 error itself
        assert psi1_value(cond, x, y, t_c).to_complex() == pytest.approx(
            naive, rel=1e-9)

    def test_velocity1_single_dominant_term_center(self, state2):
        # early detection hard in the lower slit: the upper-slit amplitude is
        # ~e^-21 down, leaving one dominant conditional term
        t_c = 0.005
        pos = (-5e-3 - 0.1 * t_c, -5e-5)
        cond = collapse(state2, 1, pos, t_c)
        vx, vy = velocity1(cond, 5e-3 + 0.1 * t_c, 5e-5, t_c)
        assert abs(vx - 0.1) < 1e-6
        assert abs(vy) < 1e-6

    def test_rescaling_invariance(self, state2):
        t_c = 0.3
        pos = (-5e-3 - 0.1 * t_c, 1e-5)
        cond = collapse(state2, 1, pos, t_c)
        scale = ComplexLog(2.3, 1.1)
        scaled = OneParticleState(
            tuple(ProductTerm(t.coefficient.times(scale), t.factors)
                  for t in cond.terms),
            cond.mass, cond.collapse_time, cond.hbar)
        x, y = 5e-3 + 0.1 * t_c + 1e-6, 3e-5
        t = t_c + 0.5
        assert velocity1(cond, x, y, t) == velocity1(scaled, x, y, t)
