import math

import numpy as np
import pytest

from crowdsweep.bilevel import (
    CaseStudyParams,
    InnerInfeasibleError,
    InnerOptions,
    UnsupportedFamilyError,
    closed_form_controls,
    penalized_objective,
    solve_bilevel_direct,
    solve_twodisk_parametric,
    value_function,
)
from crowdsweep.dynamics import (
    IntervalSet,
    ScaledLinearDrift,
    Scenario,
    SegmentSet,
    constant_profile,
    cost_lower,
    integrate_lower_catchup,
    integrate_upper,
    uniform_grid,
)

from conftest import S2, VHAT, make_twodisk


def reference_inner_effort(params, participant):
    """Independent oracle: dense quadrature of the closed-form arc controls."""
    a, M, R = params.decay, params.cap, params.R
    offset = 0.0 if participant == params.near else 2 * R

    def u_of(t):
        if t < params.t_a:
            return 0.0
        g2 = float(params.gamma2(t))
        if t < params.t_b:
            return (params.v_bar - M) / (a * (g2 + offset))
        if participant == params.near:
            return 1.0
        return g2 / (g2 + 2 * R)

    ts = np.linspace(0, params.T, 120_001)
    return float(np.trapezoid([u_of(t) ** 2 for t in ts], ts))


class TestValueFunction:
    def test_resting_center_costs_nothing(self):
        scn = Scenario(
            N=1, R=3.0, T=6.0, y0=[[4.0, 0.0]],
            drift=[ScaledLinearDrift(-8.0)],
            U=[IntervalSet([0.0], [1.0])],
            V=[SegmentSet([1.0, 0.0], 1.0)],
            M=[6.0], rho=[1.0], x0=[[4.0, 0.0]],
        )
        grid = uniform_grid(6.0, 300)
        phi, (x0, u) = value_function(scn, 0, constant_profile(grid, np.zeros(2)))
        assert phi == pytest.approx(0.0, abs=1e-12)
        assert np.max(np.abs(u.values)) == 0.0

    def test_reference_effort_matches_arc_quadrature(self, twodisk, twodisk_solution):
        # the inner relaxation converges like h*log(1/h) on the saturated
        # arc, so the comparison runs on a fine grid
        params, _sol = twodisk_solution
        grid = uniform_grid(6.0, 48_000)
        v, _u = closed_form_controls(params, grid)
        opts = InnerOptions(refine=False, multistart=1)
        for participant in (params.near, params.far):
            oracle = reference_inner_effort(params, participant)
            phi, _arg = value_function(twodisk, participant, v[participant], opts)
            assert abs(phi - oracle) <= 0.02 * oracle

    def test_free_initial_point_prefers_the_center(self):
        scn = Scenario(
            N=1, R=3.0, T=6.0, y0=[[4.0, 0.0]],
            drift=[ScaledLinearDrift(-8.0)],
            U=[IntervalSet([0.0], [1.0])],
            V=[SegmentSet([1.0, 0.0], 1.0)],
            M=[6.0], rho=[1.0], x0=None,
        )
        grid = uniform_grid(6.0, 300)
        phi, (x0, _u) = value_function(scn, 0, constant_profile(grid, np.zeros(2)))
        assert phi == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(x0, scn.y0[0])

    def test_no_feasible_inner_control(self):
        scn = Scenario(
            N=1, R=3.0, T=6.0, y0=[[48.0, 0.0]],
            drift=[ScaledLinearDrift(-8.0)],
            U=[IntervalSet([0.0], [0.0])],   # frozen inner control
            V=[SegmentSet([1.0, 0.0], 12.0)],
            M=[6.0], rho=[1.0], x0=[[48.0, 0.0]],
        )
        grid = uniform_grid(6.0, 600)
        v = constant_profile(grid, [-12.0, 0.0])
        with pytest.raises(InnerInfeasibleError):
            value_function(scn, 0, v)

    def test_monotone_under_control_set_enlargement(self):
        base = dict(
            N=1, R=3.0, T=6.0, y0=[[30.0, 0.0]],
            drift=[ScaledLinearDrift(-8.0)],
            V=[SegmentSet([1.0, 0.0], 8.0)],
            M=[6.0], rho=[1.0], x0=[[30.0, 0.0]],
        )
        grid = uniform_grid(6.0, 600)
        v = constant_profile(grid, [-4.0, 0.0])
        phis = []
        for lo in (0.0, 0.005, 0.01):
            scn = Scenario(U=[IntervalSet([lo], [1.0])], **base)
            phi, _ = value_function(scn, 0, v, InnerOptions(refine=False, multistart=1))
            phis.append(phi)
        assert phis[0] <= phis[1] <= phis[2]
        assert phis[0] < phis[2]


class TestPenalizedObjective:
    def test_inner_argmin_gives_terminal_cost(self, twodisk, twodisk_solution):
        params, sol = twodisk_solution
        opts = InnerOptions(refine=False, multistart=1)
        for rho in (np.zeros(2), np.array([3.0, 7.0])):
            val = penalized_objective(
                twodisk, (sol.v, sol.u, sol.x0), rho=rho, inner=opts
            )
            assert val == pytest.approx(9.0, abs=0.05)

    def test_wasteful_control_strictly_exceeds(self, twodisk, twodisk_solution):
        params, sol = twodisk_solution
        wasteful = [
            constant_profile(sol.u[i].grid, [0.0]) for i in range(2)
        ]
        for i in range(2):
            wasteful[i].values[:] = np.maximum(sol.u[i].values, 0.02)
        y = integrate_upper(twodisk, sol.v)
        integrate_lower_catchup(twodisk, y, wasteful, twodisk.x0)  # stays feasible
        opts = InnerOptions(refine=False, multistart=1)
        base = penalized_objective(twodisk, (sol.v, sol.u, sol.x0), inner=opts)
        bumped = penalized_objective(twodisk, (sol.v, wasteful, sol.x0), inner=opts)
        assert bumped > base + 1e-4


class TestParametricSolver:
    def test_reference_values(self, twodisk_solution):
        params, sol = twodisk_solution
        assert 5.910 <= params.t_b <= 5.920
        assert 11.85 <= params.v_bar <= 11.87
        assert 0.252 <= params.t_a <= 0.254

    def test_structural_identities(self, twodisk_solution):
        params, _sol = twodisk_solution
        assert params.v_bar * params.t_a == pytest.approx(3.0, abs=1e-6)
        assert params.v_bar == pytest.approx(
            8 * float(params.gamma2(params.t_b)) + 6, abs=1e-3
        )
        assert params.v_bar * (8 * params.t_b + 1) / 8 == pytest.approx(
            48 * S2 + 3.75, abs=1e-3
        )
        # both closed forms of the saturation distance agree
        lin = 48 * S2 + 3 - params.v_bar * params.t_b
        assert (params.v_bar - 6) / 8 == pytest.approx(lin, abs=1e-2)

    def test_terminal_geometry(self, twodisk_solution):
        params, sol = twodisk_solution
        yT = sol.y.terminal()
        assert np.allclose(yT[params.near], -3 * VHAT, atol=0.01)
        assert np.allclose(yT[params.far], 3 * VHAT, atol=0.01)
        assert sol.J_H == pytest.approx(9.0, abs=0.01)
        assert float(params.gamma2(6.0)) == pytest.approx(0.0, abs=0.01)

    def test_rotation_invariance(self, twodisk_solution):
        params, sol = twodisk_solution
        rotated = make_twodisk(rotate=0.7)
        params2, sol2 = solve_twodisk_parametric(rotated, grid_K=1200)
        assert params2.t_a == pytest.approx(params.t_a, abs=1e-9)
        assert params2.t_b == pytest.approx(params.t_b, abs=1e-9)
        assert params2.v_bar == pytest.approx(params.v_bar, abs=1e-9)
        assert sol2.J_H == pytest.approx(sol.J_H, abs=1e-3)

    def test_family_mismatch_rejected(self):
        scn = Scenario(
            N=1, R=3.0, T=6.0, y0=[[10.0, 0.0]],
            drift=[ScaledLinearDrift(-8.0)],
            U=[IntervalSet([0.0], [1.0])],
            V=[SegmentSet([1.0, 0.0], 5.0)],
            M=[6.0], rho=[1.0], x0=[[10.0, 0.0]],
        )
        with pytest.raises(UnsupportedFamilyError):
            solve_twodisk_parametric(scn)


class TestClosedFormControls:
    def test_near_control_saturates_continuously(self, twodisk_solution):
        params, _sol = twodisk_solution
        # the ride formula meets the saturated arc with value one
        assert (params.v_bar - 6) / (8 * float(params.gamma2(params.t_b))) == pytest.approx(
            1.0, abs=1e-9
        )

    def test_far_control_stays_interior_and_vanishes_at_horizon(self, twodisk_solution):
        params, sol = twodisk_solution
        u_far = sol.u[params.far].values
        assert np.max(u_far) < 1.0
        assert u_far[-1, 0] == pytest.approx(0.0, abs=0.02)

    def test_profiles_respect_control_sets(self, twodisk, twodisk_solution):
        params, sol = twodisk_solution
        for i in range(2):
            assert sol.u[i].max_set_distance(twodisk.U[i]) <= 1e-12
            assert sol.v[i].max_set_distance(twodisk.V[i]) <= 1e-9


class TestDirectSolver:
    def test_frozen_upper_level(self):
        y0 = 10 * VHAT
        scn = Scenario(
            N=1, R=3.0, T=6.0, y0=[y0],
            drift=[ScaledLinearDrift(-8.0)],
            U=[IntervalSet([0.0], [1.0])],
            V=[SegmentSet(VHAT, 0.0)],
            M=[6.0], rho=[1.0], x0=[y0],
        )
        sol = solve_bilevel_direct(scn, coarse_grid_K=4, seed=0, sim_K=120, max_evals=200)
        assert sol.J_H == pytest.approx(0.5 * np.dot(y0, y0), abs=1e-9)

    def test_single_disk_reaches_exit_at_rest_cost(self):
        y0 = 10 * VHAT
        scn = Scenario(
            N=1, R=3.0, T=6.0, y0=[y0],
            drift=[ScaledLinearDrift(-8.0)],
            U=[IntervalSet([0.0], [1.0])],
            V=[SegmentSet(VHAT, 10.0)],
            M=[6.0], rho=[1.0], x0=[y0],
        )
        sol = solve_bilevel_direct(scn, coarse_grid_K=4, seed=0, sim_K=240, max_evals=1500)
        assert sol.J_H <= 0.05
        assert sol.feasibility.max_violation <= 1e-6
