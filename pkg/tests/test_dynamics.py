import math

import numpy as np
import pytest

from crowdsweep.bilevel import closed_form_controls
from crowdsweep.dynamics import (
    AffineDrift,
    BallSet,
    ControlProfile,
    IntervalSet,
    InfeasibleControlError,
    ScaledLinearDrift,
    Scenario,
    SegmentSet,
    StabilityError,
    TruncationViolationError,
    check_feasibility,
    constant_profile,
    cost_lower,
    cost_upper,
    h5_bounds,
    integrate_lower_catchup,
    integrate_lower_penalty,
    integrate_upper,
    uniform_grid,
)

from conftest import S2, VHAT, arc_sampled_controls, make_twodisk


def single_disk(y0=(0.0, 0.0), V=None, M=6.0, T=6.0):
    return Scenario(
        N=1,
        R=3.0,
        T=T,
        y0=[y0],
        drift=[ScaledLinearDrift(-8.0)],
        U=[IntervalSet([0.0], [1.0])],
        V=[V if V is not None else SegmentSet(VHAT, 10 * S2)],
        M=[M],
        rho=[1.0],
        x0=[y0],
    )


class TestIntegrateUpper:
    def test_rest(self):
        scn = single_disk(y0=(5.0, 1.0))
        grid = uniform_grid(6.0, 60)
        y = integrate_upper(scn, [constant_profile(grid, np.zeros(2))])
        assert np.allclose(y.states, scn.y0[0])

    def test_exact_linear_translation(self):
        scn = single_disk(y0=tuple(48 * S2 * VHAT))
        grid = uniform_grid(6.0, 240)
        vbar = 11.0
        y = integrate_upper(scn, [constant_profile(grid, -vbar * VHAT)])
        expect = 48 * S2 - vbar * grid
        assert np.allclose(y.states[:, 0, :] @ VHAT, expect, atol=1e-9)

    def test_rigid_translation_conserves_distance(self, twodisk):
        grid = uniform_grid(6.0, 120)
        v = [constant_profile(grid, -7.0 * VHAT) for _ in range(2)]
        y = integrate_upper(twodisk, v)
        dist = np.linalg.norm(y.states[:, 0, :] - y.states[:, 1, :], axis=1)
        assert np.max(np.abs(dist - 6.0)) <= 1e-9

    def test_control_outside_set_rejected(self):
        scn = single_disk()
        grid = uniform_grid(6.0, 10)
        with pytest.raises(InfeasibleControlError):
            integrate_upper(scn, [constant_profile(grid, 20 * S2 * VHAT)])


class TestCatchUp:
    def test_rest_at_center(self):
        scn = single_disk()
        grid = uniform_grid(6.0, 100)
        v = [constant_profile(grid, np.zeros(2))]
        u = [constant_profile(grid, [0.0])]
        y = integrate_upper(scn, v)
        x = integrate_lower_catchup(scn, y, u, scn.x0)
        assert np.allclose(x.states, scn.x0[0])
        assert not x.contact.any()

    def test_boundary_ride_from_contact_onset(self, twodisk, twodisk_solution):
        params, sol = twodisk_solution
        near = params.near
        dist = np.linalg.norm(
            sol.x.states[:, near, :] - sol.y.states[:, near, :], axis=1
        )
        h = sol.x.grid[1]
        onset = int(np.argmax(sol.x.contact[:, near]))
        assert abs(sol.x.grid[onset] - params.t_a) <= h
        assert params.v_bar * params.t_a == pytest.approx(3.0, abs=1e-9)
        # once on the boundary it stays there until the final time
        assert np.max(np.abs(dist[onset:] - 3.0)) <= 6 * h
        assert sol.x.contact[onset:, near].all()

    def test_truncation_violation_is_diagnosed(self):
        scn = single_disk(y0=tuple(10 * VHAT), M=0.5)
        grid = uniform_grid(6.0, 600)
        v = [constant_profile(grid, -5.0 * VHAT)]
        u = [constant_profile(grid, [0.0])]
        y = integrate_upper(scn, v)
        with pytest.raises(TruncationViolationError) as err:
            integrate_lower_catchup(scn, y, u, scn.x0)
        assert err.value.participant == 0
        assert err.value.magnitude > 0.5

    def test_mismatched_grid_rejected(self):
        scn = single_disk()
        grid = uniform_grid(6.0, 50)
        y = integrate_upper(scn, [constant_profile(grid, np.zeros(2))])
        u = [constant_profile(uniform_grid(6.0, 40), [0.0])]
        with pytest.raises(ValueError):
            integrate_lower_catchup(scn, y, u, scn.x0)


class TestPenalty:
    def test_interior_trajectory_matches_catchup(self):
        scn = single_disk(y0=(10.0, 0.0))
        grid = uniform_grid(6.0, 600)
        v = [constant_profile(grid, np.zeros(2))]
        u = [constant_profile(grid, [0.02])]
        y = integrate_upper(scn, v)
        xc = integrate_lower_catchup(scn, y, u, scn.x0)
        xp = integrate_lower_penalty(scn, y, u, scn.x0, step=5e-4, stiffness=1e3)
        err = np.max(np.linalg.norm(xc.states - xp.states, axis=2))
        assert err <= 10 * grid[1]

    def test_discrepancy_decreases_with_stiffness(self, twodisk, twodisk_solution):
        params, sol = twodisk_solution
        grid = uniform_grid(6.0, 1200)
        v, u = arc_sampled_controls(params, grid)
        y = integrate_upper(twodisk, v)
        xc = integrate_lower_catchup(twodisk, y, u, twodisk.x0)
        gaps = []
        for k in (1e2, 1e3):
            xp = integrate_lower_penalty(twodisk, y, u, twodisk.x0, step=1 / (2 * k), stiffness=k)
            gaps.append(np.max(np.linalg.norm(xp.states[-1] - xc.states[-1], axis=1)))
        assert gaps[1] <= gaps[0]

    def test_step_too_large_for_stiffness(self):
        scn = single_disk()
        grid = uniform_grid(6.0, 10)
        v = [constant_profile(grid, np.zeros(2))]
        y = integrate_upper(scn, v)
        with pytest.raises(StabilityError):
            integrate_lower_penalty(
                scn, y, [constant_profile(grid, [0.0])], scn.x0, step=1e-2, stiffness=1e3
            )


class TestFeasibilityReport:
    def test_coincident_disks_flag_full_overlap(self, twodisk):
        grid = uniform_grid(6.0, 10)
        y0 = twodisk.y0.copy()
        states = np.tile(y0[None, :, :], (11, 1, 1))
        states[:, 0, :] = states[:, 1, :]  # collapse disk 1 onto disk 2
        from crowdsweep.dynamics import Trajectory

        y = Trajectory(grid=grid, states=states)
        x = Trajectory(grid=grid, states=states.copy())
        u = [constant_profile(grid, [0.0]) for _ in range(2)]
        v = [constant_profile(grid, np.zeros(2)) for _ in range(2)]
        report = check_feasibility(twodisk, y, x, u, v)
        assert report.overlap_violation == pytest.approx(6.0)

    def test_control_membership_violation_flagged(self, twodisk):
        grid = uniform_grid(6.0, 10)
        v = [constant_profile(grid, np.zeros(2)) for _ in range(2)]
        u = [constant_profile(grid, [1.4]), constant_profile(grid, [0.0])]
        y = integrate_upper(twodisk, v)
        from crowdsweep.dynamics import Trajectory

        x = Trajectory(grid=grid, states=y.states.copy())
        report = check_feasibility(twodisk, y, x, u, v)
        assert report.control_violation == pytest.approx(0.4)
        assert report.control_participant == 0


class TestCosts:
    def test_symmetric_terminal_positions(self):
        yT = np.vstack([3 * VHAT, -3 * VHAT])
        assert cost_upper(yT) == pytest.approx(9.0)

    def test_zero_and_constant_effort(self):
        grid = uniform_grid(6.0, 13)
        assert cost_lower(constant_profile(grid, [0.0])) == 0.0
        assert cost_lower(constant_profile(grid, [1.0])) == pytest.approx(6.0)

    def test_permutation_and_time_reversal_invariance(self):
        rng = np.random.default_rng(11)
        yT = rng.normal(size=(4, 2))
        assert cost_upper(yT) == pytest.approx(cost_upper(yT[::-1]))
        grid = uniform_grid(2.0, 40)
        vals = rng.random((40, 1))
        fwd = cost_lower(ControlProfile(grid=grid, values=vals))
        rev = cost_lower(ControlProfile(grid=grid, values=vals[::-1]))
        assert fwd == pytest.approx(rev)


class TestH5Bounds:
    def test_reference_contact_path(self, twodisk, twodisk_solution):
        params, sol = twodisk_solution
        samples = [[], []]
        for i in range(2):
            for k in range(0, sol.x.grid.size, 60):
                if sol.x.contact[k, i]:
                    samples[i].append((sol.x.states[k, i], sol.y.states[k, i]))
        bounds = h5_bounds(twodisk, samples)
        for upper, lower in bounds:
            assert upper == pytest.approx(10 * S2, abs=1e-9)
            assert lower < 6.0 < upper

    def test_degenerate_drift_and_frozen_velocity(self):
        scn = Scenario(
            N=1,
            R=1.0,
            T=1.0,
            y0=[[2.0, 0.0]],
            drift=[AffineDrift(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2))],
            U=[IntervalSet([0.0], [0.0])],
            V=[SegmentSet([1.0, 0.0], 0.0)],
            M=[1.0],
            rho=[0.0],
            x0=[[2.0, 0.0]],
        )
        x = np.array([3.0, 0.0])
        y = np.array([2.0, 0.0])
        (upper, lower), = h5_bounds(scn, [[(x, y)]])
        assert upper == pytest.approx(0.0)
        assert lower == pytest.approx(0.0)

    def test_empty_sample_set_rejected(self, twodisk):
        with pytest.raises(ValueError):
            h5_bounds(twodisk, [[], []])


def test_scenario_invariants():
    with pytest.raises(ValueError):
        make_twodisk().__class__(
            N=2,
            R=3.0,
            T=6.0,
            y0=[[0.0, 0.0], [1.0, 0.0]],  # overlapping start
            drift=[ScaledLinearDrift(-8.0)] * 2,
            U=[IntervalSet([0.0], [1.0])] * 2,
            V=[BallSet(1.0)] * 2,
            M=[6.0, 6.0],
            rho=[1.0, 1.0],
        )
    with pytest.raises(ValueError):
        single_disk(M=0.0)
