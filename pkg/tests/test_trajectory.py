import math

import numpy as np
import pytest
from scipy.integrate import quad

from gapdrive.world import DriverParams, VehicleState, World, generate_random_scenario
from gapdrive.trajectory import (
    CostWeights,
    QuinticPoly,
    SafetyParams,
    Trajectory,
    TrajectoryCost,
    best_trajectory_to_gap,
    check_feasible,
    controls_from_trajectory,
    eval_poly,
    fit_quintic,
    integral_squared_jerk,
    predict_constant_velocity,
    sample_trajectories,
    thw,
    ttc,
)


def poly_value(c, t):
    """Independent Horner evaluation used as the oracle."""
    acc = 0.0
    for coef in reversed(c):
        acc = acc * t + coef
    return acc


def veh(id=1, lane=0, s=0.0, v=20.0, length=5.0):
    return VehicleState(id=id, lane_index=lane, s=s, d=0.0, v=v, a=0.0, length=length)


class GapStub:
    """Minimal gap geometry: interval [lo, hi] moving at speed v."""

    def __init__(self, lo, hi, v=0.0):
        self.lo, self.hi, self.v = lo, hi, v

    def predicted_interval(self, t):
        return self.lo + self.v * t, self.hi + self.v * t


class TestFitQuintic:
    def test_zero_boundaries_zero_polynomial(self):
        p = fit_quintic((0, 0, 0), (0, 0, 0), 4.0)
        assert all(abs(c) < 1e-12 for c in p.c)

    def test_constant_velocity_is_linear(self):
        p = fit_quintic((0, 10, 0), (30, 10, 0), 3.0)
        assert p.c[1] == pytest.approx(10.0, abs=1e-9)
        for c in p.c[2:]:
            assert abs(c) < 1e-9

    def test_boundary_residuals_frozen_case(self):
        # six boundary equations checked independently of eval_poly
        p = fit_quintic((0, 20, 0), (100, 25, 0), 5.0)
        c = p.c
        dc = [c[k] * k for k in range(1, 6)]
        ddc = [dc[k] * k for k in range(1, 5)]
        assert abs(poly_value(c, 0.0) - 0.0) < 1e-9
        assert abs(poly_value(dc, 0.0) - 20.0) < 1e-9
        assert abs(poly_value(ddc, 0.0) - 0.0) < 1e-9
        assert abs(poly_value(c, 5.0) - 100.0) < 1e-9
        assert abs(poly_value(dc, 5.0) - 25.0) < 1e-9
        assert abs(poly_value(ddc, 5.0) - 0.0) < 1e-9

    def test_boundary_exactness_sampled(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            start = tuple(rng.uniform(-30, 30, 3))
            end = tuple(rng.uniform(-30, 30, 3))
            T = float(rng.uniform(0.5, 6.0))
            p = fit_quintic(start, end, T)
            for t, want in ((0.0, start), (T, end)):
                got = eval_poly(p, t)[:3]
                for g, w in zip(got, want):
                    assert g == pytest.approx(w, abs=1e-9)

    def test_rejects_nonpositive_duration(self):
        with pytest.raises(ValueError):
            fit_quintic((0, 0, 0), (1, 0, 0), 0.0)
        with pytest.raises(ValueError):
            fit_quintic((0, 0, 0), (1, 0, 0), -2.0)


class TestEvalPoly:
    def test_zero_polynomial(self):
        p = QuinticPoly((0, 0, 0, 0, 0, 0), 5.0)
        assert eval_poly(p, 2.2) == (0, 0, 0, 0)

    def test_linear_polynomial(self):
        p = QuinticPoly((0, 7.0, 0, 0, 0, 0), 5.0)
        pos, v, a, j = eval_poly(p, 3.0)
        assert pos == pytest.approx(21.0, abs=1e-12)
        assert (v, a, j) == (7.0, 0.0, 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        c = tuple(rng.uniform(-2, 2, 6))
        p = QuinticPoly(c, 4.0)
        t, h = 1.3, 1e-4
        pos, v, a, j = eval_poly(p, t)
        f = lambda x: poly_value(c, x)
        assert pos == pytest.approx(f(t), rel=1e-12)
        v_fd = (f(t + h) - f(t - h)) / (2 * h)
        a_fd = (f(t + h) - 2 * f(t) + f(t - h)) / h**2
        j_fd = (f(t + 2 * h) - 2 * f(t + h) + 2 * f(t - h) - f(t - 2 * h)) / (2 * h**3)
        assert v == pytest.approx(v_fd, rel=1e-5)
        assert a == pytest.approx(a_fd, rel=1e-5)
        assert j == pytest.approx(j_fd, rel=1e-4)

    def test_domain_enforced(self):
        p = QuinticPoly((0, 1, 0, 0, 0, 0), 2.0)
        with pytest.raises(ValueError):
            eval_poly(p, -0.1)
        with pytest.raises(ValueError):
            eval_poly(p, 2.2)


class TestIntegralSquaredJerk:
    def test_low_degree_zero(self):
        assert integral_squared_jerk(QuinticPoly((3, 2, 1, 0, 0, 0), 5.0)) == 0.0

    def test_pure_cubic_hand_value(self):
        # j = 6*c3 constant, integral = 36*c3^2*T; c3=0.7, T=3 -> 52.92
        p = QuinticPoly((0, 0, 0, 0.7, 0, 0), 3.0)
        assert integral_squared_jerk(p) == pytest.approx(36 * 0.49 * 3, abs=1e-12)

    def test_matches_quadrature(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            c = tuple(rng.uniform(-1.5, 1.5, 6))
            T = float(rng.uniform(1.0, 6.0))
            p = QuinticPoly(c, T)

            def jerk(t):
                return 6 * c[3] + 24 * c[4] * t + 60 * c[5] * t**2

            want, _ = quad(lambda t: jerk(t) ** 2, 0.0, T)
            assert integral_squared_jerk(p) == pytest.approx(want, rel=1e-8)

    def test_nonnegative(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            p = QuinticPoly(tuple(rng.uniform(-3, 3, 6)), float(rng.uniform(0.5, 6)))
            assert integral_squared_jerk(p) >= 0.0


class TestPrediction:
    def test_stationary(self):
        v = veh(s=55.0, v=0.0)
        for t in (0.0, 2.5, 6.0):
            assert predict_constant_velocity(v, t) == 55.0

    def test_arithmetic(self):
        assert predict_constant_velocity(veh(s=10.0, v=20.0), 3.0) == 70.0

    def test_full_horizon(self):
        v = veh(s=12.0, v=17.0)
        assert predict_constant_velocity(v, 6.0) == 12.0 + 17.0 * 6.0


class TestTtcThw:
    def test_ttc_closing(self):
        assert ttc((0.0, 30.0), (50.0, 20.0)) == pytest.approx(5.0, abs=1e-12)

    def test_ttc_position_resolves_roles(self):
        # host ahead: reference is the (faster) follower
        assert ttc((50.0, 20.0), (0.0, 30.0)) == pytest.approx(5.0, abs=1e-12)

    def test_ttc_non_closing(self):
        assert ttc((0.0, 10.0), (50.0, 20.0)) == np.inf
        assert ttc((0.0, 20.0), (50.0, 20.0)) == np.inf

    def test_thw_formula(self):
        assert thw((0.0, 20.0), (40.0, 12.0)) == pytest.approx(2.0, abs=1e-12)

    def test_thw_stationary_follower(self):
        assert thw((0.0, 0.0), (40.0, 12.0)) == np.inf

    def test_thw_zero_gap(self):
        assert thw((10.0, 20.0), (10.0, 25.0)) == 0.0


def straight_trajectory(s0, v, T, lane=0, target_lane=None):
    target_lane = lane if target_lane is None else target_lane
    lon = fit_quintic((s0, v, 0.0), (s0 + v * T, v, 0.0), T)
    y0 = lane * 3.5
    lat = fit_quintic((y0, 0, 0), (target_lane * 3.5, 0, 0), T)
    cost = TrajectoryCost(0, 0, 0, 0, 0, 0)
    return Trajectory(lon, lat, T, target_lane, cost, False, "")


class TestCheckFeasible:
    def test_empty_road_gentle_trajectory(self):
        tr = straight_trajectory(0.0, 25.0, 4.0)
        verdict = check_feasible(tr, 5.0, [], SafetyParams())
        assert verdict.ok and verdict.reason == "ok"

    def test_overspeed_rejected(self):
        # 35 -> 38 m/s crosses v_max=36 while peak acceleration stays under 3
        lon = fit_quintic((0, 35, 0), (146, 38, 0), 4.0)
        lat = fit_quintic((0, 0, 0), (0, 0, 0), 4.0)
        tr = Trajectory(lon, lat, 4.0, 0, TrajectoryCost(0, 0, 0, 0, 0, 0), False, "")
        verdict = check_feasible(tr, 5.0, [], SafetyParams())
        assert not verdict.ok and verdict.reason == "speed"

    def test_over_acceleration_rejected(self):
        lon = fit_quintic((0, 20, 0), (60, 35, 0), 2.0)
        lat = fit_quintic((0, 0, 0), (0, 0, 0), 2.0)
        tr = Trajectory(lon, lat, 2.0, 0, TrajectoryCost(0, 0, 0, 0, 0, 0), False, "")
        verdict = check_feasible(tr, 5.0, [], SafetyParams())
        assert not verdict.ok and verdict.reason == "acceleration"

    def test_thw_violation_merge_too_close(self):
        # same speed 20 m/s, 10 m raw distance: thw = 0.5 s < 1 s
        tr = straight_trajectory(0.0, 20.0, 4.0)
        leader = veh(id=2, lane=0, s=10.0, v=20.0)
        verdict = check_feasible(tr, 5.0, [leader], SafetyParams())
        assert not verdict.ok and verdict.reason == "thw"

    def test_ttc_violation(self):
        # ego 10 m/s on a stopped vehicle 18 m ahead: ttc=1.8 < 2, thw=1.8 >= 1
        tr = straight_trajectory(0.0, 10.0, 2.0)
        stopped = veh(id=2, lane=0, s=18.0, v=0.0)
        verdict = check_feasible(tr, 5.0, [stopped], SafetyParams())
        assert not verdict.ok and verdict.reason == "ttc"

    def test_overlap_violation(self):
        tr = straight_trajectory(0.0, 0.0, 2.0)
        parked = veh(id=2, lane=0, s=4.0, v=0.0)
        verdict = check_feasible(tr, 5.0, [parked], SafetyParams())
        assert not verdict.ok and verdict.reason == "overlap"

    def test_adjacent_lane_not_gated_until_entered(self):
        # fast-closing vehicle one lane over is ignored by ttc/thw while the
        # ego keeps its own lane
        tr = straight_trajectory(0.0, 20.0, 4.0)
        other = veh(id=2, lane=1, s=10.0, v=0.0)
        verdict = check_feasible(tr, 5.0, [other], SafetyParams())
        assert verdict.ok

    def test_rear_vehicle_thw_protects_cut_in(self):
        # merging 8 m ahead of a follower doing 20 m/s: its thw = 0.4 < 1
        tr = straight_trajectory(0.0, 20.0, 4.0)
        rear = veh(id=2, lane=0, s=-8.0, v=20.0)
        verdict = check_feasible(tr, 5.0, [rear], SafetyParams())
        assert not verdict.ok and verdict.reason == "thw"


class TestSampleTrajectories:
    def test_counting_oracle(self):
        ego = VehicleState(0, 1, 100.0, 0.0, 25.0, 0.0, 5.0)
        gap = GapStub(120.0, 180.0, v=25.0)
        cands = sample_trajectories(ego, 1, 30.0, SafetyParams(), [], gap=gap)
        assert len(cands) == 5 * 4 * 5
        durations = sorted({c.duration for c in cands})
        assert durations == [2.0, 3.0, 4.0, 5.0, 6.0]

    def test_rejects_double_lane_change(self):
        ego = VehicleState(0, 0, 100.0, 0.0, 25.0, 0.0, 5.0)
        with pytest.raises(ValueError):
            sample_trajectories(ego, 2, 30.0, SafetyParams())

    def test_keep_course_candidate_near_zero_jerk(self):
        ego = VehicleState(0, 1, 100.0, 0.0, 30.0, 0.0, 5.0)
        cands = sample_trajectories(ego, 1, 30.0, SafetyParams(), [])
        best = min(c.cost.jerk_long + c.cost.jerk_lat for c in cands)
        assert best < 1e-9
        zero = [c for c in cands if c.cost.jerk_long + c.cost.jerk_lat < 1e-9]
        assert any(c.feasible for c in zero)

    def test_total_cost_composition(self):
        ego = VehicleState(0, 1, 100.0, 0.0, 22.0, 0.0, 5.0)
        w = CostWeights(w_j=2.0, w_d=3.0, w_v=5.0, w_g=7.0)
        gap = GapStub(130.0, 170.0, v=22.0)
        for c in sample_trajectories(ego, 0, 30.0, SafetyParams(), [], gap=gap, weights=w):
            want = (2.0 * (c.cost.jerk_long + c.cost.jerk_lat)
                    + 3.0 * c.cost.lane_center_dev + 5.0 * c.cost.speed_dev
                    + 7.0 * c.cost.gap_fit)
            assert c.cost.total == pytest.approx(want, rel=1e-12)

    def test_cost_monotonicity_in_jerk_weight(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            ego = VehicleState(0, 1, 100.0, 0.0, float(rng.uniform(15, 30)), 0.0, 5.0)
            gap = GapStub(ego.s + 20, ego.s + 90, v=float(rng.uniform(15, 30)))
            cands = sample_trajectories(ego, int(rng.integers(0, 3) % 2), 30.0,
                                        SafetyParams(), [], gap=gap)
            jerks = [c.cost.jerk_long + c.cost.jerk_lat for c in cands]
            low = int(np.argmin(jerks))

            def rank(w_j):
                totals = [w_j * (c.cost.jerk_long + c.cost.jerk_lat)
                          + c.cost.lane_center_dev + 10.0 * c.cost.speed_dev
                          + c.cost.gap_fit for c in cands]
                return sum(1 for t in totals if t < totals[low])

            assert rank(5.0) <= rank(1.0)


class TestBestTrajectory:
    def setup_scene(self):
        # co-moving 60 m gap with the ego just inside its rear edge
        ego = VehicleState(0, 1, 100.0, 0.0, 25.0, 0.0, 5.0)
        gap = GapStub(95.0, 155.0, v=25.0)
        cands = sample_trajectories(ego, 1, 30.0, SafetyParams(), [], gap=gap)
        return cands, gap

    def test_matches_brute_force_argmin(self):
        cands, gap = self.setup_scene()
        got = best_trajectory_to_gap(cands, gap)

        best, key = None, None
        for tr in cands:
            if not tr.feasible:
                continue
            s_end = poly_value(tr.longitudinal.c, tr.duration)
            lo, hi = gap.predicted_interval(tr.duration)
            if not (lo <= s_end <= hi):
                continue
            k = (tr.cost.total, tr.duration, tr.cost.jerk_long)
            if key is None or k < key:
                best, key = tr, k
        assert best is not None
        assert got is best

    def test_single_qualifying_candidate(self):
        cands, gap = self.setup_scene()
        pool = [c for c in cands if c.feasible]
        lone = None
        for c in pool:
            s_end = poly_value(c.longitudinal.c, c.duration)
            lo, hi = gap.predicted_interval(c.duration)
            if lo <= s_end <= hi:
                lone = c
                break
        assert lone is not None
        assert best_trajectory_to_gap([lone], gap) is lone

    def test_none_when_no_candidate_qualifies(self):
        cands, gap = self.setup_scene()
        unreachable = GapStub(5000.0, 5100.0, v=0.0)
        assert best_trajectory_to_gap(cands, unreachable) is None
        infeasible = [c for c in cands if not c.feasible]
        assert best_trajectory_to_gap(infeasible, gap) is None


class TestControlsFromTrajectory:
    def test_tracks_polynomial_exactly(self):
        tr = straight_trajectory(50.0, 20.0, 3.0, lane=1, target_lane=2)
        controls = controls_from_trajectory(tr, 30)
        for k in (4, 14, 29):
            t = (k + 1) * 0.1
            s, v, a, _ = eval_poly(tr.longitudinal, t)
            y, _, _, _ = eval_poly(tr.lateral, t)
            c = controls[k]
            assert c.s == pytest.approx(s, abs=1e-9)
            assert c.v == pytest.approx(v, abs=1e-9)
            assert c.lane_index * 3.5 + c.d == pytest.approx(y, abs=1e-9)
            assert abs(c.d) <= 3.5 / 2 + 1e-9
        assert controls[29].lane_index == 2

    def test_extrapolates_past_duration(self):
        tr = straight_trajectory(0.0, 10.0, 2.0)
        controls = controls_from_trajectory(tr, 30)
        assert controls[-1].s == pytest.approx(30.0, abs=1e-9)
        assert controls[-1].v == pytest.approx(10.0, abs=1e-9)


class TestSafetySoundness:
    def test_feasible_trajectories_collision_free_sampled(self):
        rng = np.random.default_rng(101)
        executed = 0
        for case in range(60):
            sc = generate_random_scenario(int(rng.integers(5, 30)), seed=int(rng.integers(1e6)))
            base = World(sc, constant_velocity=True)
            ego = base.ego
            target = int(np.clip(ego.lane_index + rng.integers(-1, 2), 0, 2))
            relevant = [v for v in base.vehicle_states()
                        if v.lane_index in (ego.lane_index, target)]
            cands = sample_trajectories(ego, target, 30.0, SafetyParams(), relevant)
            feas = [c for c in cands if c.feasible]
            for tr in feas[:: max(1, len(feas) // 3)][:3]:
                w = World(sc, constant_velocity=True)
                w.step(controls_from_trajectory(tr, int(tr.duration * 10)), tr.duration)
                assert not w.ego_collision_flag, f"case {case}"
                executed += 1
        assert executed > 50
